use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contraction_cli::commands::apply_param;
use contraction_cli::{CliError, ExperimentConfig, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};
use contraction_core::policy::{ConstrainedMLP, PolicyBank};
use proptest::prelude::*;

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("cli_tests")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(dir: &Path, file: &str, text: &str) -> String {
    let p = dir.join(file);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contraction-cli"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const PEG: &str = r#"{"schema_version": 1, "seed": 1, "env": {"kind": "peg"}, "eval_episodes": 2}"#;
const LTI: &str = r#"{"schema_version": 1, "seed": 2,
    "env": {"kind": "lti", "a": [1.0], "b": [1.0], "dt": 0.01, "horizon": 1.0},
    "train": {"iterations": 3, "population": 4, "episodes_per_eval": 1}, "eval_episodes": 2}"#;

#[test]
fn verify_passes_on_default_peg_bank() {
    let dir = scratch("verify_peg");
    let cfg = write(&dir, "peg.json", PEG);
    let o = cli(&["verify", &cfg], &dir);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "margins",
            "char_roots",
            "contraction",
            "theorem1",
            "robustness"
        ]
    );
    let csv = fs::read_to_string(dir.join("margins.csv")).unwrap();
    assert!(csv.starts_with("sample,dim,lambda,r,j1,j2,c1,c2,root_max_re\n"));
    assert_eq!(csv.lines().count(), 1 + 256 * 2);
}

#[test]
fn malformed_inputs_exit_with_usage_code() {
    let dir = scratch("usage");
    let bad_cfg = write(
        &dir,
        "bad.json",
        r#"{"schema_version": 1, "env": {"kind": "peg"}, "extra": 1}"#,
    );
    assert_eq!(code(&cli(&["verify", &bad_cfg], &dir)), EXIT_USAGE);
    let cfg = write(&dir, "peg.json", PEG);
    let missing = dir.join("nope.json").to_string_lossy().into_owned();
    assert_eq!(
        code(&cli(&["verify", &cfg, "--policy", &missing], &dir)),
        EXIT_USAGE
    );
    let garbage = write(&dir, "garbage.json", "{");
    assert_eq!(
        code(&cli(&["rollout", &cfg, "--policy", &garbage], &dir)),
        EXIT_USAGE
    );
    assert_eq!(
        code(&cli(
            &["sweep", &cfg, "--param", "mass", "--values", "1"],
            &dir
        )),
        EXIT_USAGE
    );
    assert_eq!(code(&cli(&["frobnicate", &cfg], &dir)), EXIT_USAGE);
}

#[test]
fn trained_bank_round_trips_through_policy_flag() {
    let dir = scratch("train_then_verify");
    let cfg = write(&dir, "lti.json", LTI);
    let o = cli(&["train", &cfg], &dir);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    let bank = dir.join("bank.json").to_string_lossy().into_owned();
    PolicyBank::from_json(&fs::read_to_string(&bank).unwrap()).unwrap();
    let o = cli(&["rollout", &cfg, "--policy", &bank], &dir);
    assert_eq!(code(&o), EXIT_OK);
    assert!(dir.join("trajectory.csv").exists());
}

#[test]
fn policy_dimension_mismatch_is_a_usage_error() {
    let dir = scratch("dim_mismatch");
    let cfg = write(&dir, "peg.json", PEG);
    let one = PolicyBank::new(
        vec![ConstrainedMLP::single(&[1.0], 0.0)],
        vec![1.0],
        vec![1.0],
        vec![false],
    )
    .unwrap();
    let bank = write(&dir, "one.json", &one.to_json());
    assert_eq!(
        code(&cli(&["verify", &cfg, "--policy", &bank], &dir)),
        EXIT_USAGE
    );
}

#[test]
fn divergent_rollout_keeps_partial_trajectory() {
    let dir = scratch("diverge");
    let cfg = write(
        &dir,
        "lti.json",
        &LTI.replace(
            r#""eval_episodes""#,
            r#""policy": {"set_flips": false}, "eval_episodes""#,
        ),
    );
    // Positive feedback with a gain far beyond the divergence bound.
    let huge = PolicyBank::new(
        vec![ConstrainedMLP::single(&[1.0], 0.5)],
        vec![1.0],
        vec![1e7],
        vec![false],
    )
    .unwrap();
    let bank = write(&dir, "huge.json", &huge.to_json());
    let o = cli(&["rollout", &cfg, "--policy", &bank], &dir);
    assert_eq!(code(&o), EXIT_CHECK_FAILED);
    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let rows = traj.lines().count() - 1;
    assert!((1..101).contains(&rows), "{rows} rows");
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(summary["diverged"], true);
    assert!(summary["reward"].is_null());
}

#[test]
fn sweep_writes_one_row_per_value_and_histograms() {
    let dir = scratch("sweep");
    let cfg = write(&dir, "peg.json", PEG);
    let o = cli(
        &[
            "sweep",
            &cfg,
            "--param",
            "tau_z_scale",
            "--values",
            "0.5,1.5",
        ],
        &dir,
    );
    assert_eq!(code(&o), EXIT_OK);
    let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let hist = fs::read_to_string(dir.join("sweep_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 10);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = scratch("seed");
    let cfg = write(&dir, "peg.json", PEG);
    let a = dir.join("a");
    let b = dir.join("b");
    cli(&["rollout", &cfg], &a);
    cli(&["--seed", "99", "rollout", &cfg], &b);
    let ta = fs::read(a.join("trajectory.csv")).unwrap();
    let tb = fs::read(b.join("trajectory.csv")).unwrap();
    assert_ne!(ta, tb);
}

#[test]
fn sweep_params_outside_the_peg_are_rejected() {
    let cfg = ExperimentConfig::from_json(LTI).unwrap();
    assert!(matches!(
        apply_param(&cfg, "k_sur", 2.0),
        Err(CliError::Usage(_))
    ));
    assert_eq!(apply_param(&cfg, "horizon", 2.0).unwrap().env, {
        let mut c = cfg.clone();
        if let contraction_cli::config::EnvSpec::Lti(l) = &mut c.env {
            l.horizon = 2.0;
        }
        c.env
    });
    assert!(matches!(
        apply_param(&cfg, "horizon", 0.0),
        Err(CliError::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_json_round_trips(
        seed in any::<u64>(),
        alpha in 0.0f64..1.0,
        samples in 1usize..1000,
        pop in 1usize..20,
        k_hi in 1.0f64..100.0,
    ) {
        let mut cfg = ExperimentConfig::from_json(PEG).unwrap();
        cfg.seed = seed;
        cfg.verify.alpha = alpha;
        cfg.verify.samples = samples;
        cfg.train.population = 2 * pop;
        if let contraction_cli::config::EnvSpec::Peg(p) = &mut cfg.env {
            p.sampling.k_sur[1] = k_hi;
        }
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn k_sur_max_sweep_keeps_the_lower_bound(v in 1.0f64..200.0) {
        let cfg = ExperimentConfig::from_json(PEG).unwrap();
        let swept = apply_param(&cfg, "k_sur_max", v).unwrap();
        let contraction_cli::config::EnvSpec::Peg(p) = &swept.env else { unreachable!() };
        prop_assert_eq!(p.sampling.k_sur, [1.0, v]);
    }
}
