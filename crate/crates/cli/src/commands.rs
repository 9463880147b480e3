//! Subcommand bodies. Each returns the exit code it wants; errors map to
//! exit codes through [`CliError::exit_code`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use contraction_core::envs::{
    fmt_f64, write_records_csv, EpisodeFactory, Outcome, Regime, Rollout,
};
use contraction_core::numerics::{time_grid, Vector};
use contraction_core::policy::PolicyBank;
use contraction_core::trainer::{classify, evaluate, rng_for, train, EvalStats};
use contraction_core::verifier::{
    char_roots, default_robustness_scale, empirical_contraction, margins, robustness_check,
    theorem1_worst, Disturbance, MarginSample,
};
use rand::Rng;
use serde::Serialize;

use crate::config::{EnvSpec, ExperimentConfig};
use crate::plot::{self, Panel, Series};
use crate::report::{write_json, Check, Report, Timing, TransformSummary};
use crate::setup::{build_factory, load_bank, nominal_transforms, stream, Factory};
use crate::{with_factory, CliError, EXIT_CHECK_FAILED, EXIT_OK};

/// Output directory: `--out-dir` when given, else the config's.
pub fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = flag.map_or_else(|| PathBuf::from(&cfg.output.dir), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Outcome of the verification checks for one bank.
pub struct Verification {
    pub report: Report,
    pub samples: Vec<MarginSample>,
}

fn steps(horizon: f64, dt: f64) -> usize {
    time_grid(0.0, horizon, dt).map_or(0, |g| g.len() - 1)
}

fn margin_check(cfg: &ExperimentConfig, samples: &[MarginSample]) -> Check {
    let alpha = cfg.verify.alpha;
    match margins(samples, alpha) {
        Ok(rep) => {
            let failing = samples
                .iter()
                .filter(|s| s.c1().iter().chain(&s.c2()).any(|c| !(*c < -alpha)))
                .count();
            Check::new(
                "margins",
                cfg.verify.checks.margins,
                rep.pass,
                rep.worst_c1.max(rep.worst_c2),
                -alpha,
            )
            .with_detail(format!(
                "worst_c1={} worst_c2={} failing_samples={failing}/{}",
                rep.worst_c1,
                rep.worst_c2,
                samples.len()
            ))
        }
        Err(e) => Check::errored("margins", cfg.verify.checks.margins, -alpha, e),
    }
}

fn root_check(cfg: &ExperimentConfig, samples: &[MarginSample]) -> Check {
    let worst = samples
        .iter()
        .flat_map(|s| {
            (0..s.dim()).map(move |i| char_roots(s.lambda[i], s.r[i], s.j1[i], s.j2[i]).max_real())
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Check::new(
        "char_roots",
        cfg.verify.checks.char_roots,
        worst < 0.0,
        worst,
        0.0,
    )
}

fn sin_disturbance(dim: usize, d_bar: f64, omega: f64) -> Arc<Disturbance> {
    Arc::new(move |t: f64| Vector::from_element(dim, d_bar * (omega * t).sin()))
}

/// Runs every check of the config on `bank`.
pub fn verify_bank<F: EpisodeFactory>(
    cfg: &ExperimentConfig,
    factory: &F,
    bank: &PolicyBank,
) -> Result<Verification, CliError> {
    let v = &cfg.verify;
    let tp = factory.nominal_transforms()?;
    let mut timing = Timing::default();
    let samples =
        factory.margin_samples(bank, &mut rng_for(cfg.seed, &[stream::MARGINS]), v.samples)?;
    timing.margin_samples = samples.len();
    let mut checks = vec![margin_check(cfg, &samples), root_check(cfg, &samples)];

    // Trajectory pairs: the episode's initial state and an offset copy.
    let mut episodes = Vec::with_capacity(v.pairs);
    for k in 0..v.pairs {
        let mut rng = rng_for(cfg.seed, &[stream::PAIRS, k as u64]);
        let ep = factory.build(bank, &mut rng)?;
        let x0 = ep.x0.clone();
        let dir = Vector::from_fn(x0.len(), |_, _| rng.random_range(-1.0..1.0));
        let x1 = &x0 + dir * (v.pair_offset * (1.0 + x0.norm()) / x0.len() as f64);
        episodes.push((ep, x1));
    }
    timing.pairs = episodes.len();
    let horizon = v.horizon.unwrap_or_else(|| episodes[0].0.horizon);
    let dt = episodes[0].0.closed_loop.dt;
    let beta_floor = 0.5 * v.beta;
    let mut fits = Vec::with_capacity(episodes.len());
    let mut fit_error = None;
    for (ep, x1) in &episodes {
        timing.simulated_steps += 2 * steps(horizon, dt);
        match empirical_contraction(&ep.closed_loop, &[(ep.x0.clone(), x1.clone())], horizon) {
            Ok(f) => fits.push(f),
            Err(e) => {
                fit_error = Some(e.to_string());
                break;
            }
        }
    }
    let contraction_on = v.checks.contraction;
    let min_beta = fits
        .iter()
        .map(|f| f.beta_hat)
        .fold(f64::INFINITY, f64::min);
    let min_r2 = fits.iter().map(|f| f.r2).fold(f64::INFINITY, f64::min);
    checks.push(match &fit_error {
        Some(e) => Check::errored("contraction", contraction_on, beta_floor, e),
        None => Check::new(
            "contraction",
            contraction_on,
            min_beta > beta_floor,
            min_beta,
            beta_floor,
        )
        .with_detail(format!("min_r2={min_r2}")),
    });

    // F1 along the nominal member of every pair.
    let theorem1_on = cfg.theorem1_enabled();
    let mut systems = Vec::new();
    let mut t1_error = None;
    for (ep, _) in &episodes {
        timing.simulated_steps += steps(horizon, dt);
        match ep.closed_loop.aux_trace(&ep.x0, horizon, v.theorem1_stride) {
            Ok(s) => systems.extend(s),
            Err(e) => {
                t1_error = Some(e.to_string());
                break;
            }
        }
    }
    timing.theorem1_samples = systems.len();
    let threshold = -v.beta;
    checks.push(match (&t1_error, theorem1_worst(&systems, v.beta)) {
        (Some(e), _) => Check::errored("theorem1", theorem1_on, threshold, e),
        (None, Ok(t)) => Check::new("theorem1", theorem1_on, t.pass, t.lambda_f1, t.threshold)
            .with_detail(format!("nu_plus={}", t.nu_plus)),
        (None, Err(e)) => Check::errored("theorem1", theorem1_on, threshold, e),
    });

    // Disturbed against nominal on the first pair's loop.
    let rb = &v.robustness;
    let robust_on = v.checks.robustness;
    let beta_rate = if v.beta > 0.0 { v.beta } else { min_beta };
    let (ep0, _) = &episodes[0];
    let dim = ep0.x0.len();
    let d_sup = rb.d_bar * (dim as f64).sqrt();
    let scale = rb.scale.unwrap_or_else(|| default_robustness_scale(&tp));
    timing.simulated_steps += 2 * steps(horizon, dt);
    checks.push(if !(beta_rate > 0.0 && beta_rate.is_finite()) {
        Check::errored(
            "robustness",
            robust_on,
            f64::NAN,
            "no positive contraction rate",
        )
    } else {
        let d = sin_disturbance(dim, rb.d_bar, rb.omega);
        match robustness_check(
            &ep0.closed_loop,
            &ep0.x0,
            horizon,
            d.as_ref(),
            d_sup,
            beta_rate,
            scale,
            rb.slack,
        ) {
            Ok(r) => Check::new(
                "robustness",
                robust_on,
                r.pass,
                r.observed_steady,
                r.ball_radius * (1.0 + r.slack),
            )
            .with_detail(format!(
                "beta={} scale={} d_bar={}",
                r.beta, r.scale, r.d_bar
            )),
            Err(e) => Check::errored("robustness", robust_on, f64::NAN, e),
        }
    });

    Ok(Verification {
        report: Report {
            command: "verify".into(),
            env: cfg.env.kind().into(),
            config_digest: cfg.digest(),
            checks,
            transforms: TransformSummary::of(&tp),
            timing,
        },
        samples,
    })
}

fn write_margins_csv(path: &Path, samples: &[MarginSample]) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(out, "sample,dim,lambda,r,j1,j2,c1,c2,root_max_re")?;
    for (k, s) in samples.iter().enumerate() {
        let (c1, c2) = (s.c1(), s.c2());
        for i in 0..s.dim() {
            let root = char_roots(s.lambda[i], s.r[i], s.j1[i], s.j2[i]).max_real();
            writeln!(
                out,
                "{k},{i},{},{},{},{},{},{},{}",
                fmt_f64(s.lambda[i]),
                fmt_f64(s.r[i]),
                fmt_f64(s.j1[i]),
                fmt_f64(s.j2[i]),
                fmt_f64(c1[i]),
                fmt_f64(c2[i]),
                fmt_f64(root)
            )?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn print_checks(report: &Report) {
    for c in &report.checks {
        let state = match (c.enabled, c.pass) {
            (false, _) => "skip",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!(
            "{state} {:<12} worst={:.6e} threshold={:.6e}",
            c.name, c.worst_value, c.threshold
        );
    }
}

pub fn cmd_verify(
    cfg: &ExperimentConfig,
    policy: Option<&Path>,
    out: &Path,
) -> Result<i32, CliError> {
    let factory = build_factory(cfg)?;
    let bank = load_bank(cfg, &factory, policy)?;
    let ver = with_factory!(&factory, f => verify_bank(cfg, f, &bank))?;
    write_json(&out.join("report.json"), &ver.report)?;
    write_margins_csv(&out.join("margins.csv"), &ver.samples)?;
    print_checks(&ver.report);
    Ok(if ver.report.pass() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn rollout_panels(cfg: &ExperimentConfig, ro: &Rollout) -> Vec<Panel> {
    let n = ro.records.first().map_or(0, |r| r.error.len());
    let err = Panel {
        title: "tracking error".into(),
        series: (0..n)
            .map(|i| Series {
                label: format!("e{i}"),
                points: ro.records.iter().map(|r| (r.t, r.error[i])).collect(),
            })
            .collect(),
    };
    let second = match cfg.env {
        EnvSpec::Peg(_) => Panel {
            title: "contact force".into(),
            series: vec![Series {
                label: "f".into(),
                points: ro
                    .records
                    .iter()
                    .map(|r| {
                        (
                            r.t,
                            if r.regime == Regime::Contact {
                                r.y[1]
                            } else {
                                0.0
                            },
                        )
                    })
                    .collect(),
            }],
        },
        _ => Panel {
            title: "policy output".into(),
            series: (0..n)
                .map(|i| Series {
                    label: format!("a{i}"),
                    points: ro.records.iter().map(|r| (r.t, r.a[i])).collect(),
                })
                .collect(),
        },
    };
    vec![err, second]
}

#[derive(Serialize)]
struct RolloutSummary<'a> {
    config_digest: String,
    reward: Option<f64>,
    diverged: bool,
    records: usize,
    transform_updates: usize,
    oscillating: bool,
    drifting: bool,
    trajectory: &'a str,
}

pub fn cmd_rollout(
    cfg: &ExperimentConfig,
    policy: Option<&Path>,
    traj: Option<&Path>,
    plot_path: Option<&Path>,
    out: &Path,
) -> Result<i32, CliError> {
    let factory = build_factory(cfg)?;
    let bank = load_bank(cfg, &factory, policy)?;
    let ro = with_factory!(&factory, f => {
        let ep = f.build(&bank, &mut rng_for(cfg.seed, &[stream::ROLLOUT]))?;
        ep.closed_loop.rollout(&ep.x0, ep.horizon)?
    });
    let traj_path = traj.map_or_else(|| out.join("trajectory.csv"), Path::to_path_buf);
    let mut csv = Vec::new();
    write_records_csv(&ro.records, &mut csv)?;
    fs::write(&traj_path, csv)?;
    if let Some(p) = plot_path {
        fs::write(p, plot::render(&rollout_panels(cfg, &ro)))?;
    }
    let class = classify(&ro, &cfg.detector);
    let summary = RolloutSummary {
        config_digest: cfg.digest(),
        reward: ro.reward.is_finite().then_some(ro.reward),
        diverged: ro.diverged(),
        records: ro.records.len(),
        transform_updates: ro.transform_updates,
        oscillating: class.oscillating,
        drifting: class.drifting,
        trajectory: &traj_path.to_string_lossy(),
    };
    write_json(&out.join("rollout.json"), &summary)?;
    match ro.outcome {
        Outcome::Completed => {
            println!(
                "rollout completed: reward={:.6e} records={}",
                ro.reward,
                ro.records.len()
            );
            Ok(EXIT_OK)
        }
        Outcome::Diverged { t, norm } => {
            println!("rollout diverged at t={t} (|x|={norm:.3e}); partial trajectory kept");
            Ok(EXIT_CHECK_FAILED)
        }
    }
}

#[derive(Serialize)]
struct EvalSummary {
    mean_return: Option<f64>,
    frac_diverged: f64,
    frac_oscillating: f64,
    frac_drifting: f64,
    episodes: usize,
    unstable: usize,
}

impl From<&EvalStats> for EvalSummary {
    fn from(s: &EvalStats) -> Self {
        Self {
            mean_return: s.mean_return.is_finite().then_some(s.mean_return),
            frac_diverged: s.frac_diverged,
            frac_oscillating: s.frac_oscillating,
            frac_drifting: s.frac_drifting,
            episodes: s.episodes,
            unstable: s.unstable_count(),
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    config_digest: String,
    constrained: bool,
    iterations: usize,
    total_violations: usize,
    rejected_updates: usize,
    initial: EvalSummary,
    trained: EvalSummary,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<i32, CliError> {
    let factory = build_factory(cfg)?;
    let bank0 = load_bank(cfg, &factory, None)?;
    let tc = cfg.train_config();
    let (bank, log, before, after) = with_factory!(&factory, f => {
        let (bank, log) = train(f, &bank0, &tc)?;
        let before = evaluate(&bank0, f, cfg.eval_episodes, cfg.seed, &cfg.detector)?;
        let after = evaluate(&bank, f, cfg.eval_episodes, cfg.seed, &cfg.detector)?;
        (bank, log, before, after)
    });
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    fs::write(out.join("train_log.csv"), csv)?;
    fs::write(out.join("bank.json"), bank.to_json() + "\n")?;
    let summary = TrainSummary {
        config_digest: cfg.digest(),
        constrained: tc.constrained,
        iterations: tc.iterations,
        total_violations: log.total_violations(),
        rejected_updates: log.rows.iter().filter(|r| r.rejected).count(),
        initial: EvalSummary::from(&before),
        trained: EvalSummary::from(&after),
    };
    write_json(&out.join("train_report.json"), &summary)?;
    println!(
        "trained {} iterations: violations={} rejected={} unstable {}/{} -> {}/{}",
        tc.iterations,
        summary.total_violations,
        summary.rejected_updates,
        summary.initial.unstable,
        before.episodes,
        summary.trained.unstable,
        after.episodes
    );
    if tc.constrained && summary.total_violations > 0 {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 10] = [
    "k_sur",
    "k_sur_max",
    "tau_x",
    "tau_z",
    "tau_x_scale",
    "tau_z_scale",
    "x_d",
    "f_d",
    "alpha",
    "horizon",
];

/// Config with `name` set to `value`.
pub fn apply_param(
    base: &ExperimentConfig,
    name: &str,
    value: f64,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    let peg_only = || CliError::Usage(format!("parameter {name} applies to the peg env only"));
    match (name, &mut cfg.env) {
        ("alpha", _) => cfg.verify.alpha = value,
        ("horizon", EnvSpec::Peg(p)) => p.horizon = value,
        ("horizon", EnvSpec::Lti(l)) => l.horizon = value,
        ("horizon", EnvSpec::SecondOrder(s)) => s.horizon = value,
        (_, EnvSpec::Peg(p)) => {
            let s = &mut p.sampling;
            match name {
                "k_sur" => s.k_sur = [value, value],
                "k_sur_max" => s.k_sur = [s.k_sur[0], value],
                "tau_x" => s.tau_x = [value, value],
                "tau_z" => s.tau_z = [value, value],
                "tau_x_scale" => s.tau_x = [s.tau_x[0] * value, s.tau_x[1] * value],
                "tau_z_scale" => s.tau_z = [s.tau_z[0] * value, s.tau_z[1] * value],
                "x_d" => s.x_d = [value, value],
                "f_d" => s.f_d = [value, value],
                _ => return Err(CliError::Usage(format!("unknown sweep parameter {name}"))),
            }
        }
        _ if SWEEP_PARAMS.contains(&name) => return Err(peg_only()),
        _ => return Err(CliError::Usage(format!("unknown sweep parameter {name}"))),
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub margins: Check,
    pub eval: EvalStats,
    pub final_errors: Vec<f64>,
}

/// Margins and evaluation of `bank` at one grid point.
pub fn sweep_point(
    cfg: &ExperimentConfig,
    value: f64,
    bank: &PolicyBank,
) -> Result<SweepPoint, CliError> {
    let factory = build_factory(cfg)?;
    let (samples, eval, finals) = with_factory!(&factory, f => {
        let samples = f.margin_samples(bank, &mut rng_for(cfg.seed, &[stream::MARGINS]), cfg.verify.samples)?;
        let eval = evaluate(bank, f, cfg.eval_episodes, cfg.seed, &cfg.detector)?;
        let mut finals = Vec::with_capacity(cfg.eval_episodes);
        for e in 0..cfg.eval_episodes {
            let ep = f.build(bank, &mut rng_for(cfg.seed, &[stream::SWEEP, e as u64]))?;
            let ro = ep.closed_loop.rollout(&ep.x0, ep.horizon)?;
            finals.push(ro.error_norms().last().copied().unwrap_or(f64::NAN));
        }
        (samples, eval, finals)
    });
    Ok(SweepPoint {
        value,
        margins: margin_check(cfg, &samples),
        eval,
        final_errors: finals,
    })
}

const HIST_BINS: usize = 10;

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    policy: Option<&Path>,
    param: &str,
    values: &[f64],
    out: &Path,
) -> Result<i32, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("--values must not be empty".into()));
    }
    // Validates the name before any work.
    let grid = values
        .iter()
        .map(|&v| apply_param(cfg, param, v))
        .collect::<Result<Vec<_>, _>>()?;
    let factory = build_factory(cfg)?;
    let bank = load_bank(cfg, &factory, policy)?;
    let points = grid
        .iter()
        .zip(values)
        .map(|(c, &v)| sweep_point(c, v, &bank))
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv = Vec::new();
    writeln!(
        csv,
        "param,value,margin_pass,worst_margin,mean_return,frac_diverged,frac_oscillating,frac_drifting,mean_final_error"
    )?;
    for p in &points {
        let mean_final = p.final_errors.iter().sum::<f64>() / p.final_errors.len() as f64;
        writeln!(
            csv,
            "{param},{},{},{},{},{},{},{},{}",
            fmt_f64(p.value),
            p.margins.pass,
            fmt_f64(p.margins.worst_value),
            fmt_f64(p.eval.mean_return),
            fmt_f64(p.eval.frac_diverged),
            fmt_f64(p.eval.frac_oscillating),
            fmt_f64(p.eval.frac_drifting),
            fmt_f64(mean_final)
        )?;
    }
    fs::write(out.join("sweep.csv"), csv)?;

    let top = points
        .iter()
        .flat_map(|p| p.final_errors.iter())
        .filter(|e| e.is_finite())
        .fold(0.0f64, |a, &e| a.max(e));
    let width = if top > 0.0 {
        top / HIST_BINS as f64
    } else {
        1.0
    };
    let mut hist = Vec::new();
    writeln!(hist, "param,value,bin_lo,bin_hi,count")?;
    for p in &points {
        let mut counts = [0usize; HIST_BINS];
        for e in p.final_errors.iter().filter(|e| e.is_finite()) {
            counts[((e / width) as usize).min(HIST_BINS - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            writeln!(
                hist,
                "{param},{},{},{},{c}",
                fmt_f64(p.value),
                fmt_f64(b as f64 * width),
                fmt_f64((b + 1) as f64 * width)
            )?;
        }
    }
    fs::write(out.join("sweep_hist.csv"), hist)?;

    let passed = points.iter().filter(|p| p.margins.pass).count();
    println!("sweep {param}: margin pass rate {passed}/{}", points.len());
    Ok(if passed == points.len() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

/// Nominal transforms of the configured env, for callers outside the commands.
pub fn transforms_of(cfg: &ExperimentConfig) -> Result<TransformSummary, CliError> {
    let factory: Factory = build_factory(cfg)?;
    Ok(TransformSummary::of(&nominal_transforms(&factory)?))
}
