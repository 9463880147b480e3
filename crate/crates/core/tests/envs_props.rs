use contraction_core::envs::{
    write_records_csv, ClosedLoop, EpisodeFactory, PegFactory, PegParams, PegPlant, Plant, Regime,
    Rollout, PEG_TAU_X, PEG_TAU_Z,
};
use contraction_core::numerics::{integrate_rk4, Vector};
use contraction_core::policy::{Architecture, PolicyBank, SignMode, WeightInit};
use nalgebra::dvector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn constrained_bank(seed: u64) -> PolicyBank {
    let factory = PegFactory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyBank::random(
        &[true, true],
        &factory.policy_scale(1.0).unwrap(),
        &Architecture::default(),
        &WeightInit::default(),
        SignMode::Positive,
        &mut rng,
    )
    .unwrap()
}

fn peg_rollout(seed: u64) -> (Rollout, PegParams) {
    let factory = PegFactory::default();
    let bank = constrained_bank(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let ep = factory.build(&bank, &mut rng).unwrap();
    let p = *ep.closed_loop.plant.params();
    (ep.closed_loop.rollout(&ep.x0, ep.horizon).unwrap(), p)
}

fn regime_changes(ro: &Rollout) -> usize {
    ro.records
        .windows(2)
        .filter(|w| w[0].regime != w[1].regime)
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regime_label_tracks_the_gap(seed in any::<u64>()) {
        let (ro, p) = peg_rollout(seed);
        prop_assert!(!ro.diverged());
        for r in &ro.records {
            // φ = K_sur·(z − g(x)), so the gap sign is the sign of φ.
            let x = r.y[0];
            let z = r.y[1] / p.k_sur + p.surface(x);
            let contact = z - p.surface(x) <= 0.0;
            prop_assert_eq!(r.regime == Regime::Contact, contact);
        }
        // Every regime change in the record stream rebuilt the transforms once.
        prop_assert_eq!(regime_changes(&ro), ro.transform_updates);
    }
}

#[test]
fn free_flight_matches_scalar_lags() {
    let p = PegParams {
        k1s: 0.0,
        k2s: 0.0,
        k_sur: 10.0,
        ..PegParams::default()
    };
    let plant = PegPlant::new(p).unwrap();
    let (x0, z0) = (2.0, 0.5);
    let y0 = dvector![x0, p.k_sur * z0];
    let u = dvector![0.0, 0.0];
    let traj = integrate_rk4(|t, y: &Vector| plant.deriv(y, &u, t), &y0, 0.0, 0.05, 1e-4).unwrap();
    for (t, y) in traj.times.iter().zip(&traj.states) {
        assert_eq!(plant.regime(y), Regime::Free);
        let x_exact = x0 * (-t / PEG_TAU_X).exp();
        let z_exact = z0 * (-t / PEG_TAU_Z).exp();
        assert!((y[0] - x_exact).abs() <= 1e-9 * x0, "x at {t}");
        assert!((y[1] / p.k_sur - z_exact).abs() <= 1e-9 * z0, "z at {t}");
    }
}

fn sup_gap(coarse: &Rollout, fine: &Rollout, stride: usize) -> f64 {
    coarse
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let f = &fine.records[k * stride];
            assert!((f.t - r.t).abs() < 1e-9);
            r.y.iter()
                .zip(&f.y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn zero_order_hold_converges_at_first_order() {
    // Starts in contact so that no regime switch lands between grid points.
    let p = PegParams {
        k_sur: 12.0,
        x_d: 2.0,
        f_d: -0.2,
        ..PegParams::default()
    };
    let bank = constrained_bank(7);
    let y0 = dvector![1.4, -0.05];
    let run = |dt: f64| {
        ClosedLoop::new(PegPlant::new(p).unwrap(), Some(bank.clone()), dt)
            .unwrap()
            .rollout(&y0, 0.2)
            .unwrap()
    };
    let dts = [2e-3, 1e-3, 5e-4, 2.5e-4];
    let runs: Vec<Rollout> = dts.iter().map(|&dt| run(dt)).collect();
    for r in &runs {
        assert!(r.records.iter().all(|rec| rec.regime == Regime::Contact));
    }
    let gaps: Vec<f64> = (0..3).map(|k| sup_gap(&runs[k], &runs[k + 1], 2)).collect();
    for w in gaps.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.0, "gaps {gaps:?}, order {order}");
    }
}

#[test]
fn landing_updates_transforms_exactly_once() {
    let p = PegParams {
        k1s: 0.005,
        k2s: -0.004,
        k_sur: 20.0,
        x_d: 2.0,
        f_d: -0.2,
        ..PegParams::default()
    };
    let plant = PegPlant::new(p).unwrap();
    // Start 0.1 above the surface; the reference force pulls the peg down.
    let x0 = 1.8;
    let y0 = dvector![x0, p.k_sur * 0.1];
    assert_eq!(plant.regime(&y0), Regime::Free);
    let lp = ClosedLoop::new(plant, Some(constrained_bank(11)), 1e-3).unwrap();
    let ro = lp.rollout(&y0, 1.0).unwrap();
    assert_eq!(ro.transform_updates, 1);
    assert_eq!(regime_changes(&ro), 1);
    assert_eq!(ro.records.last().unwrap().regime, Regime::Contact);
}

#[test]
fn trajectory_csv_is_reproducible() {
    let (a, _) = peg_rollout(3);
    let (b, _) = peg_rollout(3);
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    write_records_csv(&a.records, &mut ca).unwrap();
    write_records_csv(&b.records, &mut cb).unwrap();
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    assert!(text.starts_with("t,y0,y1,z0,z1,a0,a1,u0,u1,regime,c1_0,c1_1,c2_0,c2_1\n"));
    assert_eq!(text.lines().count(), a.records.len() + 1);
}
