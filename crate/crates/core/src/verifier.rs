//! Analytic and empirical contraction certificates.
//!
//! Analytic checks work on sampled Jacobians: the per-dimension margins
//! `c1 = ∂π/∂s1·R_ii + Λ_ii`, `c2 = ∂π/∂s2·R_ii`, the self-feedback
//! characteristic roots, and the symmetric-part bound on `F1`. Empirical
//! checks simulate trajectory pairs and fit the log-distance decay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    integrate_rk4_bounded, sym_lambda_max, Mat, NumericsError, Vector, DEFAULT_DIVERGENCE_BOUND,
};
use crate::transform::{AuxDifferentialSystem, TransformPair};

/// Leading fraction of the horizon excluded from decay fits.
pub const FIT_SKIP_FRACTION: f64 = 0.05;
/// Distances at or below this are excluded from decay fits.
pub const FIT_DISTANCE_FLOOR: f64 = 1e-10;
/// Trailing fraction of the horizon used for steady-state distances.
pub const STEADY_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("pair {pair}: fewer than three usable samples for the decay fit")]
    InsufficientData { pair: usize },
    #[error("simulation failed: {0}")]
    Simulation(String),
}

/// Diagonal quantities entering the margins at one sampled state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSample {
    pub lambda: Vec<f64>,
    pub r: Vec<f64>,
    pub j1: Vec<f64>,
    pub j2: Vec<f64>,
}

impl MarginSample {
    pub fn from_system(sys: &AuxDifferentialSystem) -> Self {
        Self {
            lambda: sys.lambda.diagonal().iter().cloned().collect(),
            r: sys.r.diagonal().iter().cloned().collect(),
            j1: sys.jac_s1.clone(),
            j2: sys.jac_s2.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn c1(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.j1[i] * self.r[i] + self.lambda[i])
            .collect()
    }

    pub fn c2(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.j2[i] * self.r[i]).collect()
    }

    fn validate(&self) -> Result<(), VerifierError> {
        let n = self.dim();
        for got in [self.r.len(), self.j1.len(), self.j2.len()] {
            if got != n {
                return Err(VerifierError::DimMismatch { expected: n, got });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Worst (largest) `c1` per dimension over the samples.
    pub c1: Vec<f64>,
    /// Worst (largest) `c2` per dimension over the samples.
    pub c2: Vec<f64>,
    pub alpha: f64,
    pub worst_c1: f64,
    pub worst_c2: f64,
    pub samples: usize,
    /// Smallest `|∂π/∂s|` seen over all samples and dimensions.
    pub min_abs_jacobian: f64,
    pub pass: bool,
}

/// Evaluates the margins at every sample. The report carries failures.
pub fn margins(samples: &[MarginSample], alpha: f64) -> Result<MarginReport, VerifierError> {
    let n = samples.first().map_or(0, MarginSample::dim);
    let mut c1 = vec![f64::NEG_INFINITY; n];
    let mut c2 = vec![f64::NEG_INFINITY; n];
    let mut min_abs_jacobian = f64::INFINITY;
    for s in samples {
        s.validate()?;
        if s.dim() != n {
            return Err(VerifierError::DimMismatch {
                expected: n,
                got: s.dim(),
            });
        }
        for (i, (a, b)) in s.c1().into_iter().zip(s.c2()).enumerate() {
            c1[i] = c1[i].max(a);
            c2[i] = c2[i].max(b);
        }
        min_abs_jacobian =
            s.j1.iter()
                .chain(&s.j2)
                .fold(min_abs_jacobian, |m, v| m.min(v.abs()));
    }
    let worst_c1 = c1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst_c2 = c2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(MarginReport {
        pass: !samples.is_empty() && worst_c1 < -alpha && worst_c2 < -alpha,
        c1,
        c2,
        alpha,
        worst_c1,
        worst_c2,
        samples: samples.len(),
        min_abs_jacobian,
    })
}

/// Roots of `s² − (Λ + j1·R)·s − R·j2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharRoots {
    pub re: [f64; 2],
    pub im: [f64; 2],
    pub complex: bool,
}

impl CharRoots {
    pub fn max_real(&self) -> f64 {
        self.re[0].max(self.re[1])
    }
}

pub fn char_roots(lambda: f64, r: f64, j1: f64, j2: f64) -> CharRoots {
    // s² + p·s + q
    let p = -(lambda + j1 * r);
    let q = -r * j2;
    let disc = p * p - 4.0 * q;
    if disc < 0.0 {
        let w = 0.5 * (-disc).sqrt();
        return CharRoots {
            re: [-0.5 * p, -0.5 * p],
            im: [w, -w],
            complex: true,
        };
    }
    let sq = disc.sqrt();
    // Cancellation-free pair: one root from the formula, the other from q = s1·s2.
    let big = -0.5 * (p + p.signum() * sq);
    let (s1, s2) = if big == 0.0 {
        (0.0, 0.0)
    } else {
        (big, q / big)
    };
    let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
    CharRoots {
        re: [lo, hi],
        im: [0.0, 0.0],
        complex: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Verdict {
    /// `λ_max(F1ᵀ + F1)`.
    pub lambda_f1: f64,
    /// `λ_max(F2ᵀ + F2)`.
    pub nu_plus: f64,
    /// `−(β + max(ν⁺, 0))`.
    pub threshold: f64,
    pub pass: bool,
}

fn symmetric_part_max(m: &Mat) -> f64 {
    sym_lambda_max(&(m + m.transpose()))
}

fn theorem1_from(lambda_f1: f64, nu_plus: f64, beta: f64) -> Theorem1Verdict {
    let threshold = -(beta + nu_plus.max(0.0));
    Theorem1Verdict {
        lambda_f1,
        nu_plus,
        threshold,
        pass: lambda_f1 < threshold,
    }
}

/// Checks `F1ᵀ + F1 ≺ −(β + max(ν⁺, 0))·I` with `ν⁺ = λ_max(F2ᵀ + F2)`.
pub fn theorem1_lambda_max(
    f1: &Mat,
    f2: &Mat,
    beta: f64,
) -> Result<Theorem1Verdict, VerifierError> {
    check_square_pair(f1, f2)?;
    Ok(theorem1_from(
        symmetric_part_max(f1),
        symmetric_part_max(f2),
        beta,
    ))
}

/// Worst case of the `λ_max` condition over sampled systems: the largest
/// `λ_max(F1ᵀ + F1)` against the largest `ν⁺`.
pub fn theorem1_worst(
    systems: &[AuxDifferentialSystem],
    beta: f64,
) -> Result<Theorem1Verdict, VerifierError> {
    let mut lambda_f1 = f64::NEG_INFINITY;
    let mut nu_plus = f64::NEG_INFINITY;
    for s in systems {
        check_square_pair(&s.f1, &s.f2)?;
        lambda_f1 = lambda_f1.max(symmetric_part_max(&s.f1));
        nu_plus = nu_plus.max(symmetric_part_max(&s.f2));
    }
    let mut v = theorem1_from(lambda_f1, nu_plus, beta);
    v.pass &= !systems.is_empty();
    Ok(v)
}

fn check_square_pair(a: &Mat, b: &Mat) -> Result<(), VerifierError> {
    let n = a.nrows();
    for got in [a.ncols(), b.nrows(), b.ncols()] {
        if got != n {
            return Err(VerifierError::DimMismatch { expected: n, got });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorVerdict {
    /// `λ_max(F1,realᵀ + F1,real − F̂1ᵀ − F̂1)`.
    pub ordering_lambda_max: f64,
    pub nominal: Theorem1Verdict,
    pub pass: bool,
}

/// The real symmetric part must be dominated by the nominal one, which must
/// itself satisfy the `λ_max` condition.
pub fn model_error_check(
    f1_real: &Mat,
    f1_hat: &Mat,
    beta: f64,
    nu_plus: f64,
) -> Result<ModelErrorVerdict, VerifierError> {
    check_square_pair(f1_real, f1_hat)?;
    let diff = f1_real - f1_hat;
    let ordering_lambda_max = symmetric_part_max(&diff);
    let nominal = theorem1_from(symmetric_part_max(f1_hat), nu_plus, beta);
    // Round-off allowance for the semidefinite ordering.
    let tol = 1e-12 * (1.0 + f1_hat.amax());
    Ok(ModelErrorVerdict {
        ordering_lambda_max,
        nominal,
        pass: ordering_lambda_max <= tol && nominal.pass,
    })
}

/// Sampled trajectory: latent `y` and the contraction coordinates `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub y: Vec<Vector>,
    pub xi: Vec<Vector>,
}

/// Bounded additive disturbance `d(t)` on `ẏ`.
pub type Disturbance = dyn Fn(f64) -> Vector + Send + Sync;

/// Anything that can produce a closed-loop trace from a latent initial state.
pub trait Simulator: Sync {
    fn dim(&self) -> usize;
    fn simulate(
        &self,
        y0: &Vector,
        horizon: f64,
        disturbance: Option<&Disturbance>,
    ) -> Result<SimTrace, VerifierError>;
}

/// `ẏ = f(t, y) + d(t)` integrated with RK4; `ξ = y`.
pub struct OdeSimulator<F> {
    pub f: F,
    pub dim: usize,
    pub dt: f64,
}

impl<F> Simulator for OdeSimulator<F>
where
    F: Fn(f64, &Vector) -> Vector + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn simulate(
        &self,
        y0: &Vector,
        horizon: f64,
        disturbance: Option<&Disturbance>,
    ) -> Result<SimTrace, VerifierError> {
        if y0.len() != self.dim {
            return Err(VerifierError::DimMismatch {
                expected: self.dim,
                got: y0.len(),
            });
        }
        let deriv = |t: f64, y: &Vector| match disturbance {
            Some(d) => (self.f)(t, y) + d(t),
            None => (self.f)(t, y),
        };
        let traj =
            integrate_rk4_bounded(deriv, y0, 0.0, horizon, self.dt, DEFAULT_DIVERGENCE_BOUND)?;
        Ok(SimTrace {
            times: traj.times,
            xi: traj.states.clone(),
            y: traj.states,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    /// Mean over pairs of the fitted decay rate of `‖ξ1 − ξ2‖`.
    pub beta_hat: f64,
    /// Smallest coefficient of determination over pairs.
    pub r2: f64,
    /// Same fit on `‖y1 − y2‖`.
    pub beta_hat_y: f64,
    pub r2_y: f64,
    pub horizon: f64,
    pub pair_count: usize,
    pub per_pair_beta: Vec<f64>,
}

/// Least-squares fit of `ln d = c − β·t`. Returns `(β, r²)`.
pub fn fit_log_decay(times: &[f64], dist: &[f64], horizon: f64) -> Option<(f64, f64)> {
    let start = FIT_SKIP_FRACTION * horizon;
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(dist)
        .filter(|(t, d)| **t >= start && **d > FIT_DISTANCE_FLOOR && d.is_finite())
        .map(|(t, d)| (*t, d.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stl: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sll: f64 = pts.iter().map(|p| (p.1 - ml).powi(2)).sum();
    if stt <= 0.0 {
        return None;
    }
    let slope = stl / stt;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - ml - slope * (p.0 - mt)).powi(2))
        .sum();
    let r2 = if sll > 0.0 {
        (1.0 - ss_res / sll).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Some((-slope, r2))
}

fn distances(a: &[Vector], b: &[Vector]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).collect()
}

/// Simulates both members of every pair and fits the log-distance decay.
pub fn empirical_contraction(
    sim: &dyn Simulator,
    init_pairs: &[(Vector, Vector)],
    horizon: f64,
) -> Result<ContractionFit, VerifierError> {
    // Per pair: (β̂, r²) in ξ, then in y.
    type PairFit = ((f64, f64), (f64, f64));
    let fits: Vec<Result<PairFit, VerifierError>> = init_pairs
        .par_iter()
        .enumerate()
        .map(|(k, (y0, y1))| {
            let a = sim.simulate(y0, horizon, None)?;
            let b = sim.simulate(y1, horizon, None)?;
            let fx = fit_log_decay(&a.times, &distances(&a.xi, &b.xi), horizon)
                .ok_or(VerifierError::InsufficientData { pair: k })?;
            let fy = fit_log_decay(&a.times, &distances(&a.y, &b.y), horizon)
                .ok_or(VerifierError::InsufficientData { pair: k })?;
            Ok((fx, fy))
        })
        .collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = fits.len().max(1) as f64;
    Ok(ContractionFit {
        beta_hat: fits.iter().map(|f| f.0 .0).sum::<f64>() / n,
        r2: fits.iter().map(|f| f.0 .1).fold(1.0, f64::min),
        beta_hat_y: fits.iter().map(|f| f.1 .0).sum::<f64>() / n,
        r2_y: fits.iter().map(|f| f.1 .1).fold(1.0, f64::min),
        horizon,
        pair_count: fits.len(),
        per_pair_beta: fits.iter().map(|f| f.0 .0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessBound {
    pub d_bar: f64,
    pub beta: f64,
    pub scale: f64,
    /// `scale·d̄/β`.
    pub ball_radius: f64,
    /// Largest nominal-to-disturbed distance over the final part of the horizon.
    pub observed_steady: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Default `scale` from the metric bounds: `sup‖Θ‖·√(m̄/m̲)`.
pub fn default_robustness_scale(tp: &TransformPair) -> f64 {
    let mb = tp.metric_bounds();
    mb.upper().sqrt() * (mb.upper() / mb.lower()).sqrt()
}

#[allow(clippy::too_many_arguments)]
pub fn robustness_check(
    sim: &dyn Simulator,
    y0: &Vector,
    horizon: f64,
    disturbance: &Disturbance,
    d_bar: f64,
    beta: f64,
    scale: f64,
    slack: f64,
) -> Result<RobustnessBound, VerifierError> {
    let (nominal, disturbed) = rayon::join(
        || sim.simulate(y0, horizon, None),
        || sim.simulate(y0, horizon, Some(disturbance)),
    );
    let (nominal, disturbed) = (nominal?, disturbed?);
    let start = (1.0 - STEADY_FRACTION) * horizon;
    let observed_steady = nominal
        .times
        .iter()
        .zip(distances(&nominal.xi, &disturbed.xi))
        .filter(|(t, _)| **t >= start)
        .map(|(_, d)| d)
        .fold(0.0, f64::max);
    let ball_radius = scale * d_bar / beta;
    Ok(RobustnessBound {
        d_bar,
        beta,
        scale,
        ball_radius,
        observed_steady,
        slack,
        pass: observed_steady <= ball_radius * (1.0 + slack),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn sample(lambda: f64, r: f64, j1: f64, j2: f64) -> MarginSample {
        MarginSample {
            lambda: vec![lambda],
            r: vec![r],
            j1: vec![j1],
            j2: vec![j2],
        }
    }

    #[test]
    fn margin_examples() {
        let rep = margins(&[sample(-2.0, 1.0, -3.0, -1.0)], 0.5).unwrap();
        assert_eq!((rep.worst_c1, rep.worst_c2), (-5.0, -1.0));
        assert!(rep.pass);
        let rep = margins(&[sample(-2.0, 1.0, -3.0, 0.0)], 0.5).unwrap();
        assert_eq!(rep.worst_c2, 0.0);
        assert!(!rep.pass);
        let rep = margins(&[sample(-2.0, 1.0, 3.0, -1.0)], 0.5).unwrap();
        assert!(rep.worst_c1 > 0.0 && !rep.pass);
        assert!(!margins(&[], 0.5).unwrap().pass);
    }

    #[test]
    fn margin_worst_case_over_samples() {
        let rep = margins(
            &[sample(-2.0, 1.0, -3.0, -1.0), sample(-1.0, 1.0, -0.2, -0.4)],
            0.1,
        )
        .unwrap();
        assert!((rep.worst_c1 + 1.2).abs() < 1e-15);
        assert!((rep.worst_c2 + 0.4).abs() < 1e-15);
        assert!((rep.min_abs_jacobian - 0.2).abs() < 1e-15);
    }

    #[test]
    fn char_root_examples() {
        let r = char_roots(-2.0, 1.0, -3.0, -1.0);
        assert!(!r.complex);
        let s = 21f64.sqrt();
        assert!((r.re[1] - (-5.0 + s) / 2.0).abs() < 1e-14);
        assert!((r.re[0] - (-5.0 - s) / 2.0).abs() < 1e-14);
        assert!((r.re[1] + 0.2087).abs() < 1e-4 && (r.re[0] + 4.7913).abs() < 1e-4);
        let r = char_roots(-2.0, 1.0, 0.0, 0.0);
        assert_eq!(r.re, [-2.0, 0.0]);
        let r = char_roots(-1.0, 1.0, -1.0, -10.0);
        assert!(r.complex && r.max_real() == -1.0);
        assert!((r.im[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn theorem1_examples() {
        let f1 = dmatrix![-1.0, 1.0; 0.3, -0.5];
        let zero = Mat::zeros(2, 2);
        let v = theorem1_lambda_max(&f1, &zero, 0.05).unwrap();
        let expect = (-3.0 + (1.0f64 + 4.0 * 1.69).sqrt()) / 2.0;
        assert!((v.lambda_f1 - expect).abs() < 1e-12);
        assert!((v.lambda_f1 + 0.107).abs() < 1e-3);
        assert!(v.pass);
        let v = theorem1_lambda_max(&zero, &zero, 0.01).unwrap();
        assert_eq!(v.lambda_f1, 0.0);
        assert!(!v.pass);
        let f2 = dmatrix![0.5, 0.0; 0.0, 0.0];
        let v = theorem1_lambda_max(&f1, &f2, 0.05).unwrap();
        assert_eq!(v.nu_plus, 1.0);
        assert_eq!(v.threshold, -1.05);
        assert!(!v.pass);
    }

    #[test]
    fn model_error_examples() {
        let f1 = dmatrix![-1.0, 1.0; 0.3, -0.5];
        assert!(model_error_check(&f1, &f1, 0.05, 0.0).unwrap().pass);
        let tighter = &f1 - Mat::identity(2, 2) * 0.1;
        assert!(model_error_check(&tighter, &f1, 0.05, 0.0).unwrap().pass);
        let looser = &f1 + Mat::identity(2, 2);
        assert!(!model_error_check(&looser, &f1, 0.05, 0.0).unwrap().pass);
    }

    fn decay() -> OdeSimulator<impl Fn(f64, &Vector) -> Vector + Sync> {
        OdeSimulator {
            f: |_t: f64, y: &Vector| -y,
            dim: 1,
            dt: 1e-3,
        }
    }

    #[test]
    fn unit_decay_fit() {
        let pairs = vec![
            (dvector![1.0], dvector![-0.5]),
            (dvector![2.0], dvector![0.0]),
        ];
        let fit = empirical_contraction(&decay(), &pairs, 5.0).unwrap();
        assert!((fit.beta_hat - 1.0).abs() < 0.02);
        assert!(fit.r2 > 0.999);
        assert_eq!(fit.pair_count, 2);
    }

    #[test]
    fn lti_rate_two() {
        // 0.5·ẏ + y = 0 → ẏ = −2y
        let sim = OdeSimulator {
            f: |_t: f64, y: &Vector| -y / 0.5,
            dim: 1,
            dt: 1e-3,
        };
        let fit = empirical_contraction(&sim, &[(dvector![1.0], dvector![0.0])], 4.0).unwrap();
        assert!((fit.beta_hat - 2.0).abs() < 0.04);
    }

    #[test]
    fn identical_pair_has_no_data() {
        let err = empirical_contraction(&decay(), &[(dvector![1.0], dvector![1.0])], 1.0);
        assert_eq!(err, Err(VerifierError::InsufficientData { pair: 0 }));
    }

    #[test]
    fn robustness_scalar_ball() {
        let d = |_t: f64| dvector![0.1];
        let rb = robustness_check(&decay(), &dvector![1.0], 20.0, &d, 0.1, 1.0, 1.0, 0.0).unwrap();
        assert!((rb.ball_radius - 0.1).abs() < 1e-15);
        assert!(rb.observed_steady <= 0.1 + 1e-3);
        let zero = |_t: f64| dvector![0.0];
        let rb =
            robustness_check(&decay(), &dvector![1.0], 20.0, &zero, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!(rb.observed_steady <= 1e-8);
    }

    #[test]
    fn diverging_simulation_propagates() {
        let sim = OdeSimulator {
            f: |_t: f64, y: &Vector| y * 10.0,
            dim: 1,
            dt: 1e-2,
        };
        let err = empirical_contraction(&sim, &[(dvector![1.0], dvector![0.0])], 5.0);
        assert!(matches!(
            err,
            Err(VerifierError::Numerics(NumericsError::Diverged { .. }))
        ));
    }
}
