//! Plants and closed-loop simulation.
//!
//! A [`Plant`] exposes its physical state, the latent signal `y` the policy
//! acts on, and latent Jacobians per contact regime. [`ClosedLoop`] wires
//! plant → transforms → policy → control with a zero-order hold:
//! `z = T_y·(y − y_ref)`, `a = π(z, ∫z dt)`, `u = u_ff + T_a·a`.

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{
    lti_model, solve_composite_gains, Branch, CompositeMap, GainSet, LatentError, LatentLti,
    LatentModel, LinearModel,
};
use crate::numerics::{
    check_state, rk4_step, time_grid, Mat, NumericsError, Vector, DEFAULT_DIVERGENCE_BOUND,
};
use crate::policy::{PolicyBank, PolicyError, PolicyState};
use crate::transform::{
    assemble_blocks, build_from_jacobians, AuxDifferentialSystem, TransformError, TransformPair,
};
use crate::verifier::{Disturbance, MarginSample, SimTrace, Simulator, VerifierError};

pub const PEG_TAU_X: f64 = 0.0437;
pub const PEG_TAU_Z: f64 = 0.01;
pub const PEG_K_SUR_RANGE: [f64; 2] = [1.0, 31.0];
pub const PEG_SURFACE_RANGE: [f64; 2] = [-0.01, 0.01];
pub const PEG_X_RANGE: [f64; 2] = [1.0, 3.0];
pub const PEG_Z_RANGE: [f64; 2] = [-3.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Nominal,
    Contact,
    Free,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Nominal => "nominal",
            Regime::Contact => "contact",
            Regime::Free => "free",
        }
    }
}

/// Physical system seen through a latent signal.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Physical state derivative under input `u`.
    fn deriv(&self, x: &Vector, u: &Vector, t: f64) -> Vector;
    /// Latent signal `y` of the physical state.
    fn latent(&self, x: &Vector) -> Vector;
    /// Latent set point; the policy sees `y − reference`.
    fn reference(&self) -> Vector {
        Vector::zeros(self.latent_dim())
    }
    /// Input holding the nominal model at the reference.
    fn feedforward(&self) -> Vector {
        Vector::zeros(self.latent_dim())
    }
    fn regime(&self, _x: &Vector) -> Regime {
        Regime::Nominal
    }
    /// `(∂f/∂y, ∂f/∂u)` of the latent model used to build transforms.
    fn latent_jacobians(&self, x: &Vector, regime: Regime) -> (Mat, Mat);
    /// Error signal used for rewards and stability detectors.
    fn tracking_error(&self, x: &Vector) -> Vector;
}

/// Linear latent plant `ẏ = A·y + B·u` regulated to the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    pub model: LinearModel,
}

impl LtiPlant {
    pub fn new(model: LinearModel) -> Self {
        Self { model }
    }

    pub fn from_lti(l: &LatentLti) -> Self {
        Self::new(lti_model(l))
    }
}

impl Plant for LtiPlant {
    fn state_dim(&self) -> usize {
        self.model.state.nrows()
    }

    fn latent_dim(&self) -> usize {
        self.model.state.nrows()
    }

    fn deriv(&self, x: &Vector, u: &Vector, t: f64) -> Vector {
        self.model.f(x, u, t)
    }

    fn latent(&self, x: &Vector) -> Vector {
        x.clone()
    }

    fn latent_jacobians(&self, _x: &Vector, _regime: Regime) -> (Mat, Mat) {
        (self.model.state.clone(), self.model.input.clone())
    }

    fn tracking_error(&self, x: &Vector) -> Vector {
        -x
    }
}

/// Peg pressed against the surface `z = g(x) = K1s·sin x + K2s·cos x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PegParams {
    pub tau_x: f64,
    pub tau_z: f64,
    pub k_sur: f64,
    pub k1s: f64,
    pub k2s: f64,
    pub x_d: f64,
    pub f_d: f64,
}

impl Default for PegParams {
    fn default() -> Self {
        Self {
            tau_x: PEG_TAU_X,
            tau_z: PEG_TAU_Z,
            k_sur: 10.0,
            k1s: 0.0,
            k2s: 0.0,
            x_d: 2.0,
            f_d: -0.1,
        }
    }
}

impl PegParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidParameter(m.into()));
        if !(self.tau_x > 0.0) || !(self.tau_z > 0.0) {
            return bad("time constants must be positive");
        }
        if !(self.k_sur >= 1.0) || !self.k_sur.is_finite() {
            return bad("K_sur must be at least 1");
        }
        let [lo, hi] = PEG_SURFACE_RANGE;
        if !(lo..=hi).contains(&self.k1s) || !(lo..=hi).contains(&self.k2s) {
            return bad("surface coefficients outside [-0.01, 0.01]");
        }
        if !self.x_d.is_finite() || !self.f_d.is_finite() {
            return bad("non-finite target");
        }
        Ok(())
    }

    pub fn surface(&self, x: f64) -> f64 {
        self.k1s * x.sin() + self.k2s * x.cos()
    }

    pub fn surface_slope(&self, x: f64) -> f64 {
        self.k1s * x.cos() - self.k2s * x.sin()
    }

    /// `f = K_sur·min(z − g(x), 0)`.
    pub fn force(&self, x: f64, z: f64) -> f64 {
        self.k_sur * (z - self.surface(x)).min(0.0)
    }
}

/// Ranges for drawing peg tasks and initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PegSampling {
    pub tau_x: [f64; 2],
    pub tau_z: [f64; 2],
    pub k_sur: [f64; 2],
    pub surface: [f64; 2],
    pub x_d: [f64; 2],
    pub f_d: [f64; 2],
    pub x0: [f64; 2],
    /// Initial gap `z0 − g(x0)`.
    pub gap0: [f64; 2],
}

impl Default for PegSampling {
    fn default() -> Self {
        Self {
            tau_x: [PEG_TAU_X, PEG_TAU_X],
            tau_z: [PEG_TAU_Z, PEG_TAU_Z],
            k_sur: PEG_K_SUR_RANGE,
            surface: PEG_SURFACE_RANGE,
            x_d: [1.2, 2.8],
            f_d: [-0.3, -0.05],
            x0: PEG_X_RANGE,
            gap0: [0.0, 0.2],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl PegSampling {
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> PegParams {
        PegParams {
            tau_x: uniform(rng, self.tau_x),
            tau_z: uniform(rng, self.tau_z),
            k_sur: uniform(rng, self.k_sur),
            k1s: uniform(rng, self.surface),
            k2s: uniform(rng, self.surface),
            x_d: uniform(rng, self.x_d),
            f_d: uniform(rng, self.f_d),
        }
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, p: &PegParams, rng: &mut R) -> PegState {
        let x = uniform(rng, self.x0);
        let z = p.surface(x) + uniform(rng, self.gap0);
        PegState::new(x, z, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PegState {
    pub x: f64,
    pub z: f64,
    pub regime: Regime,
}

impl PegState {
    pub fn new(x: f64, z: f64, p: &PegParams) -> Self {
        let regime = if z - p.surface(x) <= 0.0 {
            Regime::Contact
        } else {
            Regime::Free
        };
        Self { x, z, regime }
    }

    pub fn force(&self, p: &PegParams) -> f64 {
        p.force(self.x, self.z)
    }
}

/// `e = [x_d − x, f_d − f]`.
pub fn peg_tracking_error(s: &PegState, p: &PegParams) -> Vector {
    Vector::from_vec(vec![p.x_d - s.x, p.f_d - s.force(p)])
}

/// Latent peg model on `y = [x, φ]` with `φ = K_sur·(z − g(x))`.
///
/// `φ` equals the contact force `f` in contact and keeps evolving by the
/// same law above the surface, so the dynamics are
/// `ẋ = (u_x − x)/τ_x`, `φ̇ = K_sur·((u_z − z)/τ_z − g'(x)·ẋ)`.
/// The contact Jacobian is the customary approximation
/// `[[−1/τ_x, 0], [K_sur·g'/τ_x − K_sur·g/(τ_z·x), −1/τ_z]]`; above the
/// surface the two lags decouple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PegModel {
    pub params: PegParams,
}

pub fn peg_latent_model(p: PegParams) -> PegModel {
    PegModel { params: p }
}

impl PegModel {
    /// Contact iff `φ ≤ 0`.
    pub fn regime_of(&self, y: &Vector) -> Regime {
        if y[1] <= 0.0 {
            Regime::Contact
        } else {
            Regime::Free
        }
    }

    pub fn to_latent(&self, s: &PegState) -> Vector {
        let p = &self.params;
        Vector::from_vec(vec![s.x, p.k_sur * (s.z - p.surface(s.x))])
    }

    pub fn to_state(&self, y: &Vector) -> PegState {
        let p = &self.params;
        PegState::new(y[0], y[1] / p.k_sur + p.surface(y[0]), p)
    }

    pub fn jacobians_in(&self, y: &Vector, regime: Regime) -> (Mat, Mat) {
        let p = &self.params;
        let (tx, tz, k) = (p.tau_x, p.tau_z, p.k_sur);
        let x = y[0];
        match regime {
            Regime::Contact => {
                let gp = p.surface_slope(x);
                let jy = Mat::from_row_slice(
                    2,
                    2,
                    &[
                        -1.0 / tx,
                        0.0,
                        k / tx * gp - k / tz * p.surface(x) / x,
                        -1.0 / tz,
                    ],
                );
                let ju = Mat::from_row_slice(2, 2, &[1.0 / tx, 0.0, -k * gp / tx, k / tz]);
                (jy, ju)
            }
            _ => (
                Mat::from_row_slice(2, 2, &[-1.0 / tx, 0.0, 0.0, -1.0 / tz]),
                Mat::from_row_slice(2, 2, &[1.0 / tx, 0.0, 0.0, k / tz]),
            ),
        }
    }
}

impl LatentModel for PegModel {
    fn dim_y(&self) -> usize {
        2
    }

    fn dim_u(&self) -> usize {
        2
    }

    fn f(&self, y: &Vector, u: &Vector, _t: f64) -> Vector {
        let p = &self.params;
        let x = y[0];
        let z = y[1] / p.k_sur + p.surface(x);
        let xdot = (u[0] - x) / p.tau_x;
        let phidot = p.k_sur * ((u[1] - z) / p.tau_z - p.surface_slope(x) * xdot);
        Vector::from_vec(vec![xdot, phidot])
    }

    fn jac_y(&self, y: &Vector, _u: &Vector, _t: f64) -> Mat {
        self.jacobians_in(y, self.regime_of(y)).0
    }

    fn jac_u(&self, y: &Vector, _u: &Vector, _t: f64) -> Mat {
        self.jacobians_in(y, self.regime_of(y)).1
    }
}

/// Peg plant whose state is the latent `[x, φ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PegPlant {
    pub model: PegModel,
}

impl PegPlant {
    pub fn new(p: PegParams) -> Result<Self, EnvError> {
        p.validate()?;
        Ok(Self {
            model: peg_latent_model(p),
        })
    }

    pub fn params(&self) -> &PegParams {
        &self.model.params
    }
}

impl Plant for PegPlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn latent_dim(&self) -> usize {
        2
    }

    fn deriv(&self, x: &Vector, u: &Vector, t: f64) -> Vector {
        self.model.f(x, u, t)
    }

    fn latent(&self, x: &Vector) -> Vector {
        x.clone()
    }

    fn reference(&self) -> Vector {
        let p = self.params();
        Vector::from_vec(vec![p.x_d, p.f_d])
    }

    fn feedforward(&self) -> Vector {
        let p = self.params();
        Vector::from_vec(vec![p.x_d, p.surface(p.x_d) + p.f_d / p.k_sur])
    }

    fn regime(&self, x: &Vector) -> Regime {
        self.model.regime_of(x)
    }

    fn latent_jacobians(&self, x: &Vector, regime: Regime) -> (Mat, Mat) {
        self.model.jacobians_in(x, regime)
    }

    fn tracking_error(&self, x: &Vector) -> Vector {
        peg_tracking_error(&self.model.to_state(x), self.params())
    }
}

/// Task-space error loop `Λd·ë + Kd·ė + Kp·e + u = 0` with state `[e; ė]`,
/// seen through the composite `y = K1·e + K2·ė`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderPlant {
    pub gains: GainSet,
    pub map: CompositeMap,
    pub lti: LatentLti,
}

pub fn second_order_env(g: &GainSet, branch: Branch) -> Result<SecondOrderPlant, EnvError> {
    let (map, lti) = solve_composite_gains(g, branch)?;
    Ok(SecondOrderPlant {
        gains: g.clone(),
        map,
        lti,
    })
}

impl SecondOrderPlant {
    pub fn dim(&self) -> usize {
        self.gains.dim()
    }

    /// `ẏ = K1·ė + K2·ë` at state `[e; ė]` under `u`.
    pub fn latent_rate(&self, x: &Vector, u: &Vector) -> Vector {
        let n = self.dim();
        let d = self.deriv(x, u, 0.0);
        Vector::from_fn(n, |i, _| {
            self.map.k1()[i] * d[i] + self.map.k2()[i] * d[n + i]
        })
    }
}

impl Plant for SecondOrderPlant {
    fn state_dim(&self) -> usize {
        2 * self.dim()
    }

    fn latent_dim(&self) -> usize {
        self.dim()
    }

    fn deriv(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        let n = self.dim();
        let g = &self.gains;
        let mut d = Vector::zeros(2 * n);
        for i in 0..n {
            let (e, ed) = (x[i], x[n + i]);
            d[i] = ed;
            d[n + i] = -(g.kd[i] * ed + g.kp[i] * e + u[i]) / g.lambda_d[i];
        }
        d
    }

    fn latent(&self, x: &Vector) -> Vector {
        let n = self.dim();
        Vector::from_fn(n, |i, _| {
            self.map.k1()[i] * x[i] + self.map.k2()[i] * x[n + i]
        })
    }

    fn latent_jacobians(&self, _x: &Vector, _regime: Regime) -> (Mat, Mat) {
        let m = lti_model(&self.lti);
        (m.state, m.input)
    }

    fn tracking_error(&self, x: &Vector) -> Vector {
        x.rows(0, self.dim()).into_owned()
    }
}

/// Largest `‖A·ẏ + B·y + u‖ / (‖y‖ + ‖u‖ + 1)` along a simulated trajectory,
/// with `ẏ` by central differences of the sampled `y`.
pub fn composition_residual(
    plant: &SecondOrderPlant,
    x0: &Vector,
    u: &(dyn Fn(f64) -> Vector + Sync),
    horizon: f64,
    dt: f64,
) -> Result<f64, EnvError> {
    let traj = crate::numerics::integrate_rk4(
        |t, x: &Vector| plant.deriv(x, &u(t), t),
        x0,
        0.0,
        horizon,
        dt,
    )?;
    let ys: Vec<Vector> = traj.states.iter().map(|x| plant.latent(x)).collect();
    let (a, b) = (&plant.lti.a, &plant.lti.b);
    let mut worst = 0.0f64;
    for k in 1..ys.len().saturating_sub(1) {
        let (t0, t1, t2) = (traj.times[k - 1], traj.times[k], traj.times[k + 1]);
        let ydot = (&ys[k + 1] - &ys[k - 1]) / (t2 - t0);
        let uk = u(t1);
        let res = Vector::from_fn(ys[k].len(), |i, _| a[i] * ydot[i] + b[i] * ys[k][i] + uk[i]);
        worst = worst.max(res.norm() / (ys[k].norm() + uk.norm() + 1.0));
    }
    Ok(worst)
}

/// One zero-order-hold step as recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
    pub regime: Regime,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub error: Vec<f64>,
}

/// Mutable per-rollout state.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub t: f64,
    pub x: Vector,
    pub ps: PolicyState,
    pub regime: Regime,
    pub transforms: TransformPair,
    /// Bank with flips as currently refreshed.
    pub bank: Option<PolicyBank>,
    pub transform_updates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Diverged { t: f64, norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub records: Vec<StepRecord>,
    /// `−Σ dt·Σ w_i·|e_i|`, or `−∞` on divergence.
    pub reward: f64,
    pub outcome: Outcome,
    pub transform_updates: usize,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        matches!(self.outcome, Outcome::Diverged { .. })
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn error_norms(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.error.iter().map(|e| e * e).sum::<f64>().sqrt())
            .collect()
    }
}

/// Plant, policy and integration settings for closed-loop runs.
#[derive(Clone)]
pub struct ClosedLoop<P> {
    pub plant: P,
    /// `None` applies `a = 0`.
    pub bank: Option<PolicyBank>,
    pub dt: f64,
    /// Re-run `set_flips` whenever transforms are rebuilt.
    pub refresh_flips: bool,
    pub reward_weights: Vec<f64>,
    pub divergence_bound: f64,
    pub disturbance: Option<Arc<Disturbance>>,
}

impl<P: Plant> ClosedLoop<P> {
    pub fn new(plant: P, bank: Option<PolicyBank>, dt: f64) -> Result<Self, EnvError> {
        if !(dt > 0.0) {
            return Err(EnvError::InvalidStep(dt));
        }
        let n = plant.latent_dim();
        if let Some(b) = &bank {
            if b.dim() != n {
                return Err(EnvError::DimMismatch {
                    expected: n,
                    got: b.dim(),
                });
            }
        }
        Ok(Self {
            plant,
            bank,
            dt,
            refresh_flips: true,
            reward_weights: vec![1.0; n],
            divergence_bound: DEFAULT_DIVERGENCE_BOUND,
            disturbance: None,
        })
    }

    pub fn with_refresh_flips(mut self, on: bool) -> Self {
        self.refresh_flips = on;
        self
    }

    pub fn with_disturbance(mut self, d: Arc<Disturbance>) -> Self {
        self.disturbance = Some(d);
        self
    }

    fn transforms_at(&self, x: &Vector, regime: Regime) -> Result<TransformPair, EnvError> {
        let (jy, ju) = self.plant.latent_jacobians(x, regime);
        Ok(build_from_jacobians(&jy, &ju)?)
    }

    fn refreshed(
        &self,
        bank: &Option<PolicyBank>,
        tp: &TransformPair,
    ) -> Result<Option<PolicyBank>, EnvError> {
        match bank {
            // Free banks carry no structural sign to align.
            Some(b) if self.refresh_flips && b.has_sign_pattern() => {
                Ok(Some(b.set_flips(&tp.r_diag(), &tp.lambda_diag())?))
            }
            other => Ok(other.clone()),
        }
    }

    pub fn reset(&self, x0: &Vector) -> Result<LoopState, EnvError> {
        if x0.len() != self.plant.state_dim() {
            return Err(EnvError::DimMismatch {
                expected: self.plant.state_dim(),
                got: x0.len(),
            });
        }
        let regime = self.plant.regime(x0);
        let transforms = self.transforms_at(x0, regime)?;
        let bank = self.refreshed(&self.bank, &transforms)?;
        Ok(LoopState {
            t: 0.0,
            x: x0.clone(),
            ps: PolicyState::zeros(self.plant.latent_dim()),
            regime,
            transforms,
            bank,
            transform_updates: 0,
        })
    }

    /// `(z, a, u)` at the current state.
    pub fn control(&self, st: &LoopState) -> Result<(Vector, Vector, Vector), EnvError> {
        let y = self.plant.latent(&st.x);
        let z = st.transforms.to_aux(&(y - self.plant.reference()));
        let n = z.len();
        let a = match &st.bank {
            Some(b) => Vector::from_vec(b.forward(z.as_slice(), &st.ps)?),
            None => Vector::zeros(n),
        };
        let u = self.plant.feedforward() + st.transforms.to_input(&a);
        Ok((z, a, u))
    }

    /// Diagonal margin quantities at the current state.
    pub fn margin_sample(&self, st: &LoopState, z: &Vector) -> Result<MarginSample, EnvError> {
        let n = z.len();
        let (j1, j2) = match &st.bank {
            Some(b) => b.jacobian(z.as_slice(), &st.ps)?,
            None => (vec![0.0; n], vec![0.0; n]),
        };
        Ok(MarginSample {
            lambda: st.transforms.lambda_diag(),
            r: st.transforms.r_diag(),
            j1,
            j2,
        })
    }

    /// Auxiliary differential system at `(x, s2)` with transforms built at `x`.
    pub fn aux_system(&self, x: &Vector, s2: &[f64]) -> Result<AuxDifferentialSystem, EnvError> {
        let mut st = self.reset(x)?;
        st.ps.s2 = s2.to_vec();
        let (z, _, _) = self.control(&st)?;
        let m = self.margin_sample(&st, &z)?;
        let n = z.len();
        Ok(assemble_blocks(
            &st.transforms,
            &m.j1,
            &m.j2,
            &Mat::zeros(n, n),
        )?)
    }

    /// Auxiliary systems along the nominal trajectory from `x0`, one per
    /// `stride` steps starting at `t = 0`. Divergence is an error here.
    pub fn aux_trace(
        &self,
        x0: &Vector,
        horizon: f64,
        stride: usize,
    ) -> Result<Vec<AuxDifferentialSystem>, EnvError> {
        let stride = stride.max(1);
        let grid = time_grid(0.0, horizon, self.dt)?;
        let mut st = self.reset(x0)?;
        let mut out = Vec::with_capacity(grid.len() / stride + 1);
        for (k, w) in grid.windows(2).enumerate() {
            if k % stride == 0 {
                let (z, _, _) = self.control(&st)?;
                let m = self.margin_sample(&st, &z)?;
                let n = z.len();
                out.push(assemble_blocks(
                    &st.transforms,
                    &m.j1,
                    &m.j2,
                    &Mat::zeros(n, n),
                )?);
            }
            self.step(&mut st, w[1] - w[0])?;
        }
        Ok(out)
    }

    /// One RK4 step under the control held from the step start.
    pub fn step(&self, st: &mut LoopState, h: f64) -> Result<StepRecord, EnvError> {
        if !(h > 0.0) {
            return Err(EnvError::InvalidStep(h));
        }
        let regime = self.plant.regime(&st.x);
        if regime != st.regime {
            st.transforms = self.transforms_at(&st.x, regime)?;
            st.bank = self.refreshed(&st.bank, &st.transforms)?;
            st.regime = regime;
            st.transform_updates += 1;
        }
        let (z, a, u) = self.control(st)?;
        let m = self.margin_sample(st, &z)?;
        let record = StepRecord {
            t: st.t,
            y: self.plant.latent(&st.x).iter().cloned().collect(),
            z: z.iter().cloned().collect(),
            a: a.iter().cloned().collect(),
            u: u.iter().cloned().collect(),
            regime,
            c1: m.c1(),
            c2: m.c2(),
            error: self.plant.tracking_error(&st.x).iter().cloned().collect(),
        };
        let deriv = |t: f64, x: &Vector| {
            let d = self.plant.deriv(x, &u, t);
            match &self.disturbance {
                Some(dist) => d + dist(t),
                None => d,
            }
        };
        let next = rk4_step(&deriv, st.t, &st.x, h);
        check_state(st.t + h, &next, self.divergence_bound)?;
        st.ps.accumulate(z.as_slice(), h);
        st.x = next;
        st.t += h;
        Ok(record)
    }

    /// Simulates `[0, horizon]`; divergence ends the run with reward `−∞`.
    pub fn rollout(&self, x0: &Vector, horizon: f64) -> Result<Rollout, EnvError> {
        let grid = time_grid(0.0, horizon, self.dt)?;
        let mut st = self.reset(x0)?;
        let mut records = Vec::with_capacity(grid.len());
        let mut reward = 0.0;
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            match self.step(&mut st, h) {
                Ok(rec) => {
                    reward -= h * rec
                        .error
                        .iter()
                        .zip(&self.reward_weights)
                        .map(|(e, wt)| wt * e.abs())
                        .sum::<f64>();
                    records.push(rec);
                }
                Err(EnvError::Numerics(NumericsError::Diverged { t, norm })) => {
                    return Ok(Rollout {
                        records,
                        reward: f64::NEG_INFINITY,
                        outcome: Outcome::Diverged { t, norm },
                        transform_updates: st.transform_updates,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        // Final sample at the horizon, without a further step.
        let (z, a, u) = self.control(&st)?;
        let m = self.margin_sample(&st, &z)?;
        records.push(StepRecord {
            t: st.t,
            y: self.plant.latent(&st.x).iter().cloned().collect(),
            z: z.iter().cloned().collect(),
            a: a.iter().cloned().collect(),
            u: u.iter().cloned().collect(),
            regime: self.plant.regime(&st.x),
            c1: m.c1(),
            c2: m.c2(),
            error: self.plant.tracking_error(&st.x).iter().cloned().collect(),
        });
        Ok(Rollout {
            records,
            reward,
            outcome: Outcome::Completed,
            transform_updates: st.transform_updates,
        })
    }
}

impl<P: Plant + Clone> Simulator for ClosedLoop<P> {
    fn dim(&self) -> usize {
        self.plant.state_dim()
    }

    /// Traces `y` and `ξ = [z; a]`.
    fn simulate(
        &self,
        x0: &Vector,
        horizon: f64,
        disturbance: Option<&Disturbance>,
    ) -> Result<SimTrace, VerifierError> {
        let wrap = |e: EnvError| match e {
            EnvError::Numerics(n) => VerifierError::Numerics(n),
            other => VerifierError::Simulation(other.to_string()),
        };
        let run = match disturbance {
            None => self.rollout(x0, horizon),
            Some(d) => {
                // Borrowed disturbance outlives the call; copy it into a sampled table.
                let grid = time_grid(0.0, horizon, self.dt).map_err(VerifierError::from)?;
                let mut loop_d = self.clone();
                let table = SampledDisturbance::new(&grid, self.dt, d);
                loop_d.disturbance = Some(Arc::new(move |t: f64| table.at(t)));
                loop_d.rollout(x0, horizon)
            }
        }
        .map_err(wrap)?;
        if let Outcome::Diverged { t, norm } = run.outcome {
            return Err(VerifierError::Numerics(NumericsError::Diverged { t, norm }));
        }
        let mut trace = SimTrace {
            times: Vec::with_capacity(run.records.len()),
            y: Vec::with_capacity(run.records.len()),
            xi: Vec::with_capacity(run.records.len()),
        };
        for r in &run.records {
            trace.times.push(r.t);
            trace.y.push(Vector::from_column_slice(&r.y));
            let mut xi = r.z.clone();
            xi.extend(&r.a);
            trace.xi.push(Vector::from_vec(xi));
        }
        Ok(trace)
    }
}

/// Disturbance tabulated at the RK4 stage times of a fixed grid.
struct SampledDisturbance {
    keys: Vec<(u64, Vector)>,
}

impl SampledDisturbance {
    fn new(grid: &[f64], _dt: f64, d: &Disturbance) -> Self {
        let mut keys = Vec::with_capacity(grid.len() * 2);
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            for t in [w[0], w[0] + 0.5 * h] {
                keys.push((t.to_bits(), d(t)));
            }
        }
        if let Some(&t) = grid.last() {
            keys.push((t.to_bits(), d(t)));
        }
        keys.sort_by_key(|k| k.0);
        keys.dedup_by_key(|k| k.0);
        Self { keys }
    }

    fn at(&self, t: f64) -> Vector {
        // Non-negative floats order like their bit patterns.
        let b = t.to_bits();
        match self.keys.binary_search_by_key(&b, |k| k.0) {
            Ok(i) => self.keys[i].1.clone(),
            Err(i) => self.keys[i.min(self.keys.len() - 1)].1.clone(),
        }
    }
}

/// One episode: a wired loop, its initial state and horizon.
pub struct Episode<P> {
    pub closed_loop: ClosedLoop<P>,
    pub x0: Vector,
    pub horizon: f64,
}

/// Draws episodes and verification samples for a policy bank.
pub trait EpisodeFactory: Sync {
    type P: Plant + Clone;

    fn latent_dim(&self) -> usize;
    fn build(&self, bank: &PolicyBank, rng: &mut ChaCha8Rng) -> Result<Episode<Self::P>, EnvError>;
    /// Transforms at the nominal operating point, used to set flips.
    fn nominal_transforms(&self) -> Result<TransformPair, EnvError>;
    /// Margin quantities at `count` states drawn from the verification box.
    fn margin_samples(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
        count: usize,
    ) -> Result<Vec<MarginSample>, EnvError>;
}

/// Flips set from `tp` when `refresh` is on; unchanged otherwise.
fn flipped(bank: &PolicyBank, tp: &TransformPair, refresh: bool) -> Result<PolicyBank, EnvError> {
    if refresh && bank.has_sign_pattern() {
        Ok(bank.set_flips(&tp.r_diag(), &tp.lambda_diag())?)
    } else {
        Ok(bank.clone())
    }
}

fn sample_s2<R: Rng + ?Sized>(rng: &mut R, n: usize, half_width: f64) -> Vec<f64> {
    (0..n)
        .map(|_| uniform(rng, [-half_width, half_width]))
        .collect()
}

/// Margin quantities of `bank` at latent error `y − y_ref` and integral `s2`
/// under transform pair `tp`.
pub fn margin_sample_at(
    bank: &PolicyBank,
    tp: &TransformPair,
    y_err: &Vector,
    s2: &[f64],
) -> Result<MarginSample, EnvError> {
    let z = tp.to_aux(y_err);
    let ps = PolicyState {
        s2: s2.to_vec(),
        t: 0.0,
    };
    let (j1, j2) = bank.jacobian(z.as_slice(), &ps)?;
    Ok(MarginSample {
        lambda: tp.lambda_diag(),
        r: tp.r_diag(),
        j1,
        j2,
    })
}

/// Random peg tasks with the loop wiring shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PegFactory {
    pub sampling: PegSampling,
    pub dt: f64,
    pub horizon: f64,
    /// Rebuild flips from the live transforms on every regime change.
    pub refresh_flips: bool,
    /// Verification box half-widths around the reference, in `[x, φ]`.
    pub verify_half_width: [f64; 2],
    /// Verification box half-width for the integral state.
    pub verify_s2: f64,
    pub reward_weights: [f64; 2],
}

impl Default for PegFactory {
    fn default() -> Self {
        Self {
            sampling: PegSampling::default(),
            dt: 1e-3,
            horizon: 1.0,
            refresh_flips: true,
            verify_half_width: [1.0, 1.0],
            verify_s2: 0.1,
            reward_weights: [1.0, 1.0],
        }
    }
}

impl PegFactory {
    /// Transforms of a contact-regime peg with the given parameters.
    pub fn transforms_for(p: &PegParams, regime: Regime) -> Result<TransformPair, EnvError> {
        let m = peg_latent_model(*p);
        let (jy, ju) = m.jacobians_in(&Vector::from_vec(vec![p.x_d, p.f_d]), regime);
        Ok(build_from_jacobians(&jy, &ju)?)
    }

    /// Nominal parameters: box midpoints, flat surface.
    pub fn nominal_params(&self) -> PegParams {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        let s = &self.sampling;
        PegParams {
            tau_x: mid(s.tau_x),
            tau_z: mid(s.tau_z),
            k_sur: mid(s.k_sur),
            k1s: 0.0,
            k2s: 0.0,
            x_d: mid(s.x_d),
            f_d: mid(s.f_d),
        }
    }

    /// Output scales `gain·|Λ_ii|/|R_ii|` at the stiffest surface of the box,
    /// so that `|∂a/∂s1·R_ii| ≤ gain·|Λ_ii|·|∂π/∂s1|`.
    pub fn policy_scale(&self, gain: f64) -> Result<Vec<f64>, EnvError> {
        let p = PegParams {
            k_sur: self.sampling.k_sur[1],
            ..self.nominal_params()
        };
        let tp = Self::transforms_for(&p, Regime::Contact)?;
        Ok(tp
            .lambda_diag()
            .iter()
            .zip(tp.r_diag())
            .map(|(l, r)| gain * l.abs() / r.abs())
            .collect())
    }
}

impl EpisodeFactory for PegFactory {
    type P = PegPlant;

    fn latent_dim(&self) -> usize {
        2
    }

    fn build(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode<PegPlant>, EnvError> {
        let p = self.sampling.sample_params(rng);
        let plant = PegPlant::new(p)?;
        let s0 = self.sampling.sample_state(&p, rng);
        let x0 = plant.model.to_latent(&s0);
        let mut lp = ClosedLoop::new(plant, Some(bank.clone()), self.dt)?
            .with_refresh_flips(self.refresh_flips);
        lp.reward_weights = self.reward_weights.to_vec();
        Ok(Episode {
            closed_loop: lp,
            x0,
            horizon: self.horizon,
        })
    }

    fn nominal_transforms(&self) -> Result<TransformPair, EnvError> {
        Self::transforms_for(&self.nominal_params(), Regime::Contact)
    }

    fn margin_samples(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
        count: usize,
    ) -> Result<Vec<MarginSample>, EnvError> {
        (0..count)
            .map(|_| {
                let p = self.sampling.sample_params(rng);
                p.validate()?;
                let [hx, hf] = self.verify_half_width;
                let err = Vector::from_vec(vec![uniform(rng, [-hx, hx]), uniform(rng, [-hf, hf])]);
                let y = Vector::from_vec(vec![p.x_d, p.f_d]) + &err;
                let regime = peg_latent_model(p).regime_of(&y);
                let (jy, ju) = peg_latent_model(p).jacobians_in(&y, regime);
                let tp = build_from_jacobians(&jy, &ju)?;
                let b = flipped(bank, &tp, self.refresh_flips)?;
                let s2 = sample_s2(rng, 2, self.verify_s2);
                margin_sample_at(&b, &tp, &err, &s2)
            })
            .collect()
    }
}

/// Regulation of a fixed linear latent model from random initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiFactory {
    pub model: LinearModel,
    pub dt: f64,
    pub horizon: f64,
    /// Initial states are uniform in `[-x0_half_width, x0_half_width]ⁿ`.
    pub x0_half_width: f64,
    pub verify_s2: f64,
    /// Set flips from the model transforms before each episode.
    pub set_flips: bool,
}

impl LtiFactory {
    pub fn new(model: LinearModel, dt: f64, horizon: f64) -> Self {
        Self {
            model,
            dt,
            horizon,
            x0_half_width: 1.0,
            verify_s2: 0.1,
            set_flips: true,
        }
    }
}

impl EpisodeFactory for LtiFactory {
    type P = LtiPlant;

    fn latent_dim(&self) -> usize {
        self.model.state.nrows()
    }

    fn build(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode<LtiPlant>, EnvError> {
        let n = self.latent_dim();
        let h = self.x0_half_width;
        let x0 = Vector::from_fn(n, |_, _| uniform(rng, [-h, h]));
        let tp = self.nominal_transforms()?;
        let b = flipped(bank, &tp, self.set_flips)?;
        let lp = ClosedLoop::new(LtiPlant::new(self.model.clone()), Some(b), self.dt)?
            .with_refresh_flips(false);
        Ok(Episode {
            closed_loop: lp,
            x0,
            horizon: self.horizon,
        })
    }

    fn nominal_transforms(&self) -> Result<TransformPair, EnvError> {
        Ok(build_from_jacobians(&self.model.state, &self.model.input)?)
    }

    fn margin_samples(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
        count: usize,
    ) -> Result<Vec<MarginSample>, EnvError> {
        let n = self.latent_dim();
        let tp = self.nominal_transforms()?;
        let b = flipped(bank, &tp, self.set_flips)?;
        let h = self.x0_half_width;
        (0..count)
            .map(|_| {
                let y = Vector::from_fn(n, |_, _| uniform(rng, [-h, h]));
                let s2 = sample_s2(rng, n, self.verify_s2);
                margin_sample_at(&b, &tp, &y, &s2)
            })
            .collect()
    }
}

/// Regulation of a second-order task-space error loop from random `[e; ė]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderFactory {
    pub plant: SecondOrderPlant,
    pub dt: f64,
    pub horizon: f64,
    /// `e0` and `ė0` are uniform in `[-h, h]` per dimension.
    pub e0_half_width: f64,
    pub edot0_half_width: f64,
    pub verify_s2: f64,
    pub set_flips: bool,
}

impl SecondOrderFactory {
    pub fn new(g: &GainSet, branch: Branch, dt: f64, horizon: f64) -> Result<Self, EnvError> {
        Ok(Self {
            plant: second_order_env(g, branch)?,
            dt,
            horizon,
            e0_half_width: 1.0,
            edot0_half_width: 1.0,
            verify_s2: 0.1,
            set_flips: true,
        })
    }

    fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let n = self.plant.dim();
        let (he, hd) = (self.e0_half_width, self.edot0_half_width);
        Vector::from_fn(2 * n, |i, _| {
            if i < n {
                uniform(rng, [-he, he])
            } else {
                uniform(rng, [-hd, hd])
            }
        })
    }
}

impl EpisodeFactory for SecondOrderFactory {
    type P = SecondOrderPlant;

    fn latent_dim(&self) -> usize {
        self.plant.dim()
    }

    fn build(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode<SecondOrderPlant>, EnvError> {
        let x0 = self.sample_state(rng);
        let tp = self.nominal_transforms()?;
        let b = flipped(bank, &tp, self.set_flips)?;
        let lp = ClosedLoop::new(self.plant.clone(), Some(b), self.dt)?.with_refresh_flips(false);
        Ok(Episode {
            closed_loop: lp,
            x0,
            horizon: self.horizon,
        })
    }

    fn nominal_transforms(&self) -> Result<TransformPair, EnvError> {
        let (jy, ju) = self
            .plant
            .latent_jacobians(&Vector::zeros(0), Regime::Nominal);
        Ok(build_from_jacobians(&jy, &ju)?)
    }

    fn margin_samples(
        &self,
        bank: &PolicyBank,
        rng: &mut ChaCha8Rng,
        count: usize,
    ) -> Result<Vec<MarginSample>, EnvError> {
        let tp = self.nominal_transforms()?;
        let b = flipped(bank, &tp, self.set_flips)?;
        (0..count)
            .map(|_| {
                let y = self.plant.latent(&self.sample_state(rng));
                let s2 = sample_s2(rng, self.plant.dim(), self.verify_s2);
                margin_sample_at(&b, &tp, &y, &s2)
            })
            .collect()
    }
}

fn csv_header(n_y: usize, n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for (p, k) in [("y", n_y), ("z", n), ("a", n), ("u", n)] {
        cols.extend((0..k).map(|i| format!("{p}{i}")));
    }
    cols.push("regime".into());
    for p in ["c1_", "c2_"] {
        cols.extend((0..n).map(|i| format!("{p}{i}")));
    }
    cols.join(",")
}

/// 17-significant-digit decimal.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes records as CSV with columns `t, y*, z*, a*, u*, regime, c1*, c2*`.
pub fn write_records_csv<W: Write>(records: &[StepRecord], mut w: W) -> io::Result<()> {
    let (ny, n) = records.first().map_or((0, 0), |r| (r.y.len(), r.z.len()));
    writeln!(w, "{}", csv_header(ny, n))?;
    for r in records {
        let mut cells = vec![fmt_f64(r.t)];
        for v in r.y.iter().chain(&r.z).chain(&r.a).chain(&r.u) {
            cells.push(fmt_f64(*v));
        }
        cells.push(r.regime.label().to_string());
        for v in r.c1.iter().chain(&r.c2) {
            cells.push(fmt_f64(*v));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
