//! Latent-space dynamic models and signal composition.
//!
//! A latent model is `ẏ = f(y, u, t)` together with its Jacobians. Composite
//! variables `y = K1·e + K2·ė` turn second-order tracking errors into
//! first-order latent signals, and [`solve_composite_gains`] picks `K1`, `K2`
//! so that a task-space loop `Λd·ë + Kd·ė + Kp·e + u = 0` becomes the
//! diagonal latent model `A·ẏ + B·y + u = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Mat, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{what} must be strictly positive (dimension {dim}, value {value})")]
    NonPositive {
        what: &'static str,
        dim: usize,
        value: f64,
    },
    #[error("negative discriminant Kd²-4·Kp·λd = {value} in dimension {dim}")]
    NegativeDiscriminant { dim: usize, value: f64 },
    #[error("Kp is zero in some but not all dimensions")]
    MixedKp,
}

/// Dynamics `ẏ = f(y, u, t)` with Jacobians `∂f/∂y` and `∂f/∂u`.
pub trait LatentModel: Send + Sync {
    fn dim_y(&self) -> usize;
    fn dim_u(&self) -> usize;
    fn f(&self, y: &Vector, u: &Vector, t: f64) -> Vector;
    fn jac_y(&self, y: &Vector, u: &Vector, t: f64) -> Mat;
    fn jac_u(&self, y: &Vector, u: &Vector, t: f64) -> Mat;
}

/// `ẏ = A·y + B·u` with constant Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub state: Mat,
    pub input: Mat,
}

impl LinearModel {
    pub fn new(state: Mat, input: Mat) -> Result<Self, LatentError> {
        if state.nrows() != state.ncols() {
            return Err(LatentError::DimMismatch {
                expected: state.nrows(),
                got: state.ncols(),
            });
        }
        if input.nrows() != state.nrows() {
            return Err(LatentError::DimMismatch {
                expected: state.nrows(),
                got: input.nrows(),
            });
        }
        Ok(Self { state, input })
    }
}

impl LatentModel for LinearModel {
    fn dim_y(&self) -> usize {
        self.state.nrows()
    }

    fn dim_u(&self) -> usize {
        self.input.ncols()
    }

    fn f(&self, y: &Vector, u: &Vector, _t: f64) -> Vector {
        &self.state * y + &self.input * u
    }

    fn jac_y(&self, _y: &Vector, _u: &Vector, _t: f64) -> Mat {
        self.state.clone()
    }

    fn jac_u(&self, _y: &Vector, _u: &Vector, _t: f64) -> Mat {
        self.input.clone()
    }
}

fn check_positive(what: &'static str, values: &[f64]) -> Result<(), LatentError> {
    for (dim, &value) in values.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(LatentError::NonPositive { what, dim, value });
        }
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<(), LatentError> {
    if expected != got {
        return Err(LatentError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Composite variable `y = K1·e + K2·ė` with diagonal gains.
///
/// `K2` is strictly positive. `K1` is strictly positive for maps built with
/// [`CompositeMap::new`]; the pure-velocity map `y = ė` has `K1 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeMap {
    k1: Vec<f64>,
    k2: Vec<f64>,
}

impl CompositeMap {
    pub fn new(k1: Vec<f64>, k2: Vec<f64>) -> Result<Self, LatentError> {
        check_len(k1.len(), k2.len())?;
        check_positive("K1", &k1)?;
        check_positive("K2", &k2)?;
        Ok(Self { k1, k2 })
    }

    /// `y = K2·ė`, no position term.
    pub fn velocity(k2: Vec<f64>) -> Result<Self, LatentError> {
        check_positive("K2", &k2)?;
        Ok(Self {
            k1: vec![0.0; k2.len()],
            k2,
        })
    }

    pub fn dim(&self) -> usize {
        self.k1.len()
    }

    pub fn k1(&self) -> &[f64] {
        &self.k1
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }
}

pub fn composite_apply(m: &CompositeMap, e: &Vector, edot: &Vector) -> Result<Vector, LatentError> {
    check_len(m.dim(), e.len())?;
    check_len(m.dim(), edot.len())?;
    Ok(Vector::from_fn(m.dim(), |i, _| {
        m.k1[i] * e[i] + m.k2[i] * edot[i]
    }))
}

/// Per-dimension decay rate `K1/K2` of `e` on the manifold `y = 0`.
pub fn composite_zero_decay_rate(m: &CompositeMap) -> Vec<f64> {
    m.k1.iter().zip(&m.k2).map(|(a, b)| a / b).collect()
}

/// Diagonal task-space loop gains for `Λd·ë + Kd·ė + Kp·e + u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub lambda_d: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl GainSet {
    pub fn new(lambda_d: Vec<f64>, kp: Vec<f64>, kd: Vec<f64>) -> Result<Self, LatentError> {
        let g = Self { lambda_d, kp, kd };
        g.validate()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.lambda_d.len()
    }

    pub fn discriminant(&self, i: usize) -> f64 {
        self.kd[i] * self.kd[i] - 4.0 * self.kp[i] * self.lambda_d[i]
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        check_len(self.dim(), self.kp.len())?;
        check_len(self.dim(), self.kd.len())?;
        check_positive("lambda_d", &self.lambda_d)?;
        check_positive("Kd", &self.kd)?;
        for (dim, &value) in self.kp.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LatentError::NonPositive {
                    what: "Kp",
                    dim,
                    value,
                });
            }
        }
        for dim in 0..self.dim() {
            let value = self.discriminant(dim);
            if value < 0.0 {
                return Err(LatentError::NegativeDiscriminant { dim, value });
            }
        }
        Ok(())
    }
}

/// Diagonal latent model `A·ẏ + B·y + u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentLti {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LatentLti {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self, LatentError> {
        let l = Self { a, b };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        check_len(self.a.len(), self.b.len())?;
        check_positive("A", &self.a)?;
        check_positive("B", &self.b)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// Sign choice in the root `Kd ± √(Kd² − 4·Kp·λd)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Plus,
    Minus,
}

/// Composite gains and the resulting latent model for a task-space loop.
///
/// With `Kp > 0` everywhere, `K1 = Kp/λd`, `K2 = 2Kp/(Kd ± √disc)`,
/// `A = λd(Kd ± √disc)/(2Kp)` and `B = λd`. With `Kp = 0` everywhere the
/// composite is `y = ė` and the model is `Λd·ẏ + Kd·y + u = 0`.
pub fn solve_composite_gains(
    g: &GainSet,
    branch: Branch,
) -> Result<(CompositeMap, LatentLti), LatentError> {
    g.validate()?;
    let zero = g.kp.iter().filter(|&&k| k == 0.0).count();
    if zero == g.dim() {
        let map = CompositeMap::velocity(vec![1.0; g.dim()])?;
        let lti = LatentLti::new(g.lambda_d.clone(), g.kd.clone())?;
        return Ok((map, lti));
    }
    if zero > 0 {
        return Err(LatentError::MixedKp);
    }
    let sign = match branch {
        Branch::Plus => 1.0,
        Branch::Minus => -1.0,
    };
    let n = g.dim();
    let (mut k1, mut k2, mut a) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let root = g.kd[i] + sign * g.discriminant(i).sqrt();
        k1.push(g.kp[i] / g.lambda_d[i]);
        k2.push(2.0 * g.kp[i] / root);
        a.push(g.lambda_d[i] / (2.0 * g.kp[i]) * root);
    }
    Ok((
        CompositeMap::new(k1, k2)?,
        LatentLti::new(a, g.lambda_d.clone())?,
    ))
}

/// `ẏ = −A⁻¹B·y − A⁻¹·u` as a [`LinearModel`].
pub fn lti_model(l: &LatentLti) -> LinearModel {
    let n = l.dim();
    let state = Mat::from_fn(n, n, |i, j| if i == j { -l.b[i] / l.a[i] } else { 0.0 });
    let input = Mat::from_fn(n, n, |i, j| if i == j { -1.0 / l.a[i] } else { 0.0 });
    LinearModel { state, input }
}
