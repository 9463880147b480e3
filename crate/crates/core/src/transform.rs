//! Auxiliary-space coordinate transforms and differential-dynamics blocks.
//!
//! The auxiliary coordinates are `z = T_y·y` and `a = T_a⁻¹·u`. `T_y` is the
//! inverse of the eigenvector matrix of `∂f/∂y`, so `Λ = T_y·∂f/∂y·T_y⁻¹` is
//! diagonal. `T_a = (P·Qᵀ)⁻¹` where `Q·R_qr = (T_y·∂f/∂u)ᵀ·P` and `P` is the
//! anti-diagonal permutation, which makes `R = T_y·∂f/∂u·T_a = P·R_qrᵀ·P`
//! upper triangular. With one independent policy per dimension, the
//! differential dynamics of the grouped pairs `(δz_i, δa_i)` are then
//! block upper triangular: a hierarchy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::LatentModel;
use crate::numerics::{
    eigendecompose_real, max_off_diagonal, max_strict_lower, qr_decompose, skew_permutation, Mat,
    NumericsError, Vector,
};

/// Relative tolerance for the diagonality of `Λ` and triangularity of `R`.
pub const STRUCTURE_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("T_y·∂f/∂u is singular")]
    SingularInputMap,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformPair {
    pub t_y: Mat,
    pub t_y_inv: Mat,
    pub t_a: Mat,
    /// `T_y·∂f/∂y·T_y⁻¹` as computed; diagonal up to round-off.
    pub lambda: Mat,
    /// `T_y·∂f/∂u·T_a` as computed; upper triangular up to round-off.
    pub r: Mat,
    pub q: Mat,
    pub r_qr: Mat,
}

/// Smallest and largest eigenvalues of `T_yᵀT_y` and `(T_a⁻¹)ᵀT_a⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBounds {
    pub ty_min: f64,
    pub ty_max: f64,
    pub ta_inv_min: f64,
    pub ta_inv_max: f64,
}

impl MetricBounds {
    /// Lower metric bound `m̲` over both blocks.
    pub fn lower(&self) -> f64 {
        self.ty_min.min(self.ta_inv_min)
    }

    /// Upper metric bound `m̄` over both blocks.
    pub fn upper(&self) -> f64 {
        self.ty_max.max(self.ta_inv_max)
    }
}

fn gram_extremes(m: &Mat) -> (f64, f64) {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (min * min, max * max)
}

impl TransformPair {
    pub fn dim(&self) -> usize {
        self.t_y.nrows()
    }

    /// Transforms for a model whose Jacobians are already decomposed.
    pub fn identity(n: usize) -> Self {
        let id = Mat::identity(n, n);
        Self {
            t_y: id.clone(),
            t_y_inv: id.clone(),
            t_a: id.clone(),
            lambda: Mat::zeros(n, n),
            r: id.clone(),
            q: id.clone(),
            r_qr: id,
        }
    }

    pub fn lambda_diag(&self) -> Vec<f64> {
        self.lambda.diagonal().iter().cloned().collect()
    }

    pub fn r_diag(&self) -> Vec<f64> {
        self.r.diagonal().iter().cloned().collect()
    }

    pub fn metric_bounds(&self) -> MetricBounds {
        let (ty_min, ty_max) = gram_extremes(&self.t_y);
        let ta_inv = self
            .t_a
            .clone()
            .try_inverse()
            .unwrap_or_else(|| Mat::zeros(self.dim(), self.dim()));
        let (ta_inv_min, ta_inv_max) = gram_extremes(&ta_inv);
        MetricBounds {
            ty_min,
            ty_max,
            ta_inv_min,
            ta_inv_max,
        }
    }

    /// Largest off-diagonal magnitude of `Λ` relative to `‖Λ‖`.
    pub fn diagonality_violation(&self) -> f64 {
        relative(max_off_diagonal(&self.lambda), self.lambda.norm())
    }

    /// Largest strictly-lower magnitude of `R` relative to `‖R‖`.
    pub fn triangularity_violation(&self) -> f64 {
        relative(max_strict_lower(&self.r), self.r.norm())
    }

    /// `max |R − P·R_qrᵀ·P|`.
    pub fn qr_identity_residual(&self) -> f64 {
        let p = skew_permutation(self.dim());
        (&self.r - &p * self.r_qr.transpose() * &p).amax()
    }

    /// `z = T_y·y`.
    pub fn to_aux(&self, y: &Vector) -> Vector {
        &self.t_y * y
    }

    /// `u = T_a·a`.
    pub fn to_input(&self, a: &Vector) -> Vector {
        &self.t_a * a
    }
}

fn relative(value: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        value / scale
    } else {
        value
    }
}

/// Builds `T_y`, `T_a`, `Λ` and `R` from the model Jacobians at `(y, u, t)`.
pub fn build_transforms(
    model: &dyn LatentModel,
    y: &Vector,
    u: &Vector,
    t: f64,
) -> Result<TransformPair, TransformError> {
    let jy = model.jac_y(y, u, t);
    let ju = model.jac_u(y, u, t);
    build_from_jacobians(&jy, &ju)
}

pub fn build_from_jacobians(jac_y: &Mat, jac_u: &Mat) -> Result<TransformPair, TransformError> {
    let n = jac_y.nrows();
    if jac_u.nrows() != n {
        return Err(TransformError::DimMismatch {
            expected: n,
            got: jac_u.nrows(),
        });
    }
    if jac_u.ncols() != n {
        return Err(TransformError::DimMismatch {
            expected: n,
            got: jac_u.ncols(),
        });
    }
    let eig = eigendecompose_real(jac_y)?;
    let t_y_inv = eig.eigenvectors;
    let t_y = t_y_inv
        .clone()
        .try_inverse()
        .ok_or(NumericsError::Defective {
            condition: f64::INFINITY,
            residual: f64::NAN,
        })?;
    let lambda = &t_y * jac_y * &t_y_inv;

    let p = skew_permutation(n);
    let input_map = &t_y * jac_u;
    let (q, r_qr) = match qr_decompose(&(input_map.transpose() * &p)) {
        Ok(f) => f,
        Err(NumericsError::Singular { .. }) => return Err(TransformError::SingularInputMap),
        Err(e) => return Err(e.into()),
    };
    // T_a = (P·Qᵀ)⁻¹ = Q·P since both factors are orthogonal and P = Pᵀ.
    let t_a = &q * &p;
    let r = &input_map * &t_a;
    Ok(TransformPair {
        t_y,
        t_y_inv,
        t_a,
        lambda,
        r,
        q,
        r_qr,
    })
}

/// Finite-difference surrogate for `Ṫ_y`.
pub fn tdot_estimate(
    prev: &TransformPair,
    now: &TransformPair,
    dt: f64,
) -> Result<Mat, TransformError> {
    if !(dt > 0.0) {
        return Err(TransformError::InvalidStep(dt));
    }
    if prev.dim() != now.dim() {
        return Err(TransformError::DimMismatch {
            expected: prev.dim(),
            got: now.dim(),
        });
    }
    Ok((&now.t_y - &prev.t_y) / dt)
}

/// Differential dynamics `[δż; δȧ] = [A B; C D]·[δz; δa]` in auxiliary
/// coordinates, split as `F = F1 + F2` where `F2` carries the `Ṫ_y` terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxDifferentialSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub f1: Mat,
    pub f2: Mat,
    pub lambda: Mat,
    pub r: Mat,
    pub jac_s1: Vec<f64>,
    pub jac_s2: Vec<f64>,
}

/// Row/column order that groups `(z_i, a_i)` pairs: grouped index `2i` is
/// `z_i` (original `i`), grouped `2i+1` is `a_i` (original `n+i`).
fn grouped_index(n: usize, k: usize) -> usize {
    if k.is_multiple_of(2) {
        k / 2
    } else {
        n + k / 2
    }
}

impl AuxDifferentialSystem {
    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    /// The full `F = [A B; C D]`.
    pub fn full(&self) -> Mat {
        &self.f1 + &self.f2
    }

    /// `m` (in `z`-then-`a` order) permuted into `(z_1, a_1, z_2, a_2, …)` order.
    pub fn grouped(&self, m: &Mat) -> Mat {
        let n = self.dim();
        Mat::from_fn(2 * n, 2 * n, |i, j| {
            m[(grouped_index(n, i), grouped_index(n, j))]
        })
    }

    /// 2×2 block `F_ij` of the grouped `F1`: how `(δz_j, δa_j)` drives `(δż_i, δȧ_i)`.
    pub fn block(&self, i: usize, j: usize) -> Mat {
        let n = self.dim();
        Mat::from_fn(2, 2, |r, c| {
            self.f1[(grouped_index(n, 2 * i + r), grouped_index(n, 2 * j + c))]
        })
    }

    /// Self-feedback block `F_ii`.
    pub fn self_feedback(&self, i: usize) -> Mat {
        self.block(i, i)
    }
}

/// Assembles `A, B, C, D`, `F1`, `F2` from a transform pair, the diagonal
/// policy Jacobians and an estimate of `Ṫ_y`.
pub fn assemble_blocks(
    tp: &TransformPair,
    jac_s1: &[f64],
    jac_s2: &[f64],
    tdot_y: &Mat,
) -> Result<AuxDifferentialSystem, TransformError> {
    let n = tp.dim();
    for got in [jac_s1.len(), jac_s2.len(), tdot_y.nrows(), tdot_y.ncols()] {
        if got != n {
            return Err(TransformError::DimMismatch { expected: n, got });
        }
    }
    let pi1 = Mat::from_diagonal(&Vector::from_column_slice(jac_s1));
    let pi2 = Mat::from_diagonal(&Vector::from_column_slice(jac_s2));
    let tdot_term = tdot_y * &tp.t_y_inv;

    let a = &tdot_term + &tp.lambda;
    let b = tp.r.clone();
    let c = &pi1 * &a + &pi2;
    let d = &pi1 * &tp.r;

    let mut f1 = Mat::zeros(2 * n, 2 * n);
    f1.view_mut((0, 0), (n, n)).copy_from(&tp.lambda);
    f1.view_mut((0, n), (n, n)).copy_from(&tp.r);
    f1.view_mut((n, 0), (n, n))
        .copy_from(&(&pi1 * &tp.lambda + &pi2));
    f1.view_mut((n, n), (n, n)).copy_from(&d);

    let mut f2 = Mat::zeros(2 * n, 2 * n);
    f2.view_mut((0, 0), (n, n)).copy_from(&tdot_term);
    f2.view_mut((n, 0), (n, n)).copy_from(&(&pi1 * &tdot_term));

    Ok(AuxDifferentialSystem {
        a,
        b,
        c,
        d,
        f1,
        f2,
        lambda: tp.lambda.clone(),
        r: tp.r.clone(),
        jac_s1: jac_s1.to_vec(),
        jac_s2: jac_s2.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinationKind {
    Hierarchical,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinationVerdict {
    pub pass: bool,
    /// Largest violating entry relative to the largest entry of `F1`.
    pub max_violation: f64,
    /// Grouped block `(i, j)` holding the largest violation.
    pub worst_block: Option<(usize, usize)>,
}

/// Checks the coupling structure of the grouped `F1`.
///
/// Hierarchical: every block `F_ij` with `i > j` vanishes, so subsystem `i`
/// is driven only by higher-indexed subsystems. Feedback: `F_ij = −F_jiᵀ`
/// for every `i < j`.
pub fn check_combination(
    sys: &AuxDifferentialSystem,
    kind: CombinationKind,
    tol: f64,
) -> CombinationVerdict {
    let n = sys.dim();
    let scale = sys.f1.amax();
    let mut worst = 0.0f64;
    let mut worst_block = None;
    for i in 0..n {
        for j in 0..n {
            let v = match kind {
                CombinationKind::Hierarchical if i > j => sys.block(i, j).amax(),
                CombinationKind::Feedback if i < j => {
                    (sys.block(i, j) + sys.block(j, i).transpose()).amax()
                }
                _ => continue,
            };
            let v = relative(v, scale);
            if v > worst {
                worst = v;
                worst_block = Some((i, j));
            }
        }
    }
    CombinationVerdict {
        pass: worst <= tol,
        max_violation: worst,
        worst_block,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LinearModel;
    use nalgebra::{dmatrix, dvector};

    fn pair(jy: Mat, ju: Mat) -> Result<TransformPair, TransformError> {
        let model = LinearModel::new(jy, ju).unwrap();
        let n = model.state.nrows();
        build_transforms(&model, &Vector::zeros(n), &Vector::zeros(n), 0.0)
    }

    #[test]
    fn diagonal_model_sorts_eigenvalues() {
        let tp = pair(dmatrix![-1.0, 0.0; 0.0, -2.0], Mat::identity(2, 2)).unwrap();
        assert_eq!(tp.lambda_diag(), vec![-2.0, -1.0]);
        // T_y is the permutation that puts the faster mode first
        assert_eq!(tp.t_y, dmatrix![0.0, 1.0; 1.0, 0.0]);
        assert!(tp.triangularity_violation() <= STRUCTURE_TOL);
        assert!(tp.r[(1, 0)].abs() < 1e-15);
        assert!(tp.qr_identity_residual() < 1e-12);
    }

    #[test]
    fn peg_like_model_gives_triangular_r_with_coupling() {
        let (tx, tz, k) = (0.0437, 0.01, 10.0);
        let jy = dmatrix![-1.0 / tx, 0.0; 3.0, -1.0 / tz];
        let ju = dmatrix![1.0 / tx, 0.0; -k * 0.005 / tx, k / tz];
        let tp = pair(jy, ju).unwrap();
        let l = tp.lambda_diag();
        assert!((l[0] + 1.0 / tz).abs() < 1e-9 && (l[1] + 1.0 / tx).abs() < 1e-9);
        assert!(tp.diagonality_violation() <= STRUCTURE_TOL);
        assert!(tp.triangularity_violation() <= STRUCTURE_TOL);
        assert!(tp.r[(0, 1)].abs() > 1e-6);
        assert!(tp.qr_identity_residual() <= 1e-9);
        let mb = tp.metric_bounds();
        assert!(mb.ty_min > 0.0);
        assert!((mb.ta_inv_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_map_is_singular() {
        let err = pair(dmatrix![-1.0, 0.0; 0.0, -2.0], Mat::zeros(2, 2)).unwrap_err();
        assert_eq!(err, TransformError::SingularInputMap);
    }

    #[test]
    fn scalar_blocks() {
        let tp = TransformPair {
            lambda: dmatrix![-1.0],
            r: dmatrix![1.0],
            ..TransformPair::identity(1)
        };
        let sys = assemble_blocks(&tp, &[-0.5], &[-0.2], &Mat::zeros(1, 1)).unwrap();
        let expect = dmatrix![-1.0, 1.0; 0.3, -0.5];
        assert!((&sys.f1 - &expect).amax() < 1e-15);
        assert_eq!(sys.f2, Mat::zeros(2, 2));
        assert_eq!(sys.full(), sys.f1);
        assert_eq!(sys.self_feedback(0), sys.f1);
    }

    #[test]
    fn triangular_r_zeroes_lower_coupling() {
        let tp = TransformPair {
            lambda: dmatrix![-3.0, 0.0; 0.0, -1.0],
            r: dmatrix![2.0, 0.7; 0.0, -1.5],
            ..TransformPair::identity(2)
        };
        let sys = assemble_blocks(&tp, &[0.4, 1.2], &[0.3, 0.9], &Mat::zeros(2, 2)).unwrap();
        assert_eq!(sys.block(1, 0), Mat::zeros(2, 2));
        // F_12 = [[0, R_12], [0, π1_1·R_12]]
        let f12 = sys.block(0, 1);
        assert_eq!(f12, dmatrix![0.0, 0.7; 0.0, 0.4 * 0.7]);
        // F_22 = [[Λ, R], [π1·Λ + π2, π1·R]]
        let f22 = sys.self_feedback(1);
        assert_eq!(f22, dmatrix![-1.0, -1.5; -1.2 + 0.9, 1.2 * -1.5]);
        let v = check_combination(&sys, CombinationKind::Hierarchical, STRUCTURE_TOL);
        assert!(v.pass);
        assert_eq!(v.max_violation, 0.0);
    }

    #[test]
    fn tdot_enters_only_f2() {
        let tp = TransformPair::identity(2);
        let tdot = dmatrix![0.1, 0.0; 0.2, 0.3];
        let sys = assemble_blocks(&tp, &[1.0, 2.0], &[0.5, 0.5], &tdot).unwrap();
        assert_eq!(sys.f2.view((0, 0), (2, 2)), tdot);
        assert_eq!(sys.f2.view((2, 0), (2, 2)), dmatrix![0.1, 0.0; 0.4, 0.6]);
        assert_eq!(sys.f2.view((0, 2), (2, 2)), Mat::zeros(2, 2));
        let full = sys.full();
        assert_eq!(full.view((0, 0), (2, 2)), sys.a);
        assert_eq!(full.view((2, 0), (2, 2)), sys.c);
        assert_eq!(full.view((0, 2), (2, 2)), sys.b);
        assert_eq!(full.view((2, 2), (2, 2)), sys.d);
        assert!(assemble_blocks(&tp, &[1.0], &[0.5, 0.5], &tdot).is_err());
    }

    #[test]
    fn symmetric_coupling_fails_hierarchical() {
        let tp = TransformPair {
            lambda: dmatrix![-2.0, 0.4; 0.4, -1.0],
            r: dmatrix![1.0, 0.3; 0.3, 1.0],
            ..TransformPair::identity(2)
        };
        let sys = assemble_blocks(&tp, &[0.5, 0.5], &[0.1, 0.1], &Mat::zeros(2, 2)).unwrap();
        let v = check_combination(&sys, CombinationKind::Hierarchical, STRUCTURE_TOL);
        assert!(!v.pass);
        assert!(v.max_violation > 0.0);
        assert_eq!(v.worst_block, Some((1, 0)));
    }

    #[test]
    fn skew_coupling_passes_feedback() {
        // With zero policy Jacobians the grouped blocks are [[Λ_ij, R_ij], [0, 0]];
        // choose Λ and R so that F_01 = -F_10ᵀ.
        let tp = TransformPair {
            lambda: dmatrix![-2.0, 0.5; -0.5, -1.0],
            r: dmatrix![1.0, 0.0; 0.0, 1.0],
            ..TransformPair::identity(2)
        };
        let sys = assemble_blocks(&tp, &[0.0, 0.0], &[0.0, 0.0], &Mat::zeros(2, 2)).unwrap();
        let v = check_combination(&sys, CombinationKind::Feedback, 1e-12);
        assert!(v.pass, "{v:?}");
        assert!(!check_combination(&sys, CombinationKind::Hierarchical, 1e-12).pass);
    }

    #[test]
    fn tdot_examples() {
        let tp = pair(dmatrix![-1.0, 0.0; 1.0, -2.0], Mat::identity(2, 2)).unwrap();
        assert_eq!(tdot_estimate(&tp, &tp, 0.01).unwrap(), Mat::zeros(2, 2));
        let dt = 1e-3;
        let grown = TransformPair {
            t_y: &tp.t_y * (1.0 + dt),
            ..tp.clone()
        };
        let est = tdot_estimate(&tp, &grown, dt).unwrap();
        assert!((est - &tp.t_y).amax() < 1e-9);
        assert_eq!(
            tdot_estimate(&tp, &tp, 0.0),
            Err(TransformError::InvalidStep(0.0))
        );
    }

    #[test]
    fn to_aux_and_back() {
        let tp = pair(dmatrix![-1.0, 0.0; 1.0, -2.0], dmatrix![1.0, 0.2; 0.0, 1.0]).unwrap();
        let y = dvector![0.3, -0.7];
        let back = &tp.t_y_inv * tp.to_aux(&y);
        assert!((back - y).amax() < 1e-14);
    }
}
