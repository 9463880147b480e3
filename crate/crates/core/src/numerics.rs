//! Dense small-matrix linear algebra and fixed-step ODE integration.
//!
//! Everything here works on `nalgebra` dynamic matrices. The decompositions
//! add deterministic conventions on top of the raw factorizations so that the
//! coordinate transforms built from them are reproducible run to run:
//!
//! * eigenvalues are sorted ascending, ties broken by the lexicographic order
//!   of their eigenvectors (descending, so a repeated eigenvalue of a diagonal
//!   matrix keeps the identity basis);
//! * every eigenvector has unit norm and a positive first nonzero component;
//! * the triangular factor of a QR decomposition has a positive diagonal.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense real matrix.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Eigenvalues whose imaginary part exceeds this fraction of `‖A‖` are rejected.
pub const COMPLEX_TOL: f64 = 1e-9;
/// Eigenvector matrices with a larger 2-norm condition number are rejected.
pub const MAX_EIGVEC_CONDITION: f64 = 1e12;
/// Pivots below this fraction of `‖A‖` make a matrix singular for QR.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-12;
/// Default bound on the state norm before an integration is declared diverged.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;
/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix or vector contains non-finite entries")]
    NonFinite,
    #[error("spectrum is complex (imaginary part {imag:e})")]
    ComplexSpectrum { imag: f64 },
    #[error("matrix is defective (eigenvector condition {condition:e}, residual {residual:e})")]
    Defective { condition: f64, residual: f64 },
    #[error("matrix is singular (pivot {pivot:e})")]
    Singular { pivot: f64 },
    #[error("invalid integration interval: t0={t0}, t1={t1}, dt={dt}")]
    InvalidInterval { t0: f64, t1: f64, dt: f64 },
    #[error("integration diverged at t={t}: state norm {norm:e}")]
    Diverged { t: f64, norm: f64 },
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Square matrix with ones on the anti-diagonal. It is its own inverse.
pub fn skew_permutation(n: usize) -> Mat {
    assert!(n >= 1, "skew permutation needs n >= 1");
    Mat::from_fn(n, n, |i, j| if i + j == n - 1 { 1.0 } else { 0.0 })
}

/// Largest absolute entry strictly below the diagonal.
pub fn max_strict_lower(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in (j + 1)..m.nrows() {
            worst = worst.max(m[(i, j)].abs());
        }
    }
    worst
}

/// Largest absolute off-diagonal entry.
pub fn max_off_diagonal(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// 2-norm condition number from singular values; infinite if singular.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest eigenvalue of a symmetric matrix (only the symmetric part is used).
pub fn sym_lambda_max(m: &Mat) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix (only the symmetric part is used).
pub fn sym_lambda_min(m: &Mat) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Mat,
}

impl EigenResult {
    /// `V·diag(λ)·V⁻¹`, or `None` if `V` cannot be inverted.
    pub fn reconstruct(&self) -> Option<Mat> {
        let v = &self.eigenvectors;
        let inv = v.clone().try_inverse()?;
        let d = Mat::from_diagonal(&Vector::from_vec(self.eigenvalues.clone()));
        Some(v * d * inv)
    }

    /// Largest `‖A·v_i − λ_i·v_i‖` over all pairs.
    pub fn max_residual(&self, a: &Mat) -> f64 {
        (0..self.eigenvalues.len())
            .map(|i| {
                let v = self.eigenvectors.column(i);
                (a * v - v * self.eigenvalues[i]).norm()
            })
            .fold(0.0, f64::max)
    }
}

fn normalize_sign(v: &mut Vector) {
    let n = v.norm();
    if n > 0.0 {
        *v /= n;
    }
    let scale = v.amax();
    if let Some(first) = v.iter().cloned().find(|c| c.abs() > 1e-12 * scale) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

fn lex_cmp(a: &Vector, b: &Vector) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Orthonormal basis of the numerical null space of `m`, `dim` vectors wide,
/// canonicalized so it does not depend on the SVD's internal rotation.
fn null_space_basis(m: &Mat, dim: usize) -> Vec<Vector> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let basis: Vec<Vector> = order[..dim]
        .iter()
        .map(|&k| v_t.row(k).transpose().into_owned())
        .collect();
    if dim == 1 {
        let mut v = basis.into_iter().next().expect("one vector");
        normalize_sign(&mut v);
        return vec![v];
    }
    // The orthogonal projector onto the null space is unique; Gram-Schmidt on
    // its columns in index order gives a canonical basis.
    let mut proj = Mat::zeros(n, n);
    for b in &basis {
        proj += b * b.transpose();
    }
    let mut out: Vec<Vector> = Vec::with_capacity(dim);
    let mut candidates: Vec<Vector> = (0..n).map(|j| proj.column(j).into_owned()).collect();
    while out.len() < dim {
        // pivot on the largest remaining column to stay well conditioned
        let (best, norm) = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .fold(
                (0, -1.0),
                |acc, x| if x.1 > acc.1 + 1e-12 { x } else { acc },
            );
        if norm <= 1e-14 {
            break;
        }
        let mut v = candidates[best].clone() / norm;
        normalize_sign(&mut v);
        for c in candidates.iter_mut() {
            let d = v.dot(c);
            *c -= &v * d;
        }
        out.push(v);
    }
    out
}

/// Real eigendecomposition of a diagonalizable matrix with real spectrum.
pub fn eigendecompose_real(a: &Mat) -> Result<EigenResult, NumericsError> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if !all_finite(a) {
        return Err(NumericsError::NonFinite);
    }
    let norm = a.norm();
    if norm == 0.0 {
        return Ok(EigenResult {
            eigenvalues: vec![0.0; n],
            eigenvectors: Mat::identity(n, n),
        });
    }

    let complex = a.clone().schur().complex_eigenvalues();
    let max_imag = complex.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if max_imag > COMPLEX_TOL * norm {
        return Err(NumericsError::ComplexSpectrum { imag: max_imag });
    }
    let mut values: Vec<f64> = complex.iter().map(|c| c.re).collect();
    values.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));

    let cluster_tol = 1e-7 * norm;
    let mut pairs: Vec<(f64, Vector)> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= cluster_tol {
            end += 1;
        }
        let cluster = &values[start..end];
        let mean = cluster.iter().sum::<f64>() / cluster.len() as f64;
        let shifted = a - Mat::identity(n, n) * mean;
        let mut vecs = null_space_basis(&shifted, cluster.len());
        vecs.sort_by(|x, y| lex_cmp(y, x));
        if vecs.len() < cluster.len() {
            return Err(NumericsError::Defective {
                condition: f64::INFINITY,
                residual: f64::INFINITY,
            });
        }
        for (val, v) in cluster.iter().zip(vecs) {
            pairs.push((*val, v));
        }
        start = end;
    }

    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let cols: Vec<Vector> = pairs.into_iter().map(|p| p.1).collect();
    let eigenvectors = Mat::from_columns(&cols);
    let result = EigenResult {
        eigenvalues,
        eigenvectors,
    };
    let condition = condition_number(&result.eigenvectors);
    let residual = result.max_residual(a);
    if !(condition <= MAX_EIGVEC_CONDITION) || residual > COMPLEX_TOL * norm {
        return Err(NumericsError::Defective {
            condition,
            residual,
        });
    }
    Ok(result)
}

/// QR decomposition `A = Q·R` with `R` upper triangular and positive on the diagonal.
pub fn qr_decompose(a: &Mat) -> Result<(Mat, Mat), NumericsError> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if !all_finite(a) {
        return Err(NumericsError::NonFinite);
    }
    let norm = a.norm();
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..n {
        let pivot = r[(i, i)];
        if !(pivot.abs() >= SINGULAR_PIVOT_TOL * norm) || norm == 0.0 {
            return Err(NumericsError::Singular { pivot });
        }
        if pivot < 0.0 {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    Ok((q, r))
}

/// Time-stamped states produced by [`integrate_rk4`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, &Vector)> {
        Some((*self.times.last()?, self.states.last()?))
    }
}

/// One classical fourth-order Runge–Kutta step of size `h`.
pub fn rk4_step<F>(deriv: &F, t: f64, y: &Vector, h: f64) -> Vector
where
    F: Fn(f64, &Vector) -> Vector,
{
    let k1 = deriv(t, y);
    let k2 = deriv(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = deriv(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = deriv(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Sample times `t0, t0+dt, …, t1`, with the final step shortened to land on `t1`.
pub fn time_grid(t0: f64, t1: f64, dt: f64) -> Result<Vec<f64>, NumericsError> {
    if !(dt > 0.0) || !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(NumericsError::InvalidInterval { t0, t1, dt });
    }
    let slack = 1e-9 * dt;
    let mut times = vec![t0];
    let mut k = 1u64;
    loop {
        let t = t0 + k as f64 * dt;
        if t >= t1 - slack {
            break;
        }
        times.push(t);
        k += 1;
    }
    times.push(t1);
    Ok(times)
}

/// Fixed-step RK4 with the default divergence bound.
pub fn integrate_rk4<F>(
    deriv: F,
    y0: &Vector,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(f64, &Vector) -> Vector,
{
    integrate_rk4_bounded(deriv, y0, t0, t1, dt, DEFAULT_DIVERGENCE_BOUND)
}

pub fn integrate_rk4_bounded<F>(
    deriv: F,
    y0: &Vector,
    t0: f64,
    t1: f64,
    dt: f64,
    bound: f64,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(f64, &Vector) -> Vector,
{
    let times = time_grid(t0, t1, dt)?;
    let mut states = Vec::with_capacity(times.len());
    let mut y = y0.clone();
    check_state(t0, &y, bound)?;
    states.push(y.clone());
    for w in times.windows(2) {
        y = rk4_step(&deriv, w[0], &y, w[1] - w[0]);
        check_state(w[1], &y, bound)?;
        states.push(y.clone());
    }
    Ok(Trajectory { times, states })
}

/// Errors with `Diverged` if the state is non-finite or its norm exceeds `bound`.
pub fn check_state(t: f64, y: &Vector, bound: f64) -> Result<(), NumericsError> {
    let norm = y.norm();
    if !norm.is_finite() || norm > bound {
        return Err(NumericsError::Diverged { t, norm });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn eigen_of_diagonal() {
        let a = dmatrix![-2.0, 0.0; 0.0, -1.0];
        let e = eigendecompose_real(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![-2.0, -1.0]);
        assert!((e.eigenvectors.clone() - Mat::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn eigen_of_peg_shaped_lower_triangular() {
        let a = dmatrix![-1.0 / 0.0437, 0.0; 7.0, -1.0 / 0.01];
        let e = eigendecompose_real(&a).unwrap();
        assert!((e.eigenvalues[0] + 100.0).abs() < 1e-9);
        assert!((e.eigenvalues[1] + 1.0 / 0.0437).abs() < 1e-9);
        // textbook 2x2: for lower-triangular [[a,0],[c,d]] the eigenvector of
        // `a` is (a-d, c), the eigenvector of `d` is (0, 1)
        let v0 = e.eigenvectors.column(0);
        assert!(v0[0].abs() < 1e-12 && (v0[1] - 1.0).abs() < 1e-12);
        let (p, c, d): (f64, f64, f64) = (-1.0 / 0.0437, 7.0, -100.0);
        let n = ((p - d) * (p - d) + c * c).sqrt();
        let v1 = e.eigenvectors.column(1);
        assert!((v1[0] - (p - d) / n).abs() < 1e-12);
        assert!((v1[1] - c / n).abs() < 1e-12);
        // lower triangular once columns are put in descending-eigenvalue order
        assert!(e.eigenvectors[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn rotation_has_complex_spectrum() {
        let a = dmatrix![0.0, 1.0; -1.0, 0.0];
        assert!(matches!(
            eigendecompose_real(&a),
            Err(NumericsError::ComplexSpectrum { .. })
        ));
    }

    #[test]
    fn jordan_block_is_defective() {
        let a = dmatrix![1.0, 1.0; 0.0, 1.0];
        assert!(matches!(
            eigendecompose_real(&a),
            Err(NumericsError::Defective { .. })
        ));
    }

    #[test]
    fn repeated_eigenvalue_identity_gives_identity_basis() {
        let a = Mat::identity(3, 3) * 2.0;
        let e = eigendecompose_real(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0; 3]);
        assert!((e.eigenvectors - Mat::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn qr_identity_and_swap() {
        let (q, r) = qr_decompose(&Mat::identity(3, 3)).unwrap();
        assert!((q - Mat::identity(3, 3)).amax() < 1e-15);
        assert!((r - Mat::identity(3, 3)).amax() < 1e-15);

        let a = dmatrix![0.0, 1.0; 1.0, 0.0];
        let (q, r) = qr_decompose(&a).unwrap();
        assert!((&q - &a).amax() < 1e-15);
        assert!((&r - Mat::identity(2, 2)).amax() < 1e-15);
        assert!((q * r - a).amax() < 1e-15);
    }

    #[test]
    fn qr_rank_deficient_is_singular() {
        let a = dmatrix![1.0, 1.0; 0.0, 0.0];
        assert!(matches!(
            qr_decompose(&a),
            Err(NumericsError::Singular { .. })
        ));
        assert!(matches!(
            qr_decompose(&Mat::zeros(2, 2)),
            Err(NumericsError::Singular { .. })
        ));
    }

    #[test]
    fn skew_permutation_examples() {
        assert_eq!(skew_permutation(1), dmatrix![1.0]);
        assert_eq!(skew_permutation(2), dmatrix![0.0, 1.0; 1.0, 0.0]);
        let p3 = skew_permutation(3);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if (i, j) == (0, 2) || (i, j) == (1, 1) || (i, j) == (2, 0) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(p3[(i, j)], expect);
            }
        }
        for n in 1..=8 {
            let p = skew_permutation(n);
            assert_eq!(&p * &p, Mat::identity(n, n));
        }
    }

    #[test]
    fn rk4_constant() {
        let y0 = Vector::from_element(1, 3.0);
        let tr = integrate_rk4(|_, y| Vector::zeros(y.len()), &y0, 0.0, 1.0, 0.1).unwrap();
        assert_eq!(tr.len(), 11);
        assert!(tr.states.iter().all(|s| s[0] == 3.0));
        assert_eq!(*tr.times.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_exponential_decay() {
        let y0 = Vector::from_element(1, 1.0);
        let tr = integrate_rk4(|_, y| -y, &y0, 0.0, 1.0, 1e-3).unwrap();
        let (t, y) = tr.last().unwrap();
        assert_eq!(t, 1.0);
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_growth_diverges() {
        let y0 = Vector::from_element(1, 1.0);
        let err = integrate_rk4(|_, y| y.clone(), &y0, 0.0, 100.0, 1e-2).unwrap_err();
        assert!(matches!(err, NumericsError::Diverged { .. }));
    }

    #[test]
    fn rk4_partial_last_step() {
        let times = time_grid(0.0, 1.05, 0.1).unwrap();
        assert_eq!(times.len(), 12);
        assert!((times[10] - 1.0).abs() < 1e-12);
        assert_eq!(times[11], 1.05);
        assert!(time_grid(0.0, 1.0, 0.0).is_err());
        assert!(time_grid(1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let lambda = -1.5;
        let exact = (lambda * 2.0f64).exp();
        let err = |dt: f64| {
            let tr = integrate_rk4(
                |_, y| y * lambda,
                &Vector::from_element(1, 1.0),
                0.0,
                2.0,
                dt,
            )
            .unwrap();
            (tr.last().unwrap().1[0] - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio >= 14.0, "ratio {ratio}");
    }
}
