use contraction_core::numerics::{
    eigendecompose_real, integrate_rk4, qr_decompose, skew_permutation, Mat, Vector,
};
use proptest::prelude::*;

/// `V·diag(λ)·V⁻¹` with `V = I + 0.4·N` and eigenvalues separated by at least 0.2.
fn diagonalizable() -> impl Strategy<Value = (Mat, Vec<f64>)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(0.2f64..1.5, n),
            -5.0f64..1.0,
        )
            .prop_map(move |(noise, gaps, start)| {
                let v = Mat::identity(n, n) + Mat::from_row_slice(n, n, &noise) * 0.4;
                let mut lambda = Vec::with_capacity(n);
                let mut acc = start;
                for g in gaps {
                    lambda.push(acc);
                    acc += g;
                }
                let d = Mat::from_diagonal(&Vector::from_vec(lambda.clone()));
                let a = &v * d * v.clone().try_inverse().unwrap();
                (a, lambda)
            })
    })
}

fn nonsingular() -> impl Strategy<Value = Mat> {
    (2usize..=5).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n)
            .prop_map(move |e| Mat::identity(n, n) * 2.0 + Mat::from_row_slice(n, n, &e))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn eigendecomposition_reconstructs((a, lambda) in diagonalizable()) {
        let eig = eigendecompose_real(&a).unwrap();
        let back = eig.reconstruct().unwrap();
        let rel = (&back - &a).amax() / a.amax().max(1.0);
        prop_assert!(rel < 1e-8, "relative reconstruction error {rel}");
        for (got, want) in eig.eigenvalues.iter().zip(&lambda) {
            prop_assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()));
        }
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        for j in 0..a.nrows() {
            let col = eig.eigenvectors.column(j);
            let first = col.iter().find(|v| v.abs() > 1e-12).copied().unwrap();
            prop_assert!(first > 0.0);
        }
    }

    #[test]
    fn qr_is_orthogonal_and_triangular(a in nonsingular()) {
        let (q, r) = qr_decompose(&a).unwrap();
        let n = a.nrows();
        prop_assert!((q.transpose() * &q - Mat::identity(n, n)).amax() < 1e-10);
        for i in 0..n {
            prop_assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                prop_assert_eq!(r[(i, j)], 0.0);
            }
        }
        prop_assert!((&q * &r - &a).amax() < 1e-10);
    }
}

#[test]
fn skew_permutation_is_involution() {
    for n in 1..=8 {
        let p = skew_permutation(n);
        assert_eq!(&p * &p, Mat::identity(n, n));
    }
}

#[test]
fn rk4_error_is_fourth_order() {
    let lambda = -1.3;
    let err = |dt: f64| {
        let traj = integrate_rk4(
            |_t, y: &Vector| y * lambda,
            &Vector::from_vec(vec![1.0]),
            0.0,
            2.0,
            dt,
        )
        .unwrap();
        (traj.last().unwrap().1[0] - (lambda * 2.0f64).exp()).abs()
    };
    for dt in [0.1, 0.05, 0.025] {
        assert!(err(dt) / err(dt / 2.0) >= 14.0);
    }
}
