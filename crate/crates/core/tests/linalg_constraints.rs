use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigma_pca::constraints::{
    eigen_map, orth_reg_grad, orthogonalize, project_unit_columns, weight_norm_map, OrthMethod, OrthRegMode,
};
use sigma_pca::linalg::{gaussian_matrix, orth_residual, pca_fit_svd, random_semi_orthogonal, svd_thin};
use sigma_pca::{DataMatrix, Mat, Vector};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Mat::from_row_slice(rows, cols, &v))
}

#[test]
fn svd_reconstructs_random_6x4() {
    let x = gaussian_matrix(6, 4, &mut rng(7));
    let s = svd_thin(&DataMatrix::new(x.clone()).unwrap(), 4).unwrap();
    let back = &s.u * Mat::from_diagonal(&s.s) * s.v.transpose();
    assert!((back - &x).norm() / x.norm() <= 1e-10);
}

#[test]
fn pca_recovers_diagonal_covariance() {
    let z = gaussian_matrix(10_000, 2, &mut rng(1));
    let x = Mat::from_fn(10_000, 2, |i, j| z[(i, j)] * [2.0, 1.0][j]);
    let b = pca_fit_svd(&DataMatrix::new(x).unwrap(), 2).unwrap();
    assert!((b.sigma[0] / 2.0 - 1.0).abs() < 0.05 && (b.sigma[1] - 1.0).abs() < 0.05);
    for i in 0..2 {
        assert!(b.w[(i, i)].abs() > 0.999, "{}", b.w);
    }
}

/// Independent oracle: eigendecomposition of the 1/n covariance.
#[test]
fn svd_agrees_with_covariance_eigendecomposition() {
    let x = DataMatrix::new(gaussian_matrix(200, 4, &mut rng(5)) * Mat::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 1.0, 0.5])))
        .unwrap()
        .centred();
    let n = x.n() as f64;
    let cov = x.values().transpose() * x.values() / n;
    let eig = cov.clone().symmetric_eigen();
    let mut evals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    evals.sort_by(|a, b| b.total_cmp(a));
    let s = svd_thin(&x, 4).unwrap();
    for (sv, ev) in s.s.iter().zip(&evals) {
        assert!((sv * sv / n - ev).abs() <= 1e-8 * ev);
    }
    let b = pca_fit_svd(&x, 2).unwrap();
    let proj_svd = &b.w * b.w.transpose();
    let mut idx: Vec<usize> = (0..4).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvectors.select_columns(idx[..2].iter());
    let proj_eig = &top * top.transpose();
    assert!((proj_svd - proj_eig).norm() <= 1e-8);
}

#[test]
fn constant_column_sorts_last_with_zero_sigma() {
    let mut x = gaussian_matrix(50, 3, &mut rng(2));
    x.column_mut(1).fill(4.0);
    let b = pca_fit_svd(&DataMatrix::new(x).unwrap(), 3).unwrap();
    assert!(b.sigma[2] < 1e-12);
    assert!(b.w[(1, 2)].abs() > 1.0 - 1e-12);
}

#[test]
fn equal_singular_values_leave_rotational_indeterminacy() {
    let q = random_semi_orthogonal(5, 5, 9).unwrap();
    let s = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 2.0, 1.0, 0.5, 0.2]));
    let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
    let mut r = Mat::identity(5, 5);
    r[(0, 0)] = c;
    r[(0, 1)] = -sn;
    r[(1, 0)] = sn;
    r[(1, 1)] = c;
    assert!((&s * &r - &r * &s).norm() <= 1e-12);
    let x = gaussian_matrix(30, 5, &mut rng(4)) * &s * q.transpose();
    let v = q.columns(0, 2).into_owned();
    let vr = &q * &r;
    let vr = vr.columns(0, 2).into_owned();
    let recon = |w: &Mat| &x * w * w.transpose();
    assert!((recon(&v) - recon(&vr)).norm() <= 1e-10);
}

#[test]
fn iterative_orthogonalisation_converges_on_16x8() {
    let w = gaussian_matrix(16, 8, &mut rng(3));
    let r = orthogonalize(&w, OrthMethod::Iterative { beta: 0.5, max_iter: 30, tol: 1e-10 }).unwrap();
    assert!(r.converged && r.residual <= 1e-10);
    let q = random_semi_orthogonal(6, 3, 1).unwrap();
    let same = orthogonalize(&q, OrthMethod::Iterative { beta: 0.5, max_iter: 50, tol: 1e-10 }).unwrap();
    assert!((same.w - q).norm() <= 1e-14);
}

#[test]
fn eigen_map_is_monotone_toward_one() {
    assert_eq!(eigen_map(1.0, 0.5), 1.0);
    let h = 1e-6;
    assert!(((eigen_map(1.0 + h, 0.5) - eigen_map(1.0 - h, 0.5)) / (2.0 * h)).abs() < 1e-8);
    for i in 1..=1000 {
        let l = i as f64 / 1000.0;
        let f = eigen_map(l, 0.5);
        assert!(f >= l && f <= 1.0 + 1e-15, "λ={l}: {f}");
    }
}

#[test]
fn symmetric_regulariser_example() {
    let w = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
    let g = orth_reg_grad(&w, OrthRegMode::Symmetric { alpha: 0.125 }).unwrap();
    let expected = &w * (w.transpose() * &w - Mat::identity(2, 2)) * 0.5;
    assert!((&g - &expected).norm() <= 1e-14);
    let f = |m: &Mat| (Mat::identity(2, 2) - m.transpose() * m).norm_squared() / 8.0;
    for i in 0..4 {
        let mut p = w.clone();
        p[i] += 1e-6;
        let up = f(&p);
        p[i] -= 2e-6;
        let numeric = (up - f(&p)) / 2e-6;
        assert!((numeric - g[i]).abs() <= 1e-6 * g.amax().max(1.0));
    }
}

#[test]
fn regularisers_vanish_on_orthonormal_weights() {
    let w = random_semi_orthogonal(6, 3, 4).unwrap();
    let x = gaussian_matrix(10, 6, &mut rng(1));
    let s = Vector::from_element(3, 2.0);
    for mode in [
        OrthRegMode::Symmetric { alpha: 1.0 },
        OrthRegMode::Asymmetric { beta: 1.0 },
        OrthRegMode::AsymmetricSigma { beta: 1.0, sigma_hat: &s },
        OrthRegMode::EncoderImplicit { x: &x },
    ] {
        assert!(orth_reg_grad(&w, mode).unwrap().amax() <= 1e-12, "{mode:?}");
    }
}

#[test]
fn unit_projection_guards() {
    let w = Mat::from_column_slice(3, 1, &[3.0, 4.0, 0.0]);
    assert_eq!(project_unit_columns(&w).unwrap(), Mat::from_column_slice(3, 1, &[0.6, 0.8, 0.0]));
    assert!(project_unit_columns(&Mat::from_column_slice(2, 1, &[1e-30, 0.0])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_round_trip(x in matrix(7, 4)) {
        let s = svd_thin(&DataMatrix::new(x.clone()).unwrap(), 4).unwrap();
        let back = &s.u * Mat::from_diagonal(&s.s) * s.v.transpose();
        prop_assert!((back - &x).norm() <= 1e-8 * x.norm().max(1e-300));
    }

    #[test]
    fn unit_projection_is_idempotent(x in matrix(5, 3)) {
        prop_assume!(x.column_iter().all(|c| c.norm() > 1e-6));
        let once = project_unit_columns(&x).unwrap();
        let twice = project_unit_columns(&once).unwrap();
        prop_assert!((once - twice).amax() <= 1e-15);
    }

    #[test]
    fn weight_norm_gradient_is_tangent(v in matrix(4, 3), g in matrix(4, 3)) {
        prop_assume!(v.column_iter().all(|c| c.norm() > 1e-3));
        let (w, back) = weight_norm_map(&v).unwrap();
        let gv = back.apply(&g);
        for j in 0..3 {
            prop_assert!(gv.column(j).dot(&w.column(j)).abs() <= 1e-12 * g.norm().max(1.0) / v.column(j).norm().min(1.0));
        }
    }

    #[test]
    fn orthogonalize_keeps_span(seed in 0u64..1000) {
        let w = gaussian_matrix(8, 4, &mut rng(seed));
        let r = orthogonalize(&w, OrthMethod::Iterative { beta: 0.5, max_iter: 200, tol: 1e-11 }).unwrap();
        prop_assert!(orth_residual(&r.w) <= 1e-10);
        let q = orthogonalize(&w, OrthMethod::GramSchmidt).unwrap().w;
        let proj = |m: &Mat| m * m.transpose();
        prop_assert!((proj(&r.w) - proj(&q)).norm() <= 1e-8);
    }
}
