use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigma_pca::constraints::{ConstraintSpec, Orthogonality, UnitNorm};
use sigma_pca::datagen::{sample_unit_variance, PointDist};
use sigma_pca::experiments::{linear_phases, patch_corpus, run_linear, run_trainable_sigma, sigma_pca_model, TRAINABLE_SIGMA_SCALE};
use sigma_pca::linalg::{gaussian_matrix, random_semi_orthogonal};
use sigma_pca::linear_pca::{linear_pca_grad, sample_nested_cut, GhaVariant, LinearVariant, VarianceMode, WeightedVariant, WeightingSpec};
use sigma_pca::optim::OptimizerConfig;
use sigma_pca::sigma_pca::{
    descending_order, noncentred_grad, sigma_pca_grad, skew_symmetric_grad, sort_components, DecoderMode, MuMode, NonCentredVariant,
    NonlinearitySpec, Ordering, SigmaPcaModel, SkewBeta, SkewForm,
};
use sigma_pca::train::{train, AltObjective, AltSigmaModel, CheckpointPolicy, LinearMethod, TrainConfig};
use sigma_pca::{DataMatrix, Mat, Vector};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Axis-aligned Gaussian data with the given standard deviations, centred.
fn axis_data(n: usize, stds: &[f64], seed: u64) -> DataMatrix {
    let z = gaussian_matrix(n, stds.len(), &mut rng(seed));
    DataMatrix::new(Mat::from_fn(n, stds.len(), |i, j| z[(i, j)] * stds[j])).unwrap().centred()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Mat::from_row_slice(rows, cols, &v))
}

#[test]
fn gha_finds_axes_in_order() {
    let x = axis_data(2000, &[3.0, 2.0, 1.0], 1);
    let o = run_linear(&x, LinearMethod::Gha { variant: GhaVariant::Plain }, 3, &linear_phases(100, 0, x.n(), 4)).unwrap();
    for i in 0..3 {
        assert!(o.w[(i, i)].abs() / o.col_norms[i] >= 0.99, "{}", o.w);
    }
}

#[test]
fn nested_sampler_matches_truncated_geometric() {
    let mut r = rng(5);
    let draws = 100_000;
    let ones = (0..draws).filter(|_| sample_nested_cut(64, 0.9, &mut r) == 1).count();
    assert!((ones as f64 / draws as f64 - 0.1).abs() <= 0.01);
}

#[test]
fn weighted_subspace_stationary_norms() {
    let x = axis_data(4000, &[2.0, 1.0], 2);
    let ws = WeightingSpec::custom(Vector::from_vec(vec![1.0, 0.5])).unwrap();
    let phases = linear_phases(60, 300, x.n(), 3);
    let v1 = run_linear(&x, LinearMethod::WeightedSubspace { variant: WeightedVariant::V1, weights: ws.clone() }, 2, &phases).unwrap();
    let v3 = run_linear(&x, LinearMethod::WeightedSubspace { variant: WeightedVariant::V3, weights: ws.clone() }, 2, &phases).unwrap();
    for (i, l) in ws.lambdas().iter().enumerate() {
        assert!((v1.col_norms[i] / l.sqrt() - 1.0).abs() <= 0.02, "{:?}", v1.col_norms);
        assert!((v3.col_norms[i] - 1.0).abs() <= 1e-3, "{:?}", v3.col_norms);
    }
}

#[test]
fn weighted_variance_minimising_norms() {
    let x = axis_data(4000, &[2.0, 1.0, 0.5], 6);
    let lambdas = Vector::from_vec(vec![0.5, 0.25]);
    let m = LinearMethod::WeightedVariance { lambdas: lambdas.clone(), alpha: -1.0, mode: VarianceMode::Fixed };
    let o = run_linear(&x, m, 2, &linear_phases(60, 300, x.n(), 1)).unwrap();
    for i in 0..2 {
        let want = 1.0 - lambdas[i] / 2.0;
        assert!((o.col_norms[i].powi(2) / want - 1.0).abs() <= 0.02, "{:?}", o.col_norms);
    }
}

#[test]
fn sorting_contract() {
    assert_eq!(descending_order(&Vector::from_vec(vec![1.0, 3.0, 2.0])), vec![1, 2, 0]);
    assert_eq!(descending_order(&Vector::from_vec(vec![3.0, 2.0, 1.0])), vec![0, 1, 2]);
    assert_eq!(descending_order(&Vector::from_vec(vec![2.0, 2.0, 1.0])), vec![0, 1, 2]);
    let model = SigmaPcaModel::new(random_semi_orthogonal(4, 3, 0).unwrap(), NonlinearitySpec::scaled_tanh(4.0));
    let (sorted, perm) = sort_components(&model, &Vector::from_vec(vec![1.0, 3.0, 2.0])).unwrap();
    assert_eq!(perm, vec![1, 2, 0]);
    assert_eq!(sorted.w.column(0), model.w.column(1));
}

#[test]
fn skew_term_vanishes_for_identity_nonlinearity() {
    let x = gaussian_matrix(12, 5, &mut rng(3));
    let w = random_semi_orthogonal(5, 3, 3).unwrap() * 1.1;
    let base = linear_pca_grad(&x, &w, LinearVariant::Subspace).unwrap().grad_w;
    for form in [SkewForm::Skew, SkewForm::Dediag] {
        let g = skew_symmetric_grad(&x, &w, &NonlinearitySpec::linear(), SkewBeta::Const { beta: 0.7 }, form).unwrap().grad_w;
        match form {
            SkewForm::Skew => assert!((g - &base).amax() <= 1e-12),
            // yᵀy is symmetric but its off-diagonal part is not zero.
            SkewForm::Dediag => assert!((g - &base).amax() > 1e-6),
        }
    }
}

#[test]
fn noncentred_variants_reduce_on_centred_data() {
    let x = DataMatrix::new(gaussian_matrix(20, 5, &mut rng(8))).unwrap().centred();
    let mut model = SigmaPcaModel::new(random_semi_orthogonal(5, 3, 8).unwrap() * 0.9, NonlinearitySpec::scaled_tanh(2.0));
    let centred = sigma_pca_grad(&model, x.values(), None).unwrap().grad_w;
    model.mu_mode = MuMode::Batch;
    for v in [NonCentredVariant::Wrap, NonCentredVariant::Bound] {
        let g = noncentred_grad(&model, x.values(), v).unwrap().grad_w;
        assert!((g - &centred).amax() <= 1e-10, "{v:?}");
    }
}

#[test]
fn wrap_variant_is_shift_invariant() {
    let x = axis_data(3000, &[3.0, 1.5, 0.7], 9);
    let shifted = DataMatrix::new(Mat::from_fn(x.n(), 3, |i, j| x.values()[(i, j)] + [5.0, -2.0, 1.0][j])).unwrap();
    let mut cfg = TrainConfig::signals(200, 2);
    cfg.checkpoint = CheckpointPolicy::Last;
    let run = |data: &DataMatrix, mu_mode: MuMode, objective: AltObjective| {
        let mut model = sigma_pca_model(3, 2, 4.0, 2);
        model.mu_mode = mu_mode;
        train(AltSigmaModel { model, objective }, data, &cfg).unwrap().model.model.w
    };
    let wrap = AltObjective::NonCentred { variant: NonCentredVariant::Wrap };
    let centred = run(&x, MuMode::Batch, wrap.clone());
    let offset = run(&shifted, MuMode::Batch, wrap);
    for j in 0..2 {
        let c = centred.column(j).dot(&offset.column(j)).abs() / (centred.column(j).norm() * offset.column(j).norm());
        assert!(c >= 0.99, "column {j}: {c}");
    }
}

#[test]
fn projective_deflation_orders_components() {
    // Distinct-variance uniform sources under a random rotation.
    let mut ordered = 0;
    for seed in 0..5u64 {
        let mut r = rng(seed);
        let s = Mat::from_fn(3000, 3, |_, j| [3.0, 2.0, 1.0][j] * sample_unit_variance(PointDist::Uniform, &mut r));
        let q = random_semi_orthogonal(3, 3, seed + 50).unwrap();
        let x = DataMatrix::new(s * q.transpose()).unwrap().centred();
        let mut model = sigma_pca_model(3, 3, 0.8, seed);
        model.ordering = Ordering::ProjectiveDeflation;
        let out = train(model, &x, &TrainConfig::signals(200, seed)).unwrap().model;
        let sigma = out.estimate_sigma(&x);
        ordered += usize::from(sigma[0] > sigma[1] && sigma[1] > sigma[2]);
    }
    assert!(ordered >= 4, "{ordered}/5");
}

#[test]
fn sigma_pca_radial_stationary_identity() {
    // One free-norm component on 2-D Laplace data. With batch σ the radial
    // gradient vanishes when ‖w‖²·σ·E[y h(z) h'(z)] = E[y² h'(z)].
    let mut r = rng(3);
    let s = Mat::from_fn(4000, 2, |_, j| [2.0, 1.0][j] * sample_unit_variance(PointDist::Laplace, &mut r));
    let x = DataMatrix::new(s * random_semi_orthogonal(2, 2, 4).unwrap()).unwrap().centred();
    let mut cfg = TrainConfig::signals(100, 1);
    cfg.checkpoint = CheckpointPolicy::Last;
    cfg.constraints = ConstraintSpec { unit_norm: UnitNorm::None, orthogonality: Orthogonality::None };
    let model = train(sigma_pca_model(2, 1, 4.0, 1), &x, &cfg).unwrap().model;
    let sigma = model.estimate_sigma(&x)[0];
    let y = x.values() * &model.w;
    let h = NonlinearitySpec::scaled_tanh(4.0);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for v in y.iter() {
        let (hz, dh) = h.eval_scalar(v / sigma);
        lhs += v * hz * dh;
        rhs += v * v * dh;
    }
    lhs *= model.w.norm_squared() * sigma;
    assert!((lhs / rhs - 1.0).abs() <= 0.02, "{lhs} vs {rhs}");
}

#[test]
fn decoder_carries_the_gradient_at_orthonormal_weights() {
    let x = gaussian_matrix(40, 6, &mut rng(2));
    let mut model = SigmaPcaModel::new(random_semi_orthogonal(6, 2, 5).unwrap(), NonlinearitySpec::linear());
    let enc = sigma_pca_grad(&model, &x, None).unwrap().grad_w;
    model.decoder_mode = DecoderMode::Full;
    let full = sigma_pca_grad(&model, &x, None).unwrap().grad_w;
    assert!(enc.amax() <= 1e-12);
    assert!(full.norm() > 1e-3);
}

#[test]
fn trainable_sigma_grows_without_penalty() {
    let x = patch_corpus(60, 1).unwrap().scaled(TRAINABLE_SIGMA_SCALE).unwrap();
    let o = run_trainable_sigma(&x, 8, 4.0, 0.0, 1e-2, 3, 60, 1).unwrap();
    assert!(o.mean_ratio_trace.windows(2).all(|p| p[1] > p[0]), "{:?}", o.mean_ratio_trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tied_loss_invariant_under_rotation(seed in 0u64..10_000, x in matrix(9, 5)) {
        let w = random_semi_orthogonal(5, 3, seed).unwrap();
        let r = random_semi_orthogonal(3, 3, seed + 1).unwrap();
        let a = linear_pca_grad(&x, &w, LinearVariant::TiedFull).unwrap().loss;
        let b = linear_pca_grad(&x, &(&w * r), LinearVariant::TiedFull).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn linear_sigma_pca_is_tied_linear_pca(x in matrix(9, 5), w in matrix(5, 3)) {
        prop_assume!(w.column_iter().all(|c| c.norm() > 0.1));
        let y = &x * &w;
        prop_assume!(y.column_iter().all(|c| c.variance() > 1e-3));
        let model = SigmaPcaModel::new(w.clone(), NonlinearitySpec::linear());
        let a = sigma_pca_grad(&model, &x, None).unwrap().loss;
        let b = linear_pca_grad(&x, &w, LinearVariant::TiedFull).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn identity_weighting_is_subspace(x in matrix(8, 5), w in matrix(5, 3)) {
        let ws = WeightingSpec::identity(3);
        let base = linear_pca_grad(&x, &w, LinearVariant::Subspace).unwrap().grad_w;
        for v in [WeightedVariant::V1, WeightedVariant::V2, WeightedVariant::V3] {
            let g = sigma_pca::linear_pca::weighted_subspace_grad(&x, &w, &ws, v).unwrap().grad_w;
            prop_assert!((g - &base).amax() <= 1e-12 * base.amax().max(1.0));
        }
    }
}

#[test]
fn sgd_optimizer_config_validation() {
    assert!(OptimizerConfig::sgd(-1.0, 0.9).validate().is_err());
}
