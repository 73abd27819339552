//! Ready-made experiment setups with ground truth: mixed time signals,
//! rotated 2-D point clouds and patch filter learning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSpec, Orthogonality, UnitNorm};
use crate::datagen::{
    extract_patches, gen_mixing, gen_points_2d, gen_signals, procedural_bars, BAR_TILE, GroundTruthMixing, MixingKind, PointDist,
    SignalKind, SignalSpec,
};
use crate::error::{invalid, Result};
use crate::ica::{two_stage_ica, FastIcaConfig, RotationMethod, TwoLayerModel};
use crate::linalg::{col_norms, pca_fit_svd, semi_orthogonal_from_rng, sub_row, DataMatrix, Mat, Vector};
use crate::metrics::{amari, angle_error_deg, match_auto, var_error, MatchReport};
use crate::linear_pca::LinearVariant;
use crate::sigma_pca::{DecoderMode, NonlinearitySpec, Objective, SigmaMode, SigmaPcaModel};
use crate::optim::OptimizerConfig;
use crate::train::{train, train_phases, CheckpointPolicy, EpochRecord, LinearMethod, LinearModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSetup {
    /// Orthogonal mixing; square and sawtooth share a variance.
    OrthogonalEqual,
    /// Orthogonal mixing, three distinct variances.
    OrthogonalDistinct,
    /// Non-orthogonal mixing, three distinct variances.
    NonOrthogonal,
}

pub const SIGNAL_SAMPLES: usize = 2000;
/// Fixed non-orthogonal mixing of the classic signal-separation demo, in
/// column-vector form (observations = A·s); condition number about 16.6.
pub const DEMO_MIXING: [f64; 9] = [1.0, 1.0, 1.0, 0.5, 2.0, 1.0, 1.5, 1.0, 2.0];

impl SignalSetup {
    pub fn specs(self) -> [SignalSpec; 3] {
        self.specs_with_noise(0.05)
    }

    /// Specs with noise std equal to `noise` times each target std.
    pub fn specs_with_noise(self, noise: f64) -> [SignalSpec; 3] {
        let stds = match self {
            SignalSetup::OrthogonalEqual => [2.0, 1.0, 1.0],
            SignalSetup::OrthogonalDistinct | SignalSetup::NonOrthogonal => [3.0, 2.0, 1.0],
        };
        let spec = |kind, period, std: f64| SignalSpec { kind, period, target_std: std, noise_std: noise * std };
        [spec(SignalKind::Sine, 785.0, stds[0]), spec(SignalKind::Square, 524.0, stds[1]), spec(SignalKind::Sawtooth, 250.0, stds[2])]
    }

    /// Orthogonal setups draw a random mixing per seed; the non-orthogonal one
    /// uses [`DEMO_MIXING`] so linear PCA reliably fails on it.
    pub fn mixing(self, seed: u64) -> Result<GroundTruthMixing> {
        match self {
            SignalSetup::NonOrthogonal => {
                let a = Mat::from_row_slice(3, 3, &DEMO_MIXING);
                GroundTruthMixing::from_mixing(a.transpose(), MixingKind::NonOrthogonal { cond_max: 20.0 })
            }
            _ => gen_mixing(3, 3, MixingKind::Orthogonal, seed.wrapping_add(1_000_003)),
        }
    }
}

/// Sources and mixed observations for a setup.
pub fn signal_problem(setup: SignalSetup, n: usize, seed: u64) -> Result<(DataMatrix, GroundTruthMixing)> {
    signal_problem_noisy(setup, n, 0.05, seed)
}

/// [`signal_problem`] with a relative noise level.
pub fn signal_problem_noisy(setup: SignalSetup, n: usize, noise: f64, seed: u64) -> Result<(DataMatrix, GroundTruthMixing)> {
    if !(noise >= 0.0) {
        return invalid("noise level must be non-negative");
    }
    let s0 = gen_signals(n, &setup.specs_with_noise(noise), seed)?;
    let gt = setup.mixing(seed)?.with_sources(s0);
    Ok((gt.observations()?, gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SignalMethod {
    LinearPca,
    SigmaPca { a: f64 },
    FastIca,
    TwoStageNlpca { a: f64 },
    TwoLayer { a: f64, v_a: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    /// Recovered components, n×k.
    pub recovered: Mat,
    /// Overall unmixing, p×k.
    pub unmixing: Mat,
    /// Component scale estimates (σ for PCA methods, 1/‖b_i‖ for ICA).
    pub sigma_est: Vector,
    pub report: MatchReport,
    pub var_error: f64,
    pub amari: f64,
    pub history: Vec<EpochRecord>,
}

fn finish(x: &DataMatrix, gt: &GroundTruthMixing, unmixing: Mat, sigma_est: Vector, history: Vec<EpochRecord>) -> Result<MethodOutcome> {
    let recovered = sub_row(x.values(), &x.column_means()) * &unmixing;
    let report = match_auto(&recovered, &gt.s0)?;
    let sd0 = Vector::from_iterator(
        gt.s0.ncols(),
        gt.s0.column_iter().map(|c| (c.map(|v| v - c.mean()).norm_squared() / c.len() as f64).sqrt()),
    );
    let var_err = var_error(&sigma_est, &sd0, &report.perm)?;
    let amari = amari(&unmixing, &gt.b0_inv)?;
    Ok(MethodOutcome { recovered, unmixing, sigma_est, report, var_error: var_err, amari, history })
}

/// σ-PCA model with batch statistics on centred data, random orthonormal start.
pub fn sigma_pca_model(p: usize, k: usize, a: f64, seed: u64) -> SigmaPcaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    SigmaPcaModel::new(semi_orthogonal_from_rng(p, k, &mut rng), NonlinearitySpec::scaled_tanh(a))
}

pub fn run_signal_method(x: &DataMatrix, gt: &GroundTruthMixing, method: &SignalMethod, epochs: usize, seed: u64) -> Result<MethodOutcome> {
    run_signal_method_with(x, gt, method, &TrainConfig::signals(epochs, seed))
}

/// [`run_signal_method`] under an explicit training configuration; its seed
/// also seeds the initial weights and FastICA.
pub fn run_signal_method_with(x: &DataMatrix, gt: &GroundTruthMixing, method: &SignalMethod, config: &TrainConfig) -> Result<MethodOutcome> {
    let seed = config.seed;
    let k = gt.s0.ncols();
    let xc = x.centred();
    match *method {
        SignalMethod::LinearPca => {
            let basis = pca_fit_svd(x, k)?;
            finish(x, gt, basis.w, basis.sigma, Vec::new())
        }
        SignalMethod::SigmaPca { a } => {
            let out = train(sigma_pca_model(x.p(), k, a, seed), &xc, config)?;
            let sigma = out.model.estimate_sigma(&xc);
            finish(x, gt, out.model.w, sigma, out.history)
        }
        SignalMethod::FastIca => {
            let cfg = FastIcaConfig { seed, ..FastIcaConfig::default() };
            let r = two_stage_ica(x, k, &RotationMethod::FastIca { config: cfg })?;
            finish(x, gt, r.b.clone(), inverse_norms(&r.b), Vec::new())
        }
        SignalMethod::TwoStageNlpca { a } => {
            let mut cfg = *config;
            cfg.constraints = ConstraintSpec { unit_norm: UnitNorm::None, orthogonality: Orthogonality::iterative_default() };
            let method = RotationMethod::ConventionalNlpca { nonlinearity: NonlinearitySpec::scaled_tanh(a), train: cfg };
            let r = two_stage_ica(x, k, &method)?;
            finish(x, gt, r.b.clone(), inverse_norms(&r.b), Vec::new())
        }
        SignalMethod::TwoLayer { a, v_a } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
            let v = semi_orthogonal_from_rng(k, k, &mut rng);
            let model = TwoLayerModel::new(sigma_pca_model(x.p(), k, a, seed), v, NonlinearitySpec::scaled_tanh(v_a))?;
            let out = train(model, &xc, config)?;
            let r = out.model.result(&xc)?;
            finish(x, gt, r.b.clone(), inverse_norms(&r.b), out.history)
        }
    }
}

/// σ_est,i = 1/‖b_i‖ in column order.
fn inverse_norms(b: &Mat) -> Vector {
    col_norms(b).map(|n| 1.0 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsOutcome {
    pub w: Mat,
    pub angle_error_deg: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains σ-PCA (or linear PCA when `a` is None) on rotated 2-D points.
pub fn run_points_2d(dist: PointDist, theta: f64, a: Option<f64>, n: usize, epochs: usize, seed: u64) -> Result<PointsOutcome> {
    let mut cfg = TrainConfig::signals(epochs, seed);
    cfg.checkpoint = CheckpointPolicy::Last;
    let (x, _) = gen_points_2d(dist, n, theta, true, seed)?;
    run_points_2d_on(&x, theta, a, &cfg)
}

/// Fits 2-D filters to `x` (σ-PCA under `config`, or linear PCA when `a` is
/// None) and measures them against the rotation θ.
pub fn run_points_2d_on(x: &DataMatrix, theta: f64, a: Option<f64>, config: &TrainConfig) -> Result<PointsOutcome> {
    let (w, history) = match a {
        None => (pca_fit_svd(x, 2)?.w, Vec::new()),
        Some(a) => {
            let out = train(sigma_pca_model(2, 2, a, config.seed), &x.centred(), config)?;
            (out.model.w, out.history)
        }
    };
    Ok(PointsOutcome { angle_error_deg: angle_error_deg(&w, theta)?, w, history })
}

/// Sample count of the 2-D experiments. Smaller samples let sampling error
/// alone move the optimum by a few degrees.
pub const POINTS_SAMPLES: usize = 4000;

/// 32×32 procedural bar images cut into their aligned 8×8 tiles (sixteen
/// patches per image), features centred.
pub fn patch_corpus(images: usize, seed: u64) -> Result<DataMatrix> {
    let imgs = procedural_bars(images, 32, 32, seed)?;
    Ok(extract_patches(&imgs, BAR_TILE, BAR_TILE, false)?.centred())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchMethod {
    /// σ-PCA with the given decoder gradient and objective.
    SigmaPca { a: f64, decoder: DecoderMode, objective: Objective },
    /// Tied linear autoencoder (symmetric loss, rotation left free).
    LinearTied,
    Svd,
}

impl PatchMethod {
    pub fn stopgrad(a: f64) -> Self {
        PatchMethod::SigmaPca { a, decoder: DecoderMode::Stopgrad, objective: Objective::SigmaPca }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    /// Filters sorted by descending σ.
    pub w: Mat,
    pub sigma: Vector,
    pub history: Vec<EpochRecord>,
}

/// Patch schedule: `epochs` of minibatch Adam at the patch defaults, then
/// `refine` full-batch momentum-SGD steps that remove the minibatch jitter
/// (about 5e-2 in orthogonality residual at these settings).
pub fn patch_phases(epochs: usize, refine: usize, n: usize, seed: u64) -> Vec<TrainConfig> {
    let main = TrainConfig::patches(epochs, seed);
    let fine = TrainConfig {
        optimizer: OptimizerConfig::sgd(0.05, 0.9),
        batch_size: n.max(1),
        epochs: refine,
        seed: seed.wrapping_add(1),
        ..main
    };
    vec![main, fine]
}

/// Learns `k` filters through the given phases; the first phase's seed also
/// seeds the initial weights.
pub fn run_patch_filters(x: &DataMatrix, method: &PatchMethod, k: usize, phases: &[TrainConfig]) -> Result<PatchOutcome> {
    let seed = phases.first().map_or(0, |c| c.seed);
    let sigma_of = |w: &Mat| {
        let y = x.values() * w;
        Vector::from_iterator(k, y.column_iter().map(|c| (c.norm_squared() / c.len() as f64).sqrt()))
    };
    let (w, history) = match method {
        PatchMethod::Svd => (pca_fit_svd(x, k)?.w, Vec::new()),
        PatchMethod::LinearTied => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let model = LinearModel {
                w: semi_orthogonal_from_rng(x.p(), k, &mut rng),
                method: LinearMethod::Plain { variant: LinearVariant::TiedFull },
            };
            let (m, history) = train_phases(model, x, phases)?;
            (m.w, history)
        }
        PatchMethod::SigmaPca { a, decoder, objective } => {
            let mut model = sigma_pca_model(x.p(), k, *a, seed);
            model.decoder_mode = *decoder;
            model.objective = *objective;
            let (m, history) = train_phases(model, x, phases)?;
            (m.w, history)
        }
    };
    let sigma = sigma_of(&w);
    let order = crate::sigma_pca::descending_order(&sigma);
    let w = w.select_columns(order.iter());
    let sigma = Vector::from_iterator(k, order.iter().map(|&i| sigma[i]));
    Ok(PatchOutcome { w, sigma, history })
}

/// Best one-to-one |cos| between the columns of `a` and `b` (greedy above six).
pub fn matched_abs_cos(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    let na = col_norms(a);
    let nb = col_norms(b);
    let c = Mat::from_fn(a.ncols(), b.ncols(), |i, j| (a.column(i).dot(&b.column(j)) / (na[i] * nb[j])).abs());
    Ok(crate::metrics::assign_max(&c)?.into_iter().enumerate().map(|(i, j)| c[(i, j)]).collect())
}

/// Standard deviations of the 6-D Gaussian used to check the linear rules.
pub const LINEAR_STDS: [f64; 6] = [4.0, 3.0, 2.0, 1.5, 1.0, 0.5];
pub const LINEAR_SAMPLES: usize = 5000;

/// Gaussian samples with [`LINEAR_STDS`] along the axes of a random rotation,
/// centred so batch and population moments agree on the full batch.
pub fn linear_problem(n: usize, seed: u64) -> Result<DataMatrix> {
    let p = LINEAR_STDS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = semi_orthogonal_from_rng(p, p, &mut rng);
    let z = crate::linalg::gaussian_matrix(n, p, &mut rng);
    let scaled = Mat::from_fn(n, p, |i, j| z[(i, j)] * LINEAR_STDS[j]);
    Ok(DataMatrix::new(scaled * r.transpose())?.centred())
}

/// Default budget of the linear rules on [`linear_problem`]: `epochs` of
/// minibatch momentum SGD, then `refine` full-batch steps. No norm constraint,
/// since each rule fixes its own column norms.
pub fn linear_phases(epochs: usize, refine: usize, n: usize, seed: u64) -> Vec<TrainConfig> {
    let main = TrainConfig {
        optimizer: OptimizerConfig::sgd(1e-3, 0.9),
        batch_size: 100,
        epochs,
        seed,
        constraints: ConstraintSpec::none(),
        checkpoint: CheckpointPolicy::Last,
    };
    let fine = TrainConfig { optimizer: OptimizerConfig::sgd(5e-3, 0.9), batch_size: n.max(1), epochs: refine, seed: seed.wrapping_add(1), ..main };
    vec![main, fine]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOutcome {
    pub w: Mat,
    /// |cos| between column i and the i-th SVD axis.
    pub abs_cos: Vec<f64>,
    /// ‖P − P*‖_F between the orthogonal projectors onto span(W) and the top-k SVD span.
    pub projector_distance: f64,
    pub col_norms: Vector,
    pub history: Vec<EpochRecord>,
}

/// Trains a linear rule with `k` columns from a random orthonormal start.
pub fn run_linear(x: &DataMatrix, method: LinearMethod, k: usize, phases: &[TrainConfig]) -> Result<LinearOutcome> {
    let seed = phases.first().map_or(0, |c| c.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11ea);
    let model = LinearModel { w: semi_orthogonal_from_rng(x.p(), k, &mut rng), method };
    let (model, history) = train_phases(model, x, phases)?;
    let w = model.w;
    let truth = pca_fit_svd(x, k)?.w;
    let norms = col_norms(&w);
    let abs_cos = (0..k).map(|i| w.column(i).dot(&truth.column(i)).abs() / norms[i]).collect();
    let projector = |m: &Mat| -> Result<Mat> {
        let q = crate::constraints::orthogonalize(m, crate::constraints::OrthMethod::GramSchmidt)?.w;
        Ok(&q * q.transpose())
    };
    let projector_distance = (projector(&w)? - &truth * truth.transpose()).norm();
    Ok(LinearOutcome { w, abs_cos, projector_distance, col_norms: norms, history })
}

/// Data scale of the trainable-σ runs. Adam moves σ by about lr per step
/// whatever the gradient size, so the data scale sets how many steps
/// degeneration needs.
pub const TRAINABLE_SIGMA_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableSigmaOutcome {
    pub sigma: Vector,
    /// Standard deviation of each component under the final filters.
    pub sigma_hat: Vector,
    /// Mean of σ / σ̂ after every chunk of epochs.
    pub mean_ratio_trace: Vec<f64>,
}

impl TrainableSigmaOutcome {
    pub fn ratios(&self) -> Vector {
        self.sigma.component_div(&self.sigma_hat)
    }
}

/// σ-PCA with trainable σ (started at the estimate) on `x`, trained for
/// `chunks` × `chunk_epochs` epochs of Adam at `lr` under the patch defaults.
/// Optimizer moments restart at every chunk boundary.
#[allow(clippy::too_many_arguments)]
pub fn run_trainable_sigma(
    x: &DataMatrix,
    k: usize,
    a: f64,
    l2: f64,
    lr: f64,
    chunks: usize,
    chunk_epochs: usize,
    seed: u64,
) -> Result<TrainableSigmaOutcome> {
    let mut model = sigma_pca_model(x.p(), k, a, seed);
    model.sigma_mode = SigmaMode::Trainable { values: model.estimate_sigma(x), l2 };
    let mut trace = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let mut cfg = TrainConfig::patches(chunk_epochs, seed.wrapping_add(c as u64));
        cfg.optimizer = OptimizerConfig::adam(lr);
        model = train(model, x, &cfg)?.model;
        if let SigmaMode::Trainable { values, .. } = &model.sigma_mode {
            trace.push(values.component_div(&model.estimate_sigma(x)).mean());
        }
    }
    let sigma_hat = model.estimate_sigma(x);
    let SigmaMode::Trainable { values, .. } = model.sigma_mode else {
        unreachable!("σ mode stays trainable during training")
    };
    Ok(TrainableSigmaOutcome { sigma: values, sigma_hat, mean_ratio_trace: trace })
}
