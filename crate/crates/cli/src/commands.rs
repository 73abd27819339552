use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sigma_pca::constraints::{ConstraintSpec, Orthogonality, UnitNorm};
use sigma_pca::datagen::{bar_dictionary, extract_patches, gen_points_2d, procedural_bars, GroundTruthMixing, PointDist};
use sigma_pca::experiments::{
    matched_abs_cos, run_linear, run_patch_filters, run_points_2d_on, run_signal_method_with, sigma_pca_model, signal_problem_noisy,
    PatchMethod, SignalMethod, SignalSetup,
};
use sigma_pca::gradcheck::run_suite;
use sigma_pca::ica::{easi, two_stage_ica, whiten_pca, Contrast, EasiConfig, FastIcaConfig, RotationMethod, TwoLayerModel};
use sigma_pca::linalg::{col_norms, orth_residual, pca_fit_svd, random_semi_orthogonal, sub_row, MomentState};
use sigma_pca::linear_pca::{GhaVariant, LinearVariant, VarianceMode, WeightedVariant, WeightingSpec};
use sigma_pca::metrics::{amari, angle_error_deg, match_auto, var_error};
use sigma_pca::optim::OptimizerConfig;
use sigma_pca::sigma_pca::{descending_order, DecoderMode, MuMode, NonlinearitySpec, NormKind, Objective, Ordering, SigmaMode};
use sigma_pca::train::{train, LinearMethod, TrainConfig};
use sigma_pca::{DataMatrix, Mat, Vector};

use crate::config::*;
use crate::data::{load_csv, load_image_folder};
use crate::output::{filter_grid, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Pca,
    Nlpca,
    Ica,
    Signals,
    Points2d,
    Patches,
    Gradcheck,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Pca => "pca",
            CommandKind::Nlpca => "nlpca",
            CommandKind::Ica => "ica",
            CommandKind::Signals => "signals",
            CommandKind::Points2d => "points2d",
            CommandKind::Patches => "patches",
            CommandKind::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(Value::String(name.to_string())).map_err(|_| anyhow!("unknown command `{name}`"))
    }

    pub fn trains(self) -> bool {
        self != CommandKind::Gradcheck
    }
}

/// Run result: `passed` is false only when the command has a pass/fail check
/// (gradcheck) and it was not met.
pub struct Outcome {
    pub metrics: Value,
    pub passed: bool,
}

const SIGNAL_TRAIN: &str = r#"
seed = 0
runs = 1
[optimizer]
kind = "sgd"
lr = 0.01
momentum = 0.9
[train]
batch_size = 100
epochs = 200
checkpoint = "best-loss"
[constraints]
unit_norm = "project"
orthogonality = "none"
"#;

const SIGNALS: &str = r#"
[method]
signals = "nlpca"
a = 0.8
v_a = 0.8
[data]
mixing = "orthogonal"
n = 2000
noise = 0.05
"#;

const POINTS: &str = r#"
[train]
checkpoint = "last"
[method]
points = "nlpca"
a = 0.5
[data]
dist = "uniform"
theta = 0.7853981633974483
n = 4000
equal_var = true
"#;

const PCA: &str = r#"
seed = 0
[optimizer]
kind = "sgd"
lr = 0.001
momentum = 0.9
[train]
batch_size = 100
epochs = 60
refine_epochs = 300
checkpoint = "last"
[constraints]
unit_norm = "none"
orthogonality = "none"
[method]
variant = "svd"
k = 3
rho = 0.5
alpha = 1.0
[data]
n = 5000
"#;

const NLPCA: &str = r#"
[method]
a = 0.8
decoder = "stopgrad"
ordering = "none"
objective = "sigma-pca"
sigma_mode = "batch"
mu_mode = "precentred"
ema_alpha = 0.9
l2 = 0.001
rho = 0.1
orth_strength = 1.0
[data]
mixing = "orthogonal-distinct"
n = 2000
noise = 0.05
"#;

const ICA: &str = r#"
[method]
ica = "fastica"
a = 4.0
v_a = 0.8
contrast = "cube"
eta = 0.01
[data]
mixing = "non-orthogonal"
n = 2000
noise = 0.05
"#;

const PATCHES: &str = r#"
seed = 0
[optimizer]
kind = "adam"
lr = 0.001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
[train]
batch_size = 128
epochs = 100
refine_epochs = 100
checkpoint = "last"
[constraints]
unit_norm = "weight-norm"
orthogonality = "none"
[method]
patches = "sigma-pca"
a = 4.0
k = 16
decoder = "stopgrad"
objective = "sigma-pca"
[data]
count = 200
size = 8
stride = 8
zero_pad = false
gap = 1
"#;

const GRADCHECK: &str = r#"
seed = 20240
[method]
instances = 5
h = 1e-6
tol = 1e-5
"#;

fn layers(texts: &[&str]) -> Config {
    texts
        .iter()
        .map(|t| Config::parse_toml(t).expect("built-in defaults parse"))
        .fold(Config::default(), |acc, c| acc.layered(&c))
}

/// Built-in defaults of a command; a config file and flags layer on top.
pub fn defaults(kind: CommandKind) -> Config {
    match kind {
        CommandKind::Signals => layers(&[SIGNAL_TRAIN, SIGNALS]),
        CommandKind::Points2d => layers(&[SIGNAL_TRAIN, POINTS]),
        CommandKind::Pca => layers(&[PCA]),
        CommandKind::Nlpca => layers(&[SIGNAL_TRAIN, NLPCA]),
        CommandKind::Ica => layers(&[SIGNAL_TRAIN, ICA]),
        CommandKind::Patches => layers(&[PATCHES]),
        CommandKind::Gradcheck => layers(&[GRADCHECK]),
    }
}

pub fn execute(kind: CommandKind, cfg: &Config, dir: &mut RunDir) -> Result<Outcome> {
    match kind {
        CommandKind::Signals => fan_out(cfg, dir, signals_one),
        CommandKind::Points2d => fan_out(cfg, dir, points_one),
        CommandKind::Pca => fan_out(cfg, dir, pca_one),
        CommandKind::Nlpca => fan_out(cfg, dir, nlpca_one),
        CommandKind::Ica => fan_out(cfg, dir, ica_one),
        CommandKind::Patches => fan_out(cfg, dir, patches_one),
        CommandKind::Gradcheck => gradcheck(cfg, dir),
    }
}

/// True when the error chain carries a non-finite abort from training.
pub fn non_finite(err: &anyhow::Error) -> Option<&sigma_pca::NanDiagnostic> {
    err.chain().find_map(|e| match e.downcast_ref::<sigma_pca::Error>() {
        Some(sigma_pca::Error::NonFinite(d)) => Some(d.as_ref()),
        _ => None,
    })
}

fn guarded(cfg: &Config, dir: &mut RunDir, one: fn(&Config, &mut RunDir) -> Result<Value>) -> Result<Value> {
    match one(cfg, dir) {
        Err(e) => {
            if let Some(d) = non_finite(&e) {
                dir.write_json("nan_diagnostic.json", d)?;
            }
            Err(e)
        }
        ok => ok,
    }
}

/// One seed in place, or `runs` seeds (seed, seed+1, …) on worker threads,
/// each writing into its own `seed-<s>/` shard.
fn fan_out(cfg: &Config, dir: &mut RunDir, one: fn(&Config, &mut RunDir) -> Result<Value>) -> Result<Outcome> {
    let runs = cfg.runs.unwrap_or(1);
    if runs <= 1 {
        return Ok(Outcome { metrics: guarded(cfg, dir, one)?, passed: true });
    }
    let base = cfg.seed();
    let jobs: Vec<(Config, RunDir)> = (0..runs as u64)
        .map(|r| {
            let seed = base.wrapping_add(r);
            let mut c = cfg.clone();
            c.seed = Some(seed);
            c.runs = Some(1);
            Ok((c, dir.shard(&format!("seed-{seed}"))?))
        })
        .collect::<Result<_>>()?;
    let results: Vec<(u64, RunDir, Result<Value>)> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(c, mut shard)| {
                s.spawn(move || {
                    let r = guarded(&c, &mut shard, one);
                    (c.seed(), shard, r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut per_seed = Vec::new();
    let mut first_err = None;
    for (seed, shard, r) in results {
        dir.absorb(shard);
        match r {
            Ok(m) => per_seed.push(json!({ "seed": seed, "metrics": m })),
            Err(e) => {
                per_seed.push(json!({ "seed": seed, "error": format!("{e:#}") }));
                first_err.get_or_insert(e);
            }
        }
    }
    let summary = json!({ "runs": runs, "per_seed": per_seed });
    dir.write_json("summary.json", &summary)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(Outcome { metrics: summary, passed: true }),
    }
}

fn setup_of(m: Mixing) -> SignalSetup {
    match m {
        Mixing::Orthogonal => SignalSetup::OrthogonalEqual,
        Mixing::OrthogonalDistinct => SignalSetup::OrthogonalDistinct,
        Mixing::NonOrthogonal => SignalSetup::NonOrthogonal,
    }
}

fn need<T: Copy>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("configuration key {key} is not set"))
}

/// Data from `data.path`, or the configured signal problem with its ground truth.
fn signal_data(cfg: &Config) -> Result<(DataMatrix, Option<GroundTruthMixing>)> {
    if let Some(path) = &cfg.data.path {
        return Ok((load_csv(path)?, None));
    }
    let (x, gt) = signal_problem_noisy(
        setup_of(need(cfg.data.mixing, "data.mixing")?),
        need(cfg.data.n, "data.n")?,
        need(cfg.data.noise, "data.noise")?,
        cfg.seed(),
    )?;
    Ok((x, Some(gt)))
}

fn header(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |j| format!("{prefix}{j}"))
}

/// Standard deviations of the columns of s.
fn stds(s: &Mat) -> Vector {
    Vector::from_iterator(s.ncols(), s.column_iter().map(|c| (c.map(|v| v - c.mean()).norm_squared() / c.len() as f64).sqrt()))
}

/// Recovered components aligned to the true sources: column j holds the
/// component matched to source j, sign-corrected.
fn aligned(recovered: &Mat, perm: &[usize], signs: &[f64], k: usize) -> Mat {
    let mut out = Mat::zeros(recovered.nrows(), k);
    for (i, (&j, &s)) in perm.iter().zip(signs).enumerate() {
        out.set_column(j, &(recovered.column(i) * s));
    }
    out
}

fn write_signals(dir: &mut RunDir, s0: &Mat, x: &Mat, rec: &Mat) -> Result<()> {
    let head: Vec<String> = std::iter::once("t".to_string())
        .chain(header("true_", s0.ncols()))
        .chain(header("mixed_", x.ncols()))
        .chain(header("recovered_", rec.ncols()))
        .collect();
    let rows = (0..s0.nrows()).map(|t| {
        std::iter::once(t as f64)
            .chain(s0.row(t).iter().copied())
            .chain(x.row(t).iter().copied())
            .chain(rec.row(t).iter().copied())
            .collect()
    });
    dir.write_csv("signals.csv", &head, rows)
}

/// Recovery metrics against ground truth; also writes signals.csv.
fn recovery_metrics(dir: &mut RunDir, x: &DataMatrix, gt: &GroundTruthMixing, recovered: &Mat, unmixing: &Mat, sigma_est: &Vector) -> Result<Value> {
    let report = match_auto(recovered, &gt.s0)?;
    let k = gt.s0.ncols();
    write_signals(dir, &gt.s0, x.values(), &aligned(recovered, &report.perm, &report.signs, k))?;
    let ve = var_error(sigma_est, &stds(&gt.s0), &report.perm)?;
    let min_corr = report.min_corr();
    Ok(json!({
        "match": report,
        "min_corr": min_corr,
        "separated": min_corr >= 0.9,
        "sigma_est": sigma_est.as_slice(),
        "var_error": ve,
        "amari": amari(unmixing, &gt.b0_inv)?,
    }))
}

fn signals_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let tc = cfg.train_config()?;
    let m = &cfg.method;
    let method = match need(m.signals, "method.signals")? {
        SignalMethodKind::Linear => SignalMethod::LinearPca,
        SignalMethodKind::Nlpca => SignalMethod::SigmaPca { a: need(m.a, "method.a")? },
        SignalMethodKind::Fastica => SignalMethod::FastIca,
        SignalMethodKind::TwoStageNlpca => SignalMethod::TwoStageNlpca { a: need(m.a, "method.a")? },
        SignalMethodKind::TwoLayer => SignalMethod::TwoLayer { a: need(m.a, "method.a")?, v_a: need(m.v_a, "method.v_a")? },
    };
    let (x, gt) = match &cfg.data.path {
        Some(_) => bail!("signals runs on generated sources only; use `nlpca` or `ica` for data files"),
        None => signal_data(cfg)?,
    };
    let gt = gt.expect("generated data has ground truth");
    let out = run_signal_method_with(&x, &gt, &method, &tc)?;
    dir.write_matrix("unmixing.csv", "b", &out.unmixing)?;
    if !out.history.is_empty() {
        dir.write_history("history.csv", &out.history)?;
    }
    let per_source_var_error: Vec<f64> = out
        .report
        .perm
        .iter()
        .enumerate()
        .map(|(i, &j)| (out.sigma_est[i] / stds(&gt.s0)[j] - 1.0).abs())
        .collect();
    let mut metrics = recovery_metrics(dir, &x, &gt, &out.recovered, &out.unmixing, &out.sigma_est)?;
    metrics["var_errors"] = json!(per_source_var_error);
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn point_dist(d: Dist) -> PointDist {
    match d {
        Dist::Uniform => PointDist::Uniform,
        Dist::Laplace => PointDist::Laplace,
        Dist::Gaussian => PointDist::Gaussian,
    }
}

fn points_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let tc = cfg.train_config()?;
    let theta = need(cfg.data.theta, "data.theta")?;
    let x = match &cfg.data.path {
        Some(p) => load_csv(p)?,
        None => {
            let dist = point_dist(need(cfg.data.dist, "data.dist")?);
            gen_points_2d(dist, need(cfg.data.n, "data.n")?, theta, need(cfg.data.equal_var, "data.equal_var")?, cfg.seed())?.0
        }
    };
    if x.p() != 2 {
        bail!("points2d needs two-column data, got {}", x.p());
    }
    let (w, angle, history) = match need(cfg.method.points, "method.points")? {
        PointsMethod::Nlpca => {
            let o = run_points_2d_on(&x, theta, Some(need(cfg.method.a, "method.a")?), &tc)?;
            (o.w, o.angle_error_deg, o.history)
        }
        PointsMethod::Linear => {
            let o = run_points_2d_on(&x, theta, None, &tc)?;
            (o.w, o.angle_error_deg, o.history)
        }
        PointsMethod::Fastica => {
            let method = RotationMethod::FastIca { config: FastIcaConfig { seed: cfg.seed(), ..FastIcaConfig::default() } };
            let b = two_stage_ica(&x, 2, &method)?.normalized.b_unit;
            let angle = angle_error_deg(&b, theta)?;
            (b, angle, Vec::new())
        }
    };
    dir.write_matrix("points.csv", "x", x.values())?;
    dir.write_matrix("weights.csv", "w", &w)?;
    if !history.is_empty() {
        dir.write_history("history.csv", &history)?;
    }
    let metrics = json!({
        "angle_error_deg": angle,
        "within_3deg": angle <= 3.0,
        "orth_residual": orth_residual(&w),
    });
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn linear_method(cfg: &Config, k: usize) -> Result<Option<LinearMethod>> {
    let m = &cfg.method;
    let weighted = |variant| -> Result<LinearMethod> { Ok(LinearMethod::WeightedSubspace { variant, weights: WeightingSpec::linear_spaced(k)? }) };
    Ok(Some(match need(m.variant, "method.variant")? {
        PcaVariant::Svd => return Ok(None),
        PcaVariant::Tied => LinearMethod::Plain { variant: LinearVariant::TiedFull },
        PcaVariant::Subspace => LinearMethod::Plain { variant: LinearVariant::Subspace },
        PcaVariant::WeightedV1 => weighted(WeightedVariant::V1)?,
        PcaVariant::WeightedV2 => weighted(WeightedVariant::V2)?,
        PcaVariant::WeightedV3 => weighted(WeightedVariant::V3)?,
        PcaVariant::Asymmetric => LinearMethod::AsymmetricLoss { weights: WeightingSpec::linear_spaced(k)? },
        PcaVariant::Gha => LinearMethod::Gha { variant: GhaVariant::Plain },
        PcaVariant::GhaWithEncoder => LinearMethod::Gha { variant: GhaVariant::WithEncoder },
        PcaVariant::GhaPlusSubspace => LinearMethod::Gha { variant: GhaVariant::PlusSubspace },
        PcaVariant::GhaReconCombo => LinearMethod::Gha { variant: GhaVariant::ReconCombo },
        PcaVariant::Nested => LinearMethod::NestedDropout { rho: need(m.rho, "method.rho")? },
        PcaVariant::WeightedVariance => LinearMethod::WeightedVariance {
            lambdas: WeightingSpec::linear_spaced(k)?.lambdas().clone(),
            alpha: need(m.alpha, "method.alpha")?,
            mode: VarianceMode::Fixed,
        },
    }))
}

/// The configured phase followed by `train.refine_epochs` full-batch
/// momentum-SGD epochs at `refine_lr`.
fn with_refine(main: TrainConfig, cfg: &Config, n: usize, refine_lr: f64) -> Vec<TrainConfig> {
    let refine = cfg.train.refine_epochs.unwrap_or(0);
    let mut phases = vec![main];
    if refine > 0 {
        phases.push(TrainConfig {
            optimizer: OptimizerConfig::sgd(refine_lr, 0.9),
            batch_size: n.max(1),
            epochs: refine,
            seed: main.seed.wrapping_add(1),
            ..main
        });
    }
    phases
}

fn pca_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let x = match &cfg.data.path {
        Some(p) => load_csv(p)?.centred(),
        None => sigma_pca::experiments::linear_problem(need(cfg.data.n, "data.n")?, cfg.seed())?,
    };
    let k = cfg.method.k.unwrap_or(x.p()).min(x.p());
    let basis = pca_fit_svd(&x, k)?;
    let metrics = match linear_method(cfg, k)? {
        None => {
            dir.write_matrix("weights.csv", "w", &basis.w)?;
            let total: f64 = stds(x.values()).iter().map(|s| s * s).sum();
            json!({
                "sigma": basis.sigma.as_slice(),
                "explained_variance_ratio": basis.sigma.iter().map(|s| s * s / total).collect::<Vec<_>>(),
            })
        }
        Some(method) => {
            let phases = with_refine(cfg.train_config()?, cfg, x.n(), 5e-3);
            let out = run_linear(&x, method, k, &phases)?;
            dir.write_matrix("weights.csv", "w", &out.w)?;
            dir.write_history("history.csv", &out.history)?;
            json!({
                "abs_cos": out.abs_cos,
                "min_abs_cos": out.abs_cos.iter().cloned().fold(f64::INFINITY, f64::min),
                "projector_distance": out.projector_distance,
                "col_norms": out.col_norms.as_slice(),
                "orth_residual": orth_residual(&out.w),
                "svd_sigma": basis.sigma.as_slice(),
            })
        }
    };
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn decoder_mode(d: Decoder) -> DecoderMode {
    match d {
        Decoder::Stopgrad => DecoderMode::Stopgrad,
        Decoder::Full => DecoderMode::Full,
        Decoder::EncoderScaled => DecoderMode::EncoderScaled,
        Decoder::RescaledSpectral => DecoderMode::Rescaled { norm: NormKind::Spectral },
        Decoder::RescaledFrobenius => DecoderMode::Rescaled { norm: NormKind::Frobenius },
        Decoder::RescaledNuclear => DecoderMode::Rescaled { norm: NormKind::Nuclear },
        Decoder::SigmaDropped => DecoderMode::SigmaDropped { drop_derivative: false },
        Decoder::SigmaDroppedNoDerivative => DecoderMode::SigmaDropped { drop_derivative: true },
    }
}

fn objective(o: ObjectiveKind) -> Objective {
    match o {
        ObjectiveKind::SigmaPca => Objective::SigmaPca,
        ObjectiveKind::Conventional => Objective::Conventional,
    }
}

fn nlpca_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let tc = cfg.train_config()?;
    let m = &cfg.method;
    let (x, gt) = signal_data(cfg)?;
    let mu_mode = need(m.mu_mode, "method.mu_mode")?;
    let xt = if mu_mode == MuModeKind::Precentred { x.centred() } else { x.clone() };
    let k = m.k.unwrap_or(x.p()).min(x.p());
    let alpha = need(m.ema_alpha, "method.ema_alpha")?;
    let mut model = sigma_pca_model(x.p(), k, need(m.a, "method.a")?, cfg.seed());
    model.decoder_mode = decoder_mode(need(m.decoder, "method.decoder")?);
    model.objective = objective(need(m.objective, "method.objective")?);
    model.mu_mode = match mu_mode {
        MuModeKind::Precentred => MuMode::Precentred,
        MuModeKind::Batch => MuMode::Batch,
        MuModeKind::Ema => MuMode::Ema { state: MomentState::new(k, alpha) },
    };
    model.sigma_mode = match need(m.sigma_mode, "method.sigma_mode")? {
        SigmaModeKind::Batch => SigmaMode::Batch,
        SigmaModeKind::Ema => SigmaMode::Ema { state: MomentState::new(k, alpha) },
        SigmaModeKind::Trainable => SigmaMode::Trainable { values: model.estimate_sigma(&xt), l2: need(m.l2, "method.l2")? },
    };
    model.ordering = match need(m.ordering, "method.ordering")? {
        OrderingKind::None => Ordering::None,
        OrderingKind::Deflation => Ordering::ProjectiveDeflation,
        OrderingKind::Triangular => Ordering::Triangular { variant: m.triangular_variant.unwrap_or(1) },
        OrderingKind::Weighted => Ordering::WeightedLatent { weights: WeightingSpec::linear_spaced(k)? },
        OrderingKind::Nested => Ordering::Nested { rho: need(m.rho, "method.rho")?, orth_strength: need(m.orth_strength, "method.orth_strength")? },
    };
    let out = train(model, &xt, &tc)?;
    let best_loss = out.best_loss();
    let model = out.model;
    let sigma = model.estimate_sigma(&xt);
    dir.write_matrix("weights.csv", "w", &model.w)?;
    dir.write_csv("sigma.csv", &["sigma".to_string()], sigma.iter().map(|s| vec![*s]))?;
    dir.write_history("history.csv", &out.history)?;
    let order = descending_order(&sigma);
    let mut metrics = json!({
        "sigma": sigma.as_slice(),
        "sigma_descending": order.iter().enumerate().all(|(i, &j)| i == j),
        "orth_residual": orth_residual(&model.w),
        "col_norms": col_norms(&model.w).as_slice(),
        "best_loss": best_loss,
        "checkpoint_epoch": out.checkpoint_epoch,
    });
    if let Some(gt) = gt {
        if k == gt.s0.ncols() {
            let recovered = sub_row(x.values(), &x.column_means()) * &model.w;
            let rec = recovery_metrics(dir, &x, &gt, &recovered, &model.w, &sigma)?;
            merge(&mut metrics, rec);
        }
    }
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

fn contrast(c: ContrastKind) -> Contrast {
    match c {
        ContrastKind::Logcosh => Contrast::Logcosh,
        ContrastKind::Cube => Contrast::Cube,
    }
}

fn ica_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let tc = cfg.train_config()?;
    let m = &cfg.method;
    let (x, gt) = signal_data(cfg)?;
    let k = m.k.unwrap_or(x.p()).min(x.p());
    let seed = cfg.seed();
    let fast = FastIcaConfig { contrast: contrast(need(m.contrast, "method.contrast")?), seed, ..FastIcaConfig::default() };
    let (b, history) = match need(m.ica, "method.ica")? {
        IcaMethod::Fastica => (two_stage_ica(&x, k, &RotationMethod::FastIca { config: fast })?.b, Vec::new()),
        IcaMethod::TwoStage => {
            let mut rot = tc;
            rot.constraints = ConstraintSpec { unit_norm: UnitNorm::None, orthogonality: Orthogonality::iterative_default() };
            let method = RotationMethod::ConventionalNlpca { nonlinearity: NonlinearitySpec::scaled_tanh(need(m.v_a, "method.v_a")?), train: rot };
            (two_stage_ica(&x, k, &method)?.b, Vec::new())
        }
        IcaMethod::TwoLayer => {
            let xc = x.centred();
            let v = random_semi_orthogonal(k, k, seed ^ 0xface)?;
            let model = TwoLayerModel::new(
                sigma_pca_model(x.p(), k, need(m.a, "method.a")?, seed),
                v,
                NonlinearitySpec::scaled_tanh(need(m.v_a, "method.v_a")?),
            )?;
            let out = train(model, &xc, &tc)?;
            (out.model.result(&xc)?.b, out.history)
        }
        IcaMethod::Easi => {
            let wh = whiten_pca(&x, k)?;
            let ec = EasiConfig { contrast: fast.contrast, eta: need(m.eta, "method.eta")?, epochs: tc.epochs, batch_size: tc.batch_size, seed };
            (&wh.a * easi(&wh.z, &ec)?, Vec::new())
        }
    };
    let sigma_est = col_norms(&b).map(|n| 1.0 / n);
    let recovered = sub_row(x.values(), &x.column_means()) * &b;
    dir.write_matrix("unmixing.csv", "b", &b)?;
    dir.write_matrix("sources.csv", "y", &recovered)?;
    if !history.is_empty() {
        dir.write_history("history.csv", &history)?;
    }
    let mut metrics = json!({ "sigma_est": sigma_est.as_slice() });
    if let Some(gt) = gt {
        if k == gt.s0.ncols() {
            let rec = recovery_metrics(dir, &x, &gt, &recovered, &b, &sigma_est)?;
            merge(&mut metrics, rec);
        }
    }
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn patches_one(cfg: &Config, dir: &mut RunDir) -> Result<Value> {
    let tc = cfg.train_config()?;
    let d = &cfg.data;
    let (size, stride) = (need(d.size, "data.size")?, need(d.stride, "data.stride")?);
    let procedural = d.images.is_none();
    let images = match &d.images {
        Some(folder) => load_image_folder(folder)?,
        None => procedural_bars(need(d.count, "data.count")?, 32, 32, cfg.seed())?,
    };
    let channels = images[0].c;
    let x = extract_patches(&images, size, stride, need(d.zero_pad, "data.zero_pad")?)?.centred();
    let k = cfg.method.k.unwrap_or(16).min(x.p());
    let method = match need(cfg.method.patches, "method.patches")? {
        PatchMethodKind::SigmaPca => PatchMethod::SigmaPca {
            a: need(cfg.method.a, "method.a")?,
            decoder: decoder_mode(need(cfg.method.decoder, "method.decoder")?),
            objective: objective(need(cfg.method.objective, "method.objective")?),
        },
        PatchMethodKind::LinearTied => PatchMethod::LinearTied,
        PatchMethodKind::Svd => PatchMethod::Svd,
    };
    let phases = with_refine(tc, cfg, x.n(), 0.05);
    let out = run_patch_filters(&x, &method, k, &phases)?;
    let grid = filter_grid(&out.w, size, channels, need(d.gap, "data.gap")?);
    let (gw, gh) = grid.dimensions();
    dir.write_png("filters.png", &grid)?;
    dir.write_matrix("filters.csv", "f", &out.w)?;
    dir.write_csv("sigma.csv", &["sigma".to_string()], out.sigma.iter().map(|s| vec![*s]))?;
    if !out.history.is_empty() {
        dir.write_history("history.csv", &out.history)?;
    }
    let norms = col_norms(&out.w);
    let mut metrics = json!({
        "patches": x.n(),
        "patch_dim": x.p(),
        "k": k,
        "grid_px": [gw, gh],
        "sigma": out.sigma.as_slice(),
        "orth_residual": orth_residual(&out.w),
        "max_norm_error": norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max),
    });
    let dictionary = bar_dictionary();
    // Aligned 8×8 tiles of the bar images are sparse in this dictionary; the
    // one-to-one match needs one filter per atom.
    if procedural && size == 8 && stride == 8 && k == dictionary.ncols() {
        let cos = matched_abs_cos(&out.w, &dictionary)?;
        metrics["dictionary_abs_cos"] = json!(cos);
    }
    dir.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

fn gradcheck(cfg: &Config, dir: &mut RunDir) -> Result<Outcome> {
    let m = &cfg.method;
    let report = run_suite(need(m.instances, "method.instances")?, need(m.h, "method.h")?, need(m.tol, "method.tol")?, cfg.seed())?;
    dir.write_json("gradcheck.json", &report)?;
    let passed = report.passed();
    let failing: Vec<&str> = report.cases.iter().filter(|c| c.max_rel_err > report.tol).map(|c| c.name.as_str()).collect();
    let worst = report.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let metrics = json!({ "cases": report.cases.len(), "passed": passed, "max_rel_err": worst, "failing": failing });
    dir.write_json("metrics.json", &metrics)?;
    Ok(Outcome { metrics, passed })
}

/// Flattens nested JSON into `key  value` lines.
pub fn render_table(v: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

fn fmt_num(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x}")
    } else if x.abs() >= 1e-3 && x.abs() < 1e6 {
        format!("{x:.4}")
    } else {
        format!("{x:.3e}")
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => Some("-".into()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.as_f64().map_or_else(|| n.to_string(), fmt_num)),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, rows);
            }
        }
        Value::Array(items) if items.iter().all(|i| scalar(i).is_some()) => {
            let parts: Vec<String> = items.iter().filter_map(scalar).collect();
            rows.push((prefix.to_string(), format!("[{}]", parts.join(", "))));
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), child, rows);
            }
        }
        other => rows.push((prefix.to_string(), scalar(other).unwrap_or_default())),
    }
}

/// Reads a JSON file, or `manifest.json` inside a run directory.
pub fn read_json(path: &Path) -> Result<Value> {
    let file = if path.is_dir() { path.join(crate::output::MANIFEST) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_validates() {
        for kind in [
            CommandKind::Pca,
            CommandKind::Nlpca,
            CommandKind::Ica,
            CommandKind::Signals,
            CommandKind::Points2d,
            CommandKind::Patches,
            CommandKind::Gradcheck,
        ] {
            let c = defaults(kind);
            c.validate().unwrap();
            if kind.trains() {
                c.train_config().unwrap();
            }
            assert_eq!(CommandKind::parse(kind.name()).unwrap(), kind);
        }
    }

    #[test]
    fn table_flattens_nesting() {
        let t = render_table(&json!({ "a": { "b": 0.5, "c": [1, 2] }, "d": true }));
        assert!(t.contains("a.b  0.5000"), "{t}");
        assert!(t.contains("a.c  [1, 2]"), "{t}");
        assert!(t.contains("d    true"), "{t}");
    }
}
