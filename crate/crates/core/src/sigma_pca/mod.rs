//! σ-PCA: reconstruction through `h(yΣ⁻¹)ΣWᵀ` with Σ the component standard
//! deviations, its gradient variants, Σ/μ handling and component ordering.

mod nonlinearity;
mod variants;

pub use nonlinearity::{tanh_scale_std, DerivativeMode, NonlinearityKind, NonlinearitySpec};
pub use variants::{
    latent_recon_grad, noncentred_grad, rica_grad, skew_symmetric_grad, LatentVariant, NonCentredVariant,
    RicaBeta, RicaPenalty, SkewBeta, SkewForm,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Result};
use crate::grad::{mean_sq, GradResult};
use crate::linalg::{
    floored_std, mean_cross, mean_hadamard_cols, moment_stats, require_cols, scale_cols, strict_lower, strict_upper,
    sub_row, DataMatrix, Mat, MomentMode, MomentState, Vector,
};
use crate::linear_pca::{nested_mask, sample_nested_cut, WeightingSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SigmaMode {
    /// Recomputed from every batch, held constant for the gradient.
    Batch,
    Ema { state: MomentState },
    Trainable { values: Vector, l2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MuMode {
    /// Data is assumed centred; μ = 0.
    Precentred,
    Batch,
    Ema { state: MomentState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Spectral,
    Frobenius,
    Nuclear,
}

impl NormKind {
    /// Norm of diag(σ).
    pub fn of_diag(self, sigma: &Vector) -> f64 {
        match self {
            NormKind::Spectral => sigma.amax(),
            NormKind::Frobenius => sigma.norm(),
            NormKind::Nuclear => sigma.iter().map(|s| s.abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderMode {
    /// Encoder contribution only (decoder weights behind a stop-gradient).
    #[default]
    Stopgrad,
    /// Encoder plus decoder contribution: the gradient of the tied loss.
    Full,
    /// Full, with the encoder contribution multiplied by Σ.
    EncoderScaled,
    /// Full, with the decoder contribution divided by ‖Σ‖.
    Rescaled { norm: NormKind },
    /// Decoder contribution without Σ; optionally drops h' from the encoder.
    SigmaDropped { drop_derivative: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Ordering {
    #[default]
    None,
    /// y ← xW·(I − strict_lower(Wᵀ[W]_sg)) before standardisation.
    ProjectiveDeflation,
    /// Adds W·strict_upper(M) with M one of six decoder-derived products.
    Triangular { variant: u8 },
    WeightedLatent { weights: WeightingSpec },
    /// Nested mask on the latent units plus β‖I − WᵀW‖².
    Nested { rho: f64, orth_strength: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    SigmaPca,
    /// ‖x − h(xW)Wᵀ‖² with Σ = I.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPcaModel {
    pub w: Mat,
    pub sigma_mode: SigmaMode,
    pub mu_mode: MuMode,
    pub nonlinearity: NonlinearitySpec,
    pub decoder_mode: DecoderMode,
    pub ordering: Ordering,
    pub objective: Objective,
    /// Weight α of the extra linear encoder term ½αE‖x − xW[Wᵀ]_sg‖². Experimental.
    pub compensation: Option<f64>,
}

impl SigmaPcaModel {
    /// Batch σ, precentred data, stop-gradient decoder, no ordering.
    pub fn new(w: Mat, nonlinearity: NonlinearitySpec) -> Self {
        Self {
            w,
            sigma_mode: SigmaMode::Batch,
            mu_mode: MuMode::Precentred,
            nonlinearity,
            decoder_mode: DecoderMode::Stopgrad,
            ordering: Ordering::None,
            objective: Objective::SigmaPca,
            compensation: None,
        }
    }

    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.nonlinearity.validate()?;
        if let SigmaMode::Trainable { values, l2 } = &self.sigma_mode {
            check_shape(values.len() == self.k(), || format!("{} sigma values for {} columns", values.len(), self.k()))?;
            if *l2 < 0.0 {
                return invalid("l2 strength must be non-negative");
            }
        }
        if let Ordering::Triangular { variant } = self.ordering {
            if !(1..=6).contains(&variant) {
                return invalid(format!("triangular variant {variant} outside 1..=6"));
            }
        }
        if let Ordering::Nested { rho, .. } = self.ordering {
            if !(rho > 0.0 && rho < 1.0) {
                return invalid("rho must lie in (0, 1)");
            }
        }
        Ok(())
    }

    /// Folds a batch into the EMA states (no-op for other modes).
    pub fn update_stats(&mut self, x: &Mat) -> Result<()> {
        if let MuMode::Ema { state } = &mut self.mu_mode {
            moment_stats(x, MomentMode::Ema(state))?;
        }
        if matches!(self.sigma_mode, SigmaMode::Ema { .. }) {
            let mu = self.mean_for(x);
            let y = self.project(&sub_row(x, &mu));
            if let SigmaMode::Ema { state } = &mut self.sigma_mode {
                moment_stats(&y, MomentMode::Ema(state))?;
            }
        }
        Ok(())
    }

    fn mean_for(&self, x: &Mat) -> Vector {
        match &self.mu_mode {
            MuMode::Precentred => Vector::zeros(x.ncols()),
            MuMode::Batch => crate::linalg::column_means(x),
            MuMode::Ema { state } => state.mu_hat.clone(),
        }
    }

    fn deflation(&self) -> Option<Mat> {
        match self.ordering {
            Ordering::ProjectiveDeflation => {
                let k = self.k();
                Some(Mat::identity(k, k) - strict_lower(&(self.w.transpose() * &self.w)))
            }
            _ => None,
        }
    }

    /// Encoder output (x − μ)W, deflated when the ordering asks for it.
    fn project(&self, xc: &Mat) -> Mat {
        let y = xc * &self.w;
        match self.deflation() {
            Some(p) => y * p,
            None => y,
        }
    }

    /// Σ used for a batch with encoder output `y`, and whether it was floored.
    pub(crate) fn sigma_for(&self, y: &Mat) -> Result<(Vector, bool)> {
        let k = self.k();
        Ok(match self.objective {
            Objective::Conventional => (Vector::from_element(k, 1.0), false),
            Objective::SigmaPca => match &self.sigma_mode {
                SigmaMode::Batch => {
                    let (_, var) = moment_stats(y, MomentMode::Batch)?;
                    floored_std(&var)
                }
                SigmaMode::Ema { state } => floored_std(&state.var_hat),
                SigmaMode::Trainable { values, .. } => {
                    let lo = crate::linalg::VAR_EPS.sqrt();
                    (values.map(|v| v.max(lo)), values.iter().any(|v| *v < lo))
                }
            },
        })
    }

    /// Standard deviations of the encoder output on `x` (full-data estimate).
    pub fn estimate_sigma(&self, x: &DataMatrix) -> Vector {
        let xv = x.values();
        let mu = match self.mu_mode {
            MuMode::Precentred => Vector::zeros(xv.ncols()),
            _ => crate::linalg::column_means(xv),
        };
        let y = self.project(&sub_row(xv, &mu));
        let (_, var) = moment_stats(&y, MomentMode::Batch).expect("non-empty data");
        floored_std(&var).0
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input minus μ.
    pub xc: Mat,
    pub mu: Vector,
    /// Encoder output (after deflation if active).
    pub y: Mat,
    /// (x − μ)W before deflation.
    pub y_raw: Mat,
    pub sigma: Vector,
    pub z: Mat,
    pub hz: Mat,
    pub dh: Mat,
    /// Centred reconstruction h(z)ΣWᵀ.
    pub xhat: Mat,
    /// xhat·W.
    pub yhat: Mat,
    pub floored: bool,
}

impl ForwardCache {
    /// (x̂ − x)W, the latent reconstruction error ŷ − y.
    pub fn resid_y(&self) -> Mat {
        &self.yhat - &self.y_raw
    }
}

pub fn sigma_pca_forward(model: &SigmaPcaModel, x: &Mat) -> Result<ForwardCache> {
    require_cols(x, &model.w)?;
    if x.nrows() == 0 {
        return invalid("empty batch");
    }
    let mu = model.mean_for(x);
    let xc = sub_row(x, &mu);
    let y_raw = &xc * &model.w;
    let y = match model.deflation() {
        Some(p) => &y_raw * p,
        None => y_raw.clone(),
    };
    let (sigma, floored) = model.sigma_for(&y)?;
    let z = scale_cols(&y, &sigma.map(|s| 1.0 / s));
    let (hz, dh) = model.nonlinearity.eval(&z);
    let xhat = scale_cols(&hz, &sigma) * model.w.transpose();
    let yhat = &xhat * &model.w;
    Ok(ForwardCache { xc, mu, y, y_raw, sigma, z, hz, dh, xhat, yhat, floored })
}

/// Gradient of the model's loss on a batch.
///
/// The base loss is ½E‖x − h(xWΣ⁻¹)Σ[Wᵀ]_sg‖² with Σ and μ held constant;
/// `decoder_mode`, `ordering`, `objective` and `compensation` modify it as
/// documented on their types. `rng` is needed only for nested ordering.
pub fn sigma_pca_grad(model: &SigmaPcaModel, x: &Mat, rng: Option<&mut ChaCha8Rng>) -> Result<GradResult> {
    model.validate()?;
    let cache = sigma_pca_forward(model, x)?;
    let w = &model.w;
    let k = model.k();
    let b = x.nrows() as f64;

    let nested_cut = match (&model.ordering, rng) {
        (Ordering::Nested { rho, .. }, Some(r)) => Some(sample_nested_cut(k, *rho, r)),
        (Ordering::Nested { .. }, None) => return invalid("nested ordering needs an rng"),
        _ => None,
    };

    // Reconstruction through the (possibly masked) latent units.
    let (xhat, mask) = match nested_cut {
        Some(j) => {
            let m = nested_mask(k, j);
            (scale_cols(&cache.hz, &cache.sigma.component_mul(&m)) * w.transpose(), Some(m))
        }
        None => (cache.xhat.clone(), None),
    };
    let r = &xhat - &cache.xc;
    let recon = mean_sq(&r);
    let mut loss = 0.5 * recon;

    let dh = match model.decoder_mode {
        DecoderMode::SigmaDropped { drop_derivative: true } => Mat::from_element(cache.dh.nrows(), k, 1.0),
        _ => cache.dh.clone(),
    };
    let mut g_lat = (&r * w).component_mul(&dh);
    if let Some(m) = &mask {
        g_lat = scale_cols(&g_lat, m);
    }

    let mut grad = match (&model.ordering, model.deflation()) {
        (Ordering::ProjectiveDeflation, Some(p)) => {
            cache.xc.transpose() * &g_lat * p.transpose() / b - w * strict_upper(&(g_lat.transpose() * &cache.y_raw)) / b
        }
        (Ordering::WeightedLatent { weights }, _) => weighted_latent_grad(&cache, w, weights.lambdas(), &dh),
        _ => cache.xc.transpose() * &g_lat / b,
    };
    if model.decoder_mode == DecoderMode::EncoderScaled {
        grad = scale_cols(&grad, &cache.sigma);
    }

    let hs = scale_cols(&cache.hz, &cache.sigma);
    match model.decoder_mode {
        DecoderMode::Stopgrad => {}
        DecoderMode::Full | DecoderMode::EncoderScaled => grad += r.transpose() * &hs / b,
        DecoderMode::Rescaled { norm } => {
            let s = norm.of_diag(&cache.sigma);
            grad += r.transpose() * &hs / (b * s);
            loss += 0.5 * recon / s;
        }
        DecoderMode::SigmaDropped { .. } => grad += r.transpose() * &cache.hz / b,
    }

    if let Ordering::Triangular { variant } = model.ordering {
        grad += triangular_term(&cache, w, variant);
    }
    if let Ordering::Nested { orth_strength, .. } = model.ordering {
        let gram = w.transpose() * w - Mat::identity(k, k);
        grad += w * &gram * (4.0 * orth_strength);
        loss += orth_strength * gram.norm_squared();
    }
    if let Some(alpha) = model.compensation {
        let c = mean_cross(&cache.xc, &cache.y_raw);
        grad += c * (w.transpose() * w - Mat::identity(k, k)) * alpha;
        loss += 0.5 * alpha * mean_sq(&(&cache.y_raw * w.transpose() - &cache.xc));
    }

    let mut out = GradResult::new(loss, recon, grad);
    out.floored = cache.floored;
    out.mask_cut = nested_cut;
    if let SigmaMode::Trainable { values, l2 } = &model.sigma_mode {
        if model.objective == Objective::SigmaPca {
            out.grad_sigma = Some(trainable_sigma_grad(&cache, values, *l2));
            out.loss += l2 * values.norm_squared();
        }
    }
    Ok(out)
}

/// ∂L/∂σ for a trainable Σ shared by encoder and decoder:
/// E[−y(ŷ−y)h'(z)/σ + (ŷ−y)h(z)] + 2·l2·σ.
pub fn trainable_sigma_grad(cache: &ForwardCache, sigma: &Vector, l2: f64) -> Vector {
    let d = cache.resid_y();
    let enc = mean_hadamard_cols(&cache.y, &d.component_mul(&cache.dh));
    let dec = mean_hadamard_cols(&d, &cache.hz);
    Vector::from_fn(sigma.len(), |j, _| -enc[j] / sigma[j] + dec[j] + 2.0 * l2 * sigma[j])
}

fn weighted_latent_grad(cache: &ForwardCache, w: &Mat, lam: &Vector, dh: &Mat) -> Mat {
    let b = cache.xc.nrows() as f64;
    let gram = w.transpose() * w;
    let hs = scale_cols(&cache.hz, &cache.sigma.component_mul(lam));
    let lam_m = Mat::from_diagonal(lam);
    let d = (hs * gram - &cache.y_raw * lam_m).component_mul(dh);
    cache.xc.transpose() * d / b
}

/// W·strict_upper(M) for the six decoder-derived products M.
fn triangular_term(cache: &ForwardCache, w: &Mat, variant: u8) -> Mat {
    let b = cache.xc.nrows() as f64;
    let hs = scale_cols(&cache.hz, &cache.sigma);
    let m = match variant {
        1 => hs.transpose() * &cache.hz,
        2 => scale_cols(&(cache.hz.transpose() * &cache.hz), &cache.sigma),
        3 => cache.hz.transpose() * &cache.y,
        4 => cache.y.transpose() * &cache.hz,
        5 => cache.z.transpose() * &cache.y,
        _ => cache.y.transpose() * &cache.z,
    };
    w * strict_upper(&(m / b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingVariant {
    ProjectiveDeflation,
    Triangular(u8),
    WeightedLatent,
    Nested,
}

/// The part of the gradient contributed by the ordering mechanism alone.
///
/// For embedded deflation this is the asymmetric term −W·strict_upper(y_δᵀy)
/// (y_δ = (ŷ−y)⊙h'(z)); for nested ordering it is the full masked-loss
/// gradient with the given cut.
pub fn ordering_term_grad(model: &SigmaPcaModel, cache: &ForwardCache, variant: OrderingVariant, cut: Option<usize>) -> Result<Mat> {
    let w = &model.w;
    let b = cache.xc.nrows() as f64;
    let k = model.k();
    Ok(match variant {
        OrderingVariant::ProjectiveDeflation => {
            let yd = cache.resid_y().component_mul(&cache.dh);
            -(w * strict_upper(&(yd.transpose() * &cache.y_raw))) / b
        }
        OrderingVariant::Triangular(v) => {
            if !(1..=6).contains(&v) {
                return invalid(format!("triangular variant {v} outside 1..=6"));
            }
            triangular_term(cache, w, v)
        }
        OrderingVariant::WeightedLatent => {
            let Ordering::WeightedLatent { weights } = &model.ordering else {
                return invalid("model ordering is not weighted_latent");
            };
            let base = cache.xc.transpose() * cache.resid_y().component_mul(&cache.dh) / b;
            weighted_latent_grad(cache, w, weights.lambdas(), &cache.dh) - base
        }
        OrderingVariant::Nested => {
            let j = cut.unwrap_or(k);
            if j == 0 || j > k {
                return invalid(format!("cut {j} outside 1..={k}"));
            }
            let m = nested_mask(k, j);
            let xhat = scale_cols(&cache.hz, &cache.sigma.component_mul(&m)) * w.transpose();
            let r = xhat - &cache.xc;
            let g = scale_cols(&(&r * w).component_mul(&cache.dh), &m);
            cache.xc.transpose() * g / b
        }
    })
}

/// Reorders components so σ is descending; ties keep their original order.
/// Returns the permuted model and `perm` with new column i = old column perm[i].
pub fn sort_components(model: &SigmaPcaModel, sigma: &Vector) -> Result<(SigmaPcaModel, Vec<usize>)> {
    check_shape(sigma.len() == model.k(), || format!("{} sigma values for {} columns", sigma.len(), model.k()))?;
    let perm = descending_order(sigma);
    let mut out = model.clone();
    out.w = model.w.select_columns(perm.iter());
    let permute = |v: &Vector| Vector::from_iterator(v.len(), perm.iter().map(|&i| v[i]));
    match &mut out.sigma_mode {
        SigmaMode::Trainable { values, .. } => *values = permute(values),
        SigmaMode::Ema { state } => {
            state.mu_hat = permute(&state.mu_hat);
            state.var_hat = permute(&state.var_hat);
        }
        SigmaMode::Batch => {}
    }
    Ok((out, perm))
}

/// Stable descending argsort.
pub fn descending_order(v: &Vector) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, random_semi_orthogonal};
    use rand::SeedableRng;

    fn batch(seed: u64, n: usize, p: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::linalg::centre(&gaussian_matrix(n, p, &mut rng)).0
    }

    #[test]
    fn linear_reduces_to_pca_reconstruction() {
        let x = batch(1, 9, 5);
        let w = random_semi_orthogonal(5, 3, 2).unwrap();
        let m = SigmaPcaModel::new(w.clone(), NonlinearitySpec::linear());
        let c = sigma_pca_forward(&m, &x).unwrap();
        assert!((&c.xhat - &x * &w * w.transpose()).norm() < 1e-12);
        assert!((&c.yhat - &c.y).norm() < 1e-10);
        let g = sigma_pca_grad(&m, &x, None).unwrap();
        assert!(g.grad_w.norm() < 1e-12);
    }

    #[test]
    fn zero_batch() {
        let m = SigmaPcaModel::new(random_semi_orthogonal(4, 2, 0).unwrap(), NonlinearitySpec::scaled_tanh(4.0));
        let c = sigma_pca_forward(&m, &Mat::zeros(5, 4)).unwrap();
        assert!(c.floored);
        for v in [&c.y, &c.z, &c.hz, &c.xhat, &c.yhat] {
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn standardised_latents() {
        let x = batch(3, 50, 6);
        let m = SigmaPcaModel::new(random_semi_orthogonal(6, 3, 1).unwrap(), NonlinearitySpec::scaled_tanh(4.0));
        let c = sigma_pca_forward(&m, &x).unwrap();
        let (_, var) = moment_stats(&c.z, MomentMode::Batch).unwrap();
        for v in var.iter() {
            assert!((v - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn sorting() {
        let m = SigmaPcaModel::new(random_semi_orthogonal(4, 3, 0).unwrap(), NonlinearitySpec::linear());
        let (s, perm) = sort_components(&m, &Vector::from_vec(vec![1.0, 3.0, 2.0])).unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
        assert_eq!(s.w.column(0), m.w.column(1));
        let (_, perm) = sort_components(&m, &Vector::from_vec(vec![3.0, 2.0, 1.0])).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        let (_, perm) = sort_components(&m, &Vector::from_vec(vec![2.0, 2.0, 1.0])).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        let (_, perm) = sort_components(&m, &Vector::from_vec(vec![1.0, 2.0, 2.0])).unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
    }

    #[test]
    fn strict_triangular_terms_vanish_for_diagonal_products() {
        // One latent column per sample block gives diagonal products.
        let mut y = Mat::zeros(4, 2);
        y[(0, 0)] = 1.0;
        y[(1, 0)] = -1.0;
        y[(2, 1)] = 2.0;
        y[(3, 1)] = -2.0;
        let w = Mat::identity(2, 2);
        let m = SigmaPcaModel::new(w, NonlinearitySpec::scaled_tanh(1.0));
        let c = sigma_pca_forward(&m, &y).unwrap();
        for v in 1..=6 {
            let t = ordering_term_grad(&m, &c, OrderingVariant::Triangular(v), None).unwrap();
            assert!(t.norm() < 1e-15);
        }
        let t = ordering_term_grad(&m, &c, OrderingVariant::ProjectiveDeflation, None).unwrap();
        assert!(t.norm() < 1e-15);
    }
}
