//! Linear PCA learning rules over a batch, as loss/gradient pairs.
//!
//! Row-vector convention: `y = xW` with `x` a row of the batch. Every
//! gradient is a batch mean. Triangular terms are oriented so column i only
//! interacts with columns j ≤ i; the first column is the leading component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{mean_sq, GradResult};
use crate::linalg::{mean_cross, require_cols, scale_cols, strict_upper, upper, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearVariant {
    /// Tied autoencoder: encoder and decoder contributions.
    TiedFull,
    /// Decoder contribution only (Oja's subspace rule).
    Subspace,
    /// Encoder contribution only; zero whenever W is semi-orthogonal.
    EncoderOnly,
}

/// Weights λ₁ > … > λ_k in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingSpec {
    lambdas: Vector,
}

impl WeightingSpec {
    /// λ_i = (k − i + 1)/k.
    pub fn linear_spaced(k: usize) -> Result<Self> {
        if k == 0 {
            return invalid("weighting needs at least one component");
        }
        Ok(Self { lambdas: Vector::from_fn(k, |i, _| (k - i) as f64 / k as f64) })
    }

    pub fn custom(lambdas: Vector) -> Result<Self> {
        if lambdas.is_empty() {
            return invalid("weighting needs at least one component");
        }
        if lambdas.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return invalid("weights must lie in (0, 1]");
        }
        if lambdas.as_slice().windows(2).any(|w| w[1] >= w[0]) {
            return invalid("weights must be strictly decreasing");
        }
        Ok(Self { lambdas })
    }

    /// All-ones weighting: reduces every weighted rule to its unweighted form.
    /// Breaks the strict-decrease invariant on purpose; only for comparisons.
    pub fn identity(k: usize) -> Self {
        Self { lambdas: Vector::from_element(k, 1.0) }
    }

    pub fn lambdas(&self) -> &Vector {
        &self.lambdas
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightedVariant {
    V1,
    V2,
    /// Unit-norm preserving form.
    V3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhaVariant {
    Plain,
    WithEncoder,
    PlusSubspace,
    ReconCombo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VarianceMode {
    Fixed,
    /// Per-sample nested masks in place of Λ.
    Stochastic { rho: f64 },
    /// Λ = E(y²)/max E(y²), held constant.
    VarianceProportional,
}

struct Batch {
    b: f64,
    y: Mat,
    /// XᵀY / b
    c: Mat,
    /// YᵀY / b
    gy: Mat,
}

fn batch(x: &Mat, w: &Mat) -> Result<Batch> {
    require_cols(x, w)?;
    if x.nrows() == 0 {
        return invalid("empty batch");
    }
    let y = x * w;
    let c = mean_cross(x, &y);
    let gy = mean_cross(&y, &y);
    Ok(Batch { b: x.nrows() as f64, y, c, gy })
}

fn tied_recon(x: &Mat, w: &Mat, y: &Mat) -> f64 {
    mean_sq(&(y * w.transpose() - x))
}

fn tied_grad(w: &Mat, c: &Mat) -> Mat {
    let k = w.ncols();
    let p = w.nrows();
    c * (w.transpose() * w - Mat::identity(k, k)) + (w * w.transpose() - Mat::identity(p, p)) * c
}

/// Linear autoencoder loss ½E‖x − xWWᵀ‖² and the chosen gradient contribution.
pub fn linear_pca_grad(x: &Mat, w: &Mat, variant: LinearVariant) -> Result<GradResult> {
    let bt = batch(x, w)?;
    let k = w.ncols();
    let recon = tied_recon(x, w, &bt.y);
    let g = match variant {
        LinearVariant::TiedFull => tied_grad(w, &bt.c),
        LinearVariant::Subspace => w * &bt.gy - &bt.c,
        LinearVariant::EncoderOnly => &bt.c * (w.transpose() * w - Mat::identity(k, k)),
    };
    Ok(GradResult::new(0.5 * recon, recon, g))
}

/// Weighted subspace rules. V2 is the gradient of
/// ½E(‖x[W]_sg Wᵀ − x‖² − ‖xWΛ^½‖² + ‖xW‖²); V1 and V3 are update rules.
pub fn weighted_subspace_grad(x: &Mat, w: &Mat, lambdas: &WeightingSpec, variant: WeightedVariant) -> Result<GradResult> {
    let bt = batch(x, w)?;
    let lam = lambdas.lambdas();
    if lam.len() != w.ncols() {
        return invalid(format!("{} weights for {} components", lam.len(), w.ncols()));
    }
    if lam.iter().any(|&l| !(l > 0.0)) {
        return invalid("weights must be positive");
    }
    let recon = tied_recon(x, w, &bt.y);
    let (loss, g) = match variant {
        WeightedVariant::V1 => {
            let inv = lam.map(|l| 1.0 / l);
            (0.5 * recon, scale_cols(&(w * &bt.gy), &inv) - &bt.c)
        }
        WeightedVariant::V2 => {
            let var = bt.gy.diagonal();
            let weighted: f64 = var.iter().zip(lam.iter()).map(|(v, l)| v * (1.0 - l)).sum();
            (0.5 * (recon + weighted), w * &bt.gy - scale_cols(&bt.c, lam))
        }
        WeightedVariant::V3 => {
            let sq = lam.map(f64::sqrt);
            let isq = lam.map(|l| 1.0 / l.sqrt());
            let inner = scale_cols(&(Mat::from_diagonal(&sq) * &bt.gy), &isq);
            (0.5 * recon, w * inner - &bt.c)
        }
    };
    Ok(GradResult::new(loss, recon, g))
}

/// Gradient of ½E(‖x[W]_sg Wᵀ−x‖² + ‖WΣ̂Λ^½‖² − ‖WΣ̂‖² − ‖xWΛ^½‖² + ‖xW‖²).
pub fn asymmetric_pca_loss_grad(x: &Mat, w: &Mat, lambdas: &WeightingSpec, sigma_hat: &Vector) -> Result<GradResult> {
    let bt = batch(x, w)?;
    let lam = lambdas.lambdas();
    let k = w.ncols();
    if lam.len() != k || sigma_hat.len() != k {
        return invalid("weights and sigma_hat must have one entry per component");
    }
    let recon = tied_recon(x, w, &bt.y);
    let s2 = sigma_hat.map(|s| s * s);
    let norms2 = crate::linalg::col_norms(w).map(|n| n * n);
    let var = bt.gy.diagonal();
    let mut extra = 0.0;
    for j in 0..k {
        extra += norms2[j] * s2[j] * (lam[j] - 1.0) + var[j] * (1.0 - lam[j]);
    }
    let shift = s2.zip_map(lam, |s, l| s * (l - 1.0));
    let g = w * &bt.gy + scale_cols(w, &shift) - scale_cols(&bt.c, lam);
    Ok(GradResult::new(0.5 * (recon + extra), recon, g))
}

/// Generalised Hebbian algorithm and its combinations.
pub fn gha_grad(x: &Mat, w: &Mat, variant: GhaVariant) -> Result<GradResult> {
    let bt = batch(x, w)?;
    let k = w.ncols();
    let recon = tied_recon(x, w, &bt.y);
    let var_sum: f64 = bt.gy.trace();
    let g = match variant {
        GhaVariant::Plain => w * upper(&bt.gy) - &bt.c,
        GhaVariant::WithEncoder => {
            &bt.c * (upper(&(w.transpose() * w)) - Mat::identity(k, k)) + w * upper(&bt.gy) - &bt.c
        }
        GhaVariant::PlusSubspace => w * &bt.gy - &bt.c + w * strict_upper(&bt.gy),
        GhaVariant::ReconCombo => tied_grad(w, &bt.c) + w * strict_upper(&bt.gy),
    };
    // The frozen triangular factor contributes ⟨W, W·T⟩ with T held fixed.
    let tri = |t: Mat| (w * t).component_mul(w).sum();
    let loss = match variant {
        GhaVariant::Plain => -0.5 * var_sum + tri(upper(&bt.gy)),
        GhaVariant::WithEncoder => 0.5 * recon,
        GhaVariant::PlusSubspace | GhaVariant::ReconCombo => 0.5 * recon + tri(strict_upper(&bt.gy)),
    };
    Ok(GradResult::new(loss, recon, g))
}

/// Truncated geometric p(j) ∝ ρ^{j−1}(1−ρ), j = 1..=k.
pub fn nested_cut_pmf(k: usize, rho: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|i| rho.powi(i as i32) * (1.0 - rho)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

pub fn sample_nested_cut(k: usize, rho: f64, rng: &mut ChaCha8Rng) -> usize {
    let pmf = nested_cut_pmf(k, rho);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    k
}

/// Nested mask with ones on units 1..=j.
pub fn nested_mask(k: usize, j: usize) -> Vector {
    Vector::from_fn(k, |i, _| if i < j { 1.0 } else { 0.0 })
}

/// Tied reconstruction through a nested mask keeping units 1..=j.
pub fn nested_dropout_with_cut(x: &Mat, w: &Mat, j: usize) -> Result<GradResult> {
    require_cols(x, w)?;
    let k = w.ncols();
    if j == 0 || j > k {
        return invalid(format!("cut {j} outside 1..={k}"));
    }
    let m = nested_mask(k, j);
    let b = x.nrows() as f64;
    let ym = scale_cols(&(x * w), &m);
    let r = &ym * w.transpose() - x;
    let g = (r.transpose() * &ym + x.transpose() * scale_cols(&(&r * w), &m)) / b;
    let recon = mean_sq(&r);
    let mut out = GradResult::new(0.5 * recon, recon, g);
    out.mask_cut = Some(j);
    Ok(out)
}

pub fn nested_dropout(x: &Mat, w: &Mat, rho: f64, rng: &mut ChaCha8Rng) -> Result<GradResult> {
    if !(rho > 0.0 && rho < 1.0) {
        return invalid("rho must lie in (0, 1)");
    }
    let j = sample_nested_cut(w.ncols(), rho, rng);
    nested_dropout_with_cut(x, w, j)
}

/// Gradient of ½E(‖x − xWWᵀ‖² − α‖xWΛ^½‖²).
///
/// `lambdas` may contain zeros. In stochastic mode each sample draws its own
/// nested mask, used in place of Λ; `rng` is required there.
pub fn weighted_variance_grad(
    x: &Mat,
    w: &Mat,
    lambdas: &Vector,
    alpha: f64,
    mode: VarianceMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<GradResult> {
    if alpha != 1.0 && alpha != -1.0 {
        return invalid("alpha must be +1 or -1");
    }
    let bt = batch(x, w)?;
    let k = w.ncols();
    let recon = tied_recon(x, w, &bt.y);
    let tied = tied_grad(w, &bt.c);
    let (weighted_var, g) = match mode {
        VarianceMode::Fixed | VarianceMode::VarianceProportional => {
            let lam = if let VarianceMode::Fixed = mode {
                if lambdas.len() != k {
                    return invalid(format!("{} weights for {k} components", lambdas.len()));
                }
                if lambdas.iter().any(|&l| l < 0.0) {
                    return invalid("weights must be non-negative");
                }
                lambdas.clone()
            } else {
                variance_proportional(&bt.gy)
            };
            let wv: f64 = bt.gy.diagonal().iter().zip(lam.iter()).map(|(v, l)| v * l).sum();
            (wv, tied - scale_cols(&bt.c, &lam) * alpha)
        }
        VarianceMode::Stochastic { rho } => {
            let Some(rng) = rng else {
                return invalid("stochastic weighting needs an rng");
            };
            if !(rho > 0.0 && rho < 1.0) {
                return invalid("rho must lie in (0, 1)");
            }
            let mut ym = bt.y.clone();
            for i in 0..ym.nrows() {
                let j = sample_nested_cut(k, rho, rng);
                for c in j..k {
                    ym[(i, c)] = 0.0;
                }
            }
            let wv = ym.component_mul(&bt.y).sum() / bt.b;
            (wv, tied - x.transpose() * &ym * (alpha / bt.b))
        }
    };
    Ok(GradResult::new(0.5 * (recon - alpha * weighted_var), recon, g))
}

pub(crate) fn variance_proportional(gy: &Mat) -> Vector {
    let d = gy.diagonal();
    let m = d.max();
    if m > 0.0 {
        d / m
    } else {
        Vector::zeros(d.len())
    }
}
