//! Alternative σ-PCA objectives: latent-space reconstruction, RICA,
//! skew-symmetric updates and the non-centred forms.

use serde::{Deserialize, Serialize};

use super::{sigma_pca_forward, MuMode, NonlinearitySpec, SigmaPcaModel};
use crate::error::{invalid, Result};
use crate::grad::{mean_sq, GradResult};
use crate::linalg::{column_means, mean_cross, require_cols, scale_cols, sub_row, upper, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatentVariant {
    /// K = [WᵀW]_sg plus β‖I − WᵀW‖².
    WtwSymreg { beta: f64 },
    /// K = upper([WᵀW]_sg) plus β‖I − WᵀW‖².
    TriWtwSymreg { beta: f64 },
    /// K = I plus β‖I − WᵀW‖².
    PlainOrthreg { beta: f64 },
    /// K = I plus ½E‖xW[Wᵀ]_sg − x‖².
    PlusLinear,
}

/// Gradient of ½E‖[xW]_sg − h(xWΣ⁻¹)ΣK‖² plus the variant's orthogonality term.
pub fn latent_recon_grad(model: &SigmaPcaModel, x: &Mat, variant: LatentVariant) -> Result<GradResult> {
    let cache = sigma_pca_forward(model, x)?;
    let w = &model.w;
    let k = model.k();
    let b = x.nrows() as f64;
    let gram = w.transpose() * w;
    let eye = Mat::identity(k, k);
    let kmat = match variant {
        LatentVariant::WtwSymreg { .. } => gram.clone(),
        LatentVariant::TriWtwSymreg { .. } => upper(&gram),
        LatentVariant::PlainOrthreg { .. } | LatentVariant::PlusLinear => eye.clone(),
    };
    let hs = scale_cols(&cache.hz, &cache.sigma);
    let d = &hs * &kmat - &cache.y;
    let mut loss = 0.5 * mean_sq(&d);
    let mut grad = cache.xc.transpose() * (&d * kmat.transpose()).component_mul(&cache.dh) / b;
    match variant {
        LatentVariant::WtwSymreg { beta } | LatentVariant::TriWtwSymreg { beta } | LatentVariant::PlainOrthreg { beta } => {
            let r = &gram - &eye;
            grad += w * &r * (4.0 * beta);
            loss += beta * r.norm_squared();
        }
        LatentVariant::PlusLinear => {
            let c = mean_cross(&cache.xc, &cache.y);
            grad += c * (&gram - &eye);
            loss += 0.5 * mean_sq(&(&cache.y * w.transpose() - &cache.xc));
        }
    }
    let recon = mean_sq(&(&cache.xhat - &cache.xc));
    let mut out = GradResult::new(loss, recon, grad);
    out.floored = cache.floored;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RicaBeta {
    /// β = β₀·E‖x‖₂, which makes the solution invariant to input scale.
    Adaptive { beta0: f64 },
    Fixed { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RicaPenalty {
    L1,
    Logcosh,
}

fn logcosh(v: f64) -> f64 {
    let a = v.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub(crate) fn mean_row_norm(x: &Mat) -> f64 {
    x.row_iter().map(|r| r.norm()).sum::<f64>() / x.nrows().max(1) as f64
}

/// Subspace-form RICA: ½E‖x[W]_sg Wᵀ − x‖² + βE Σ g(y_j), g = |·| or log cosh.
/// Returns the gradient (x̂−x)ᵀy + β xᵀg'(y) as a batch mean.
pub fn rica_grad(x: &Mat, w: &Mat, beta: RicaBeta, penalty: RicaPenalty) -> Result<GradResult> {
    require_cols(x, w)?;
    let b = x.nrows() as f64;
    let beta = match beta {
        RicaBeta::Adaptive { beta0 } => {
            if !(beta0 > 0.0 && beta0 <= 1.0) {
                return invalid("beta0 must lie in (0, 1]");
            }
            beta0 * mean_row_norm(x)
        }
        RicaBeta::Fixed { beta } => {
            if !(beta >= 0.0) {
                return invalid("beta must be non-negative");
            }
            beta
        }
    };
    let y = x * w;
    let r = &y * w.transpose() - x;
    let (pen, dpen) = match penalty {
        RicaPenalty::L1 => (y.iter().map(|v| v.abs()).sum::<f64>(), y.map(sign0)),
        RicaPenalty::Logcosh => (y.iter().map(|v| logcosh(*v)).sum::<f64>(), y.map(f64::tanh)),
    };
    let grad = (r.transpose() * &y + x.transpose() * dpen * beta) / b;
    let recon = mean_sq(&r);
    Ok(GradResult::new(0.5 * recon + beta * pen / b, recon, grad))
}

pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SkewBeta {
    Const { beta: f64 },
    /// β = E‖x‖₂.
    InputNorm,
    /// β = 1 with h applied to yΣ⁻¹ and the term right-multiplied by Σ.
    SigmaComp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewForm {
    /// yᵀh(y) with its diagonal removed.
    Dediag,
    /// yᵀh(y) − h(y)ᵀy.
    Skew,
}

/// Subspace rule plus β·W·M with M the de-diagonalised or skew product of y
/// and h(y). Equals the gradient of ½E‖x[W]_sg Wᵀ − x‖² + β⟨W, [WM]_sg⟩.
pub fn skew_symmetric_grad(x: &Mat, w: &Mat, h: &NonlinearitySpec, beta_mode: SkewBeta, form: SkewForm) -> Result<GradResult> {
    require_cols(x, w)?;
    h.validate()?;
    let b = x.nrows() as f64;
    let y = x * w;
    let (beta, hy, sigma) = match beta_mode {
        SkewBeta::Const { beta } => (beta, h.eval(&y).0, None),
        SkewBeta::InputNorm => (mean_row_norm(x), h.eval(&y).0, None),
        SkewBeta::SigmaComp => {
            let (_, var) = crate::linalg::moment_stats(&y, crate::linalg::MomentMode::Batch)?;
            let (s, _) = crate::linalg::floored_std(&var);
            let z = scale_cols(&y, &s.map(|v| 1.0 / v));
            (1.0, h.eval(&z).0, Some(s))
        }
    };
    let yh = y.transpose() * &hy / b;
    let mut m = match form {
        SkewForm::Dediag => {
            let mut m = yh;
            m.fill_diagonal(0.0);
            m
        }
        SkewForm::Skew => &yh - yh.transpose(),
    };
    if let Some(s) = &sigma {
        m = scale_cols(&m, s);
    }
    let wm = w * &m;
    let c = mean_cross(x, &y);
    let gy = mean_cross(&y, &y);
    let grad = w * gy - c + &wm * beta;
    let r = &y * w.transpose() - x;
    let recon = mean_sq(&r);
    let loss = 0.5 * recon + beta * wm.component_mul(w).sum();
    Ok(GradResult::new(loss, recon, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonCentredVariant {
    /// ½E‖x − (h((xW−μ̄_y)/σ)σ + μ̄_y)[Wᵀ]_sg‖².
    Wrap,
    /// Centred loss plus ½‖μ̄_x − μ̄_xWWᵀ‖².
    Bound,
}

/// Non-centred σ-PCA. Batch means and σ are held constant; the encoder sees
/// the raw input, so the gradient is taken with respect to xW, not (x − μ̄)W.
pub fn noncentred_grad(model: &SigmaPcaModel, x: &Mat, variant: NonCentredVariant) -> Result<GradResult> {
    require_cols(x, &model.w)?;
    if matches!(model.mu_mode, MuMode::Precentred) {
        return invalid("non-centred variants need a batch or EMA mean");
    }
    let w = &model.w;
    let b = x.nrows() as f64;
    let mu_x = column_means(x);
    let y = x * w;
    let mu_y = w.tr_mul(&mu_x);
    let yc = sub_row(&y, &mu_y);
    let (sigma, floored) = model.sigma_for(&yc)?;
    let z = scale_cols(&yc, &sigma.map(|s| 1.0 / s));
    let (hz, dh) = model.nonlinearity.eval(&z);
    let hs = scale_cols(&hz, &sigma);
    let (r, extra_loss, extra_grad) = match variant {
        NonCentredVariant::Wrap => {
            let xhat = crate::linalg::add_row(&hs, &mu_y) * w.transpose();
            (xhat - x, 0.0, None)
        }
        NonCentredVariant::Bound => {
            let r = &hs * w.transpose() - sub_row(x, &mu_x);
            let m = Mat::from_row_slice(1, mu_x.len(), mu_x.as_slice());
            let mw = &m * w;
            let rm = &mw * w.transpose() - &m;
            let k = w.ncols();
            let p = w.nrows();
            let c = m.transpose() * &mw;
            let g = &c * (w.transpose() * w - Mat::identity(k, k)) + (w * w.transpose() - Mat::identity(p, p)) * &c;
            (r, 0.5 * rm.norm_squared(), Some(g))
        }
    };
    let mut grad = x.transpose() * (&r * w).component_mul(&dh) / b;
    if let Some(g) = extra_grad {
        grad += g;
    }
    let recon = mean_sq(&r);
    let mut out = GradResult::new(0.5 * recon + extra_loss, recon, grad);
    out.floored = floored;
    Ok(out)
}
