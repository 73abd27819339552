//! Central-difference checks of every closed-form gradient.
//!
//! Each case pairs an analytic gradient with an independently written loss in
//! which every stop-gradient factor and batch statistic is frozen at the
//! evaluation point. Update rules that are not the gradient of one loss are
//! checked against a sum of per-column losses, each differentiated in its own
//! column only.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{orth_reg_grad, unit_norm_reg_grad, weight_norm_map, OrthRegMode};
use crate::error::Result;
use crate::ica::{two_layer_nlpca_grad, TwoLayerModel};
use crate::linalg::{centre, gaussian_matrix, random_semi_orthogonal, scale_cols, strict_lower, strict_upper, upper, Mat, Vector};
use crate::linear_pca::{
    asymmetric_pca_loss_grad, gha_grad, linear_pca_grad, nested_dropout_with_cut, sample_nested_cut, weighted_subspace_grad,
    weighted_variance_grad, GhaVariant, LinearVariant, VarianceMode, WeightedVariant, WeightingSpec,
};
use crate::sigma_pca::{
    latent_recon_grad, noncentred_grad, rica_grad, sigma_pca_forward, sigma_pca_grad, skew_symmetric_grad, DecoderMode,
    LatentVariant, MuMode, NonCentredVariant, NonlinearitySpec, NormKind, Objective, Ordering, RicaBeta, RicaPenalty,
    SigmaMode, SigmaPcaModel, SkewBeta, SkewForm,
};

/// Step used by the suite.
pub const DEFAULT_H: f64 = 1e-6;
/// Pass threshold of the suite.
pub const DEFAULT_TOL: f64 = 1e-5;
/// Parameters with more entries than this are checked on a random subset.
pub const MAX_COORDS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Error of one coordinate relative to the larger of the two values, floored
/// at a thousandth of the largest gradient entry so near-zero entries are
/// judged on the gradient's own scale.
fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE)
}

/// Compares `analytic` with central differences (f(θ+h) − f(θ−h))/2h of `f`
/// at `at`. Large parameters are sampled down to [`MAX_COORDS`] coordinates.
pub fn grad_check(f: &dyn Fn(&Mat) -> f64, at: &Mat, analytic: &Mat, h: f64, seed: u64) -> CheckReport {
    assert_eq!(at.shape(), analytic.shape(), "gradient shape must match the parameters");
    let n = at.len();
    let coords: Vec<usize> = if n > MAX_COORDS {
        sample(&mut ChaCha8Rng::seed_from_u64(seed), n, MAX_COORDS).into_vec()
    } else {
        (0..n).collect()
    };
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&i| {
            let mut p = at.clone();
            p[i] += h;
            let up = f(&p);
            p[i] = at[i] - h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect();
    let scale = coords.iter().map(|&i| analytic[i].abs()).chain(numeric.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let max_rel_err = coords.iter().zip(&numeric).map(|(&i, &nv)| rel_err(analytic[i], nv, scale)).fold(0.0, f64::max);
    CheckReport { max_rel_err, coords: coords.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub h: f64,
    pub tol: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| !(c.max_rel_err <= self.tol)).collect()
    }

    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// One random problem: an 8×5 batch, a 5×3 weight matrix near orthonormal,
/// decreasing weights and positive per-component scales.
struct Instance {
    x: Mat,
    w: Mat,
    lam: WeightingSpec,
    sigma: Vector,
    seed: u64,
}

impl Instance {
    fn new(seed: u64) -> Result<Self> {
        let (b, p, k) = (8, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_matrix(b, p, &mut rng) * 1.5 + Mat::from_fn(b, p, |_, j| 0.3 * j as f64);
        let w = random_semi_orthogonal(p, k, seed ^ 0x9e37)? + gaussian_matrix(p, k, &mut rng) * 0.2;
        let lam = WeightingSpec::custom(Vector::from_vec(vec![1.0, 0.6, 0.25]))?;
        let sigma = Vector::from_fn(k, |i, _| 0.8 + 0.5 * i as f64);
        Ok(Self { x, w, lam, sigma, seed })
    }

    fn k(&self) -> usize {
        self.w.ncols()
    }

    fn b(&self) -> f64 {
        self.x.nrows() as f64
    }

    fn model(&self, a: f64) -> SigmaPcaModel {
        SigmaPcaModel::new(self.w.clone(), NonlinearitySpec::scaled_tanh(a))
    }
}

/// Point, analytic gradient and the frozen-factor loss of one check.
struct Check {
    at: Mat,
    analytic: Mat,
    loss: Box<dyn Fn(&Mat) -> f64>,
}

impl Check {
    fn new(at: &Mat, analytic: Mat, loss: impl Fn(&Mat) -> f64 + 'static) -> Self {
        Self { at: at.clone(), analytic, loss: Box::new(loss) }
    }
}

type CaseFn = fn(&Instance) -> Result<Check>;

/// Σ_i φ_i(W₀ with column i taken from W).
fn per_column(w0: &Mat, phi: impl Fn(usize, &Mat) -> f64 + 'static) -> impl Fn(&Mat) -> f64 + 'static {
    let w0 = w0.clone();
    move |w| {
        (0..w0.ncols())
            .map(|i| {
                let mut wi = w0.clone();
                wi.set_column(i, &w.column(i));
                phi(i, &wi)
            })
            .sum()
    }
}

fn apply_h(h: &NonlinearitySpec, z: &Mat) -> Mat {
    h.eval(z).0
}

fn inner(a: &Mat, b: &Mat) -> f64 {
    a.component_mul(b).sum()
}

fn lam_sqrt(lam: &WeightingSpec) -> Vector {
    lam.lambdas().map(f64::sqrt)
}

// ---- linear rules ----

fn linear_tied(t: &Instance) -> Result<Check> {
    let g = linear_pca_grad(&t.x, &t.w, LinearVariant::TiedFull)?.grad_w;
    let x = t.x.clone();
    let b = t.b();
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&x * w * w.transpose() - &x).norm_squared() / b))
}

fn linear_subspace(t: &Instance) -> Result<Check> {
    let g = linear_pca_grad(&t.x, &t.w, LinearVariant::Subspace)?.grad_w;
    let (x, y0, b) = (t.x.clone(), &t.x * &t.w, t.b());
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&y0 * w.transpose() - &x).norm_squared() / b))
}

fn linear_encoder_only(t: &Instance) -> Result<Check> {
    let g = linear_pca_grad(&t.x, &t.w, LinearVariant::EncoderOnly)?.grad_w;
    let (x, w0, b) = (t.x.clone(), t.w.clone(), t.b());
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&x * w * w0.transpose() - &x).norm_squared() / b))
}

/// φ_i = (1/λ_i)·½E‖y₀ D Wᵀ‖² − E[y₀ᵢ·x wᵢ] with D = I (v1) or Λ^½ (v3).
fn weighted_per_column(t: &Instance, variant: WeightedVariant) -> Result<Check> {
    let g = weighted_subspace_grad(&t.x, &t.w, &t.lam, variant)?.grad_w;
    let (x, b) = (t.x.clone(), t.b());
    let y0 = &t.x * &t.w;
    let lam = t.lam.lambdas().clone();
    let yd = match variant {
        WeightedVariant::V3 => scale_cols(&y0, &lam_sqrt(&t.lam)),
        _ => y0.clone(),
    };
    Ok(Check::new(&t.w, g, per_column(&t.w, move |i, wi| {
        let quad = 0.5 * (&yd * wi.transpose()).norm_squared() / b / lam[i];
        let lin = y0.column(i).dot(&(&x * wi.column(i))) / b;
        quad - lin
    })))
}

fn linear_v1(t: &Instance) -> Result<Check> {
    weighted_per_column(t, WeightedVariant::V1)
}

fn linear_v3(t: &Instance) -> Result<Check> {
    weighted_per_column(t, WeightedVariant::V3)
}

fn linear_v2(t: &Instance) -> Result<Check> {
    let g = weighted_subspace_grad(&t.x, &t.w, &t.lam, WeightedVariant::V2)?.grad_w;
    let (x, b, y0, sq) = (t.x.clone(), t.b(), &t.x * &t.w, lam_sqrt(&t.lam));
    Ok(Check::new(&t.w, g, move |w| {
        let y = &x * w;
        0.5 * ((&y0 * w.transpose() - &x).norm_squared() - scale_cols(&y, &sq).norm_squared() + y.norm_squared()) / b
    }))
}

fn linear_asymmetric(t: &Instance) -> Result<Check> {
    let g = asymmetric_pca_loss_grad(&t.x, &t.w, &t.lam, &t.sigma)?.grad_w;
    let (x, b, y0) = (t.x.clone(), t.b(), &t.x * &t.w);
    let (lam, s) = (t.lam.lambdas().clone(), t.sigma.clone());
    Ok(Check::new(&t.w, g, move |w| {
        let y = &x * w;
        let mut v = 0.5 * (&y0 * w.transpose() - &x).norm_squared() / b;
        for j in 0..w.ncols() {
            let n2 = w.column(j).norm_squared();
            v += 0.5 * (n2 * s[j] * s[j] * (lam[j] - 1.0) + y.column(j).norm_squared() / b * (1.0 - lam[j]));
        }
        v
    }))
}

/// ½E‖x − Σ_{j≤i} y₀ⱼ wⱼᵀ‖², only column i free.
fn gha_column_loss(x: &Mat, y0: &Mat, wi: &Mat, i: usize) -> f64 {
    let r = y0.columns(0, i + 1) * wi.columns(0, i + 1).transpose() - x;
    0.5 * r.norm_squared() / x.nrows() as f64
}

fn gha_plain(t: &Instance) -> Result<Check> {
    let g = gha_grad(&t.x, &t.w, GhaVariant::Plain)?.grad_w;
    let (x, y0) = (t.x.clone(), &t.x * &t.w);
    Ok(Check::new(&t.w, g, per_column(&t.w, move |i, wi| gha_column_loss(&x, &y0, wi, i))))
}

fn gha_with_encoder(t: &Instance) -> Result<Check> {
    let g = gha_grad(&t.x, &t.w, GhaVariant::WithEncoder)?.grad_w;
    let (x, y0, w0) = (t.x.clone(), &t.x * &t.w, t.w.clone());
    Ok(Check::new(&t.w, g, per_column(&t.w, move |i, wi| {
        // Encoder column i feeds the decoders j ≤ i, which stay frozen.
        let enc = &x * wi.columns(0, i + 1) * w0.columns(0, i + 1).transpose() - &x;
        gha_column_loss(&x, &y0, wi, i) + 0.5 * enc.norm_squared() / x.nrows() as f64
    })))
}

fn frozen_strict_gram(t: &Instance) -> Mat {
    let y0 = &t.x * &t.w;
    &t.w * strict_upper(&(y0.transpose() * &y0 / t.b()))
}

fn gha_plus_subspace(t: &Instance) -> Result<Check> {
    let g = gha_grad(&t.x, &t.w, GhaVariant::PlusSubspace)?.grad_w;
    let (x, b, y0, tri) = (t.x.clone(), t.b(), &t.x * &t.w, frozen_strict_gram(t));
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&y0 * w.transpose() - &x).norm_squared() / b + inner(w, &tri)))
}

fn gha_recon_combo(t: &Instance) -> Result<Check> {
    let g = gha_grad(&t.x, &t.w, GhaVariant::ReconCombo)?.grad_w;
    let (x, b, tri) = (t.x.clone(), t.b(), frozen_strict_gram(t));
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&x * w * w.transpose() - &x).norm_squared() / b + inner(w, &tri)))
}

fn nested_dropout(t: &Instance) -> Result<Check> {
    let k = t.k();
    let j = 1 + (t.seed as usize) % k;
    let g = nested_dropout_with_cut(&t.x, &t.w, j)?.grad_w;
    let (x, b) = (t.x.clone(), t.b());
    Ok(Check::new(&t.w, g, move |w| {
        let mut y = &x * w;
        y.columns_mut(j, k - j).fill(0.0);
        0.5 * (y * w.transpose() - &x).norm_squared() / b
    }))
}

fn weighted_variance_with(t: &Instance, lam: Vector, alpha: f64, mode: VarianceMode) -> Result<Check> {
    let g = weighted_variance_grad(&t.x, &t.w, &lam, alpha, mode, None)?.grad_w;
    let (x, b, sq) = (t.x.clone(), t.b(), lam.map(f64::sqrt));
    Ok(Check::new(&t.w, g, move |w| {
        let y = &x * w;
        0.5 * ((&y * w.transpose() - &x).norm_squared() - alpha * scale_cols(&y, &sq).norm_squared()) / b
    }))
}

fn weighted_variance_plus(t: &Instance) -> Result<Check> {
    weighted_variance_with(t, t.lam.lambdas().clone(), 1.0, VarianceMode::Fixed)
}

fn weighted_variance_minus(t: &Instance) -> Result<Check> {
    weighted_variance_with(t, t.lam.lambdas().clone(), -1.0, VarianceMode::Fixed)
}

fn weighted_variance_proportional(t: &Instance) -> Result<Check> {
    let y0 = &t.x * &t.w;
    let var = Vector::from_iterator(t.k(), y0.column_iter().map(|c| c.norm_squared() / t.b()));
    let frozen = &var / var.max();
    let g = weighted_variance_grad(&t.x, &t.w, &Vector::zeros(0), 1.0, VarianceMode::VarianceProportional, None)?.grad_w;
    let fixed = weighted_variance_with(t, frozen, 1.0, VarianceMode::Fixed)?;
    Ok(Check { analytic: g, ..fixed })
}

fn weighted_variance_stochastic(t: &Instance) -> Result<Check> {
    let (rho, alpha, k) = (0.6, 1.0, t.k());
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0xabc);
    let mut replay = rng.clone();
    let g = weighted_variance_grad(&t.x, &t.w, &Vector::zeros(k), alpha, VarianceMode::Stochastic { rho }, Some(&mut rng))?.grad_w;
    let cuts: Vec<usize> = (0..t.x.nrows()).map(|_| sample_nested_cut(k, rho, &mut replay)).collect();
    let (x, b) = (t.x.clone(), t.b());
    Ok(Check::new(&t.w, g, move |w| {
        let y = &x * w;
        let kept: f64 = cuts.iter().enumerate().map(|(r, &j)| (0..j).map(|c| y[(r, c)].powi(2)).sum::<f64>()).sum();
        0.5 * ((&y * w.transpose() - &x).norm_squared() - alpha * kept) / b
    }))
}

// ---- σ-PCA ----

/// Frozen pieces of one σ-PCA evaluation on precentred data.
struct Frozen {
    x: Mat,
    w0: Mat,
    sigma: Vector,
    h: NonlinearitySpec,
}

impl Frozen {
    fn of(model: &SigmaPcaModel, x: &Mat) -> Result<Self> {
        let cache = sigma_pca_forward(model, x)?;
        Ok(Self { x: x.clone(), w0: model.w.clone(), sigma: cache.sigma, h: model.nonlinearity })
    }

    fn hs(&self, w_enc: &Mat) -> Mat {
        let z = scale_cols(&(&self.x * w_enc), &self.sigma.map(|s| 1.0 / s));
        scale_cols(&apply_h(&self.h, &z), &self.sigma)
    }

    fn half_msq(&self, r: &Mat) -> f64 {
        0.5 * r.norm_squared() / self.x.nrows() as f64
    }

    /// ½E‖h(xW_e Σ⁻¹)Σ W_dᵀ − x‖².
    fn loss(&self, w_enc: &Mat, w_dec: &Mat) -> f64 {
        self.half_msq(&(self.hs(w_enc) * w_dec.transpose() - &self.x))
    }
}

fn sigma_check(t: &Instance, model: SigmaPcaModel, loss: impl Fn(&Frozen, &Mat) -> f64 + 'static) -> Result<Check> {
    let g = sigma_pca_grad(&model, &t.x, None)?.grad_w;
    let fz = Frozen::of(&model, &t.x)?;
    Ok(Check::new(&t.w, g, move |w| loss(&fz, w)))
}

fn sigma_stopgrad(t: &Instance) -> Result<Check> {
    sigma_check(t, t.model(1.5), |f, w| f.loss(w, &f.w0))
}

fn sigma_hard_tanh(t: &Instance) -> Result<Check> {
    let model = SigmaPcaModel::new(t.w.clone(), NonlinearitySpec::hard_tanh(1.2));
    sigma_check(t, model, |f, w| f.loss(w, &f.w0))
}

fn sigma_full(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.decoder_mode = DecoderMode::Full;
    sigma_check(t, m, |f, w| f.loss(w, w))
}

fn sigma_encoder_scaled(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.decoder_mode = DecoderMode::EncoderScaled;
    sigma_check(t, m, |f, w| {
        let w_enc = &f.w0 + scale_cols(&(w - &f.w0), &f.sigma);
        f.loss(&w_enc, &f.w0) + f.loss(&f.w0, w)
    })
}

fn sigma_rescaled(t: &Instance, norm: NormKind) -> Result<Check> {
    let mut m = t.model(1.5);
    m.decoder_mode = DecoderMode::Rescaled { norm };
    sigma_check(t, m, move |f, w| f.loss(w, &f.w0) + f.loss(&f.w0, w) / norm.of_diag(&f.sigma))
}

fn sigma_rescaled_spectral(t: &Instance) -> Result<Check> {
    sigma_rescaled(t, NormKind::Spectral)
}

fn sigma_rescaled_frobenius(t: &Instance) -> Result<Check> {
    sigma_rescaled(t, NormKind::Frobenius)
}

fn sigma_rescaled_nuclear(t: &Instance) -> Result<Check> {
    sigma_rescaled(t, NormKind::Nuclear)
}

fn sigma_dropped(t: &Instance, drop_derivative: bool) -> Result<Check> {
    let mut m = t.model(1.5);
    m.decoder_mode = DecoderMode::SigmaDropped { drop_derivative };
    sigma_check(t, m, move |f, w| {
        let w_dec = &f.w0 + scale_cols(&(w - &f.w0), &f.sigma.map(|s| 1.0 / s));
        let enc = if drop_derivative {
            // h linearised around the evaluation point: its derivative is 1.
            let z0 = scale_cols(&(&f.x * &f.w0), &f.sigma.map(|s| 1.0 / s));
            let z = scale_cols(&(&f.x * w), &f.sigma.map(|s| 1.0 / s));
            let lin = apply_h(&f.h, &z0) + (z - z0);
            f.half_msq(&(scale_cols(&lin, &f.sigma) * f.w0.transpose() - &f.x))
        } else {
            f.loss(w, &f.w0)
        };
        enc + f.loss(&f.w0, &w_dec)
    })
}

fn sigma_dropped_keep(t: &Instance) -> Result<Check> {
    sigma_dropped(t, false)
}

fn sigma_dropped_linearised(t: &Instance) -> Result<Check> {
    sigma_dropped(t, true)
}

fn sigma_conventional(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.objective = Objective::Conventional;
    sigma_check(t, m, |f, w| f.half_msq(&(apply_h(&f.h, &(&f.x * w)) * f.w0.transpose() - &f.x)))
}

fn sigma_compensation(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.compensation = Some(0.5);
    sigma_check(t, m, |f, w| f.loss(w, &f.w0) + 0.5 * f.half_msq(&(&f.x * w * f.w0.transpose() - &f.x)))
}

fn trainable_model(t: &Instance) -> SigmaPcaModel {
    let mut m = t.model(1.5);
    m.sigma_mode = SigmaMode::Trainable { values: t.sigma.clone(), l2: 1e-2 };
    m
}

fn sigma_trainable_w(t: &Instance) -> Result<Check> {
    sigma_check(t, trainable_model(t), |f, w| f.loss(w, &f.w0))
}

fn sigma_trainable_sigma(t: &Instance) -> Result<Check> {
    let m = trainable_model(t);
    let g = sigma_pca_grad(&m, &t.x, None)?.grad_sigma.expect("trainable σ returns its gradient");
    let (x, w0, h) = (t.x.clone(), t.w.clone(), m.nonlinearity);
    let at = Mat::from_column_slice(t.k(), 1, t.sigma.as_slice());
    Ok(Check::new(&at, Mat::from_column_slice(t.k(), 1, g.as_slice()), move |s| {
        let sv = s.column(0).into_owned();
        let fz = Frozen { x: x.clone(), w0: w0.clone(), sigma: sv.clone(), h };
        fz.loss(&w0, &w0) + 1e-2 * sv.norm_squared()
    }))
}

fn sigma_projective_deflation(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.ordering = Ordering::ProjectiveDeflation;
    sigma_check(t, m, |f, w| {
        let k = w.ncols();
        let p = Mat::identity(k, k) - strict_lower(&(w.transpose() * &f.w0));
        let z = scale_cols(&(&f.x * w * p), &f.sigma.map(|s| 1.0 / s));
        f.half_msq(&(scale_cols(&apply_h(&f.h, &z), &f.sigma) * f.w0.transpose() - &f.x))
    })
}

fn sigma_triangular(t: &Instance, variant: u8) -> Result<Check> {
    let mut m = t.model(1.5);
    m.ordering = Ordering::Triangular { variant };
    let fz = Frozen::of(&m, &t.x)?;
    let y = &t.x * &t.w;
    let z = scale_cols(&y, &fz.sigma.map(|s| 1.0 / s));
    let hz = apply_h(&fz.h, &z);
    let prod = match variant {
        1 => scale_cols(&hz, &fz.sigma).transpose() * &hz,
        2 => scale_cols(&(hz.transpose() * &hz), &fz.sigma),
        3 => hz.transpose() * &y,
        4 => y.transpose() * &hz,
        5 => z.transpose() * &y,
        _ => y.transpose() * &z,
    };
    let tri = &t.w * strict_upper(&(prod / t.b()));
    sigma_check(t, m, move |f, w| f.loss(w, &f.w0) + inner(w, &tri))
}

fn sigma_triangular_1(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 1)
}
fn sigma_triangular_2(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 2)
}
fn sigma_triangular_3(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 3)
}
fn sigma_triangular_4(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 4)
}
fn sigma_triangular_5(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 5)
}
fn sigma_triangular_6(t: &Instance) -> Result<Check> {
    sigma_triangular(t, 6)
}

/// The Λ-weighted latent rule: linear in h with the latent error frozen.
fn sigma_weighted_latent(t: &Instance) -> Result<Check> {
    let mut m = t.model(1.5);
    m.ordering = Ordering::WeightedLatent { weights: t.lam.clone() };
    let fz = Frozen::of(&m, &t.x)?;
    let lam = t.lam.lambdas();
    let y0 = &t.x * &t.w;
    let d0 = scale_cols(&fz.hs(&t.w), lam) * (t.w.transpose() * &t.w) - scale_cols(&y0, lam);
    let weight = scale_cols(&d0, &fz.sigma);
    sigma_check(t, m, move |f, w| {
        let z = scale_cols(&(&f.x * w), &f.sigma.map(|s| 1.0 / s));
        inner(&apply_h(&f.h, &z), &weight) / f.x.nrows() as f64
    })
}

fn sigma_nested(t: &Instance) -> Result<Check> {
    let beta = 0.1;
    let mut m = t.model(1.5);
    m.ordering = Ordering::Nested { rho: 0.5, orth_strength: beta };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let r = sigma_pca_grad(&m, &t.x, Some(&mut rng))?;
    let j = r.mask_cut.expect("nested ordering records its cut");
    let fz = Frozen::of(&m, &t.x)?;
    let k = t.k();
    Ok(Check::new(&t.w, r.grad_w, move |w| {
        let mut hs = fz.hs(w);
        hs.columns_mut(j, k - j).fill(0.0);
        let gram = w.transpose() * w - Mat::identity(k, k);
        fz.half_msq(&(hs * fz.w0.transpose() - &fz.x)) + beta * gram.norm_squared()
    }))
}

fn latent_check(t: &Instance, variant: LatentVariant) -> Result<Check> {
    let m = t.model(1.5);
    let g = latent_recon_grad(&m, &t.x, variant)?.grad_w;
    let fz = Frozen::of(&m, &t.x)?;
    let k = t.k();
    let gram0 = t.w.transpose() * &t.w;
    let kmat = match variant {
        LatentVariant::WtwSymreg { .. } => gram0,
        LatentVariant::TriWtwSymreg { .. } => upper(&gram0),
        _ => Mat::identity(k, k),
    };
    let y0 = &t.x * &t.w;
    Ok(Check::new(&t.w, g, move |w| {
        let base = fz.half_msq(&(fz.hs(w) * &kmat - &y0));
        match variant {
            LatentVariant::WtwSymreg { beta } | LatentVariant::TriWtwSymreg { beta } | LatentVariant::PlainOrthreg { beta } => {
                base + beta * (w.transpose() * w - Mat::identity(k, k)).norm_squared()
            }
            LatentVariant::PlusLinear => base + fz.half_msq(&(&fz.x * w * fz.w0.transpose() - &fz.x)),
        }
    }))
}

fn latent_wtw(t: &Instance) -> Result<Check> {
    latent_check(t, LatentVariant::WtwSymreg { beta: 0.7 })
}
fn latent_tri_wtw(t: &Instance) -> Result<Check> {
    latent_check(t, LatentVariant::TriWtwSymreg { beta: 0.7 })
}
fn latent_plain(t: &Instance) -> Result<Check> {
    latent_check(t, LatentVariant::PlainOrthreg { beta: 10.0 })
}
fn latent_plus_linear(t: &Instance) -> Result<Check> {
    latent_check(t, LatentVariant::PlusLinear)
}

fn rica_check(t: &Instance, beta: RicaBeta, penalty: RicaPenalty) -> Result<Check> {
    let g = rica_grad(&t.x, &t.w, beta, penalty)?.grad_w;
    let b = t.b();
    let mean_norm = t.x.row_iter().map(|r| r.norm()).sum::<f64>() / b;
    let beta = match beta {
        RicaBeta::Adaptive { beta0 } => beta0 * mean_norm,
        RicaBeta::Fixed { beta } => beta,
    };
    let (x, y0) = (t.x.clone(), &t.x * &t.w);
    Ok(Check::new(&t.w, g, move |w| {
        let y = &x * w;
        let pen: f64 = match penalty {
            RicaPenalty::L1 => y.iter().map(|v| v.abs()).sum(),
            RicaPenalty::Logcosh => y.iter().map(|v| v.cosh().ln()).sum(),
        };
        0.5 * (&y0 * w.transpose() - &x).norm_squared() / b + beta * pen / b
    }))
}

fn rica_l1(t: &Instance) -> Result<Check> {
    rica_check(t, RicaBeta::Adaptive { beta0: 0.3 }, RicaPenalty::L1)
}
fn rica_logcosh(t: &Instance) -> Result<Check> {
    rica_check(t, RicaBeta::Fixed { beta: 0.8 }, RicaPenalty::Logcosh)
}

fn skew_check(t: &Instance, beta_mode: SkewBeta, form: SkewForm) -> Result<Check> {
    let h = NonlinearitySpec::scaled_tanh(1.0);
    let g = skew_symmetric_grad(&t.x, &t.w, &h, beta_mode, form)?.grad_w;
    let b = t.b();
    let y0 = &t.x * &t.w;
    let (beta, hy, sigma) = match beta_mode {
        SkewBeta::Const { beta } => (beta, apply_h(&h, &y0), None),
        SkewBeta::InputNorm => (t.x.row_iter().map(|r| r.norm()).sum::<f64>() / b, apply_h(&h, &y0), None),
        SkewBeta::SigmaComp => {
            let (yc, _) = centre(&y0);
            let s = Vector::from_iterator(t.k(), yc.column_iter().map(|c| (c.norm_squared() / b).sqrt()));
            (1.0, apply_h(&h, &scale_cols(&y0, &s.map(|v| 1.0 / v))), Some(s))
        }
    };
    let yh = y0.transpose() * hy / b;
    let mut m = match form {
        SkewForm::Dediag => {
            let mut m = yh;
            m.fill_diagonal(0.0);
            m
        }
        SkewForm::Skew => &yh - yh.transpose(),
    };
    if let Some(s) = sigma {
        m = scale_cols(&m, &s);
    }
    let frozen = &t.w * m * beta;
    let x = t.x.clone();
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&y0 * w.transpose() - &x).norm_squared() / b + inner(w, &frozen)))
}

fn skew_dediag_const(t: &Instance) -> Result<Check> {
    skew_check(t, SkewBeta::Const { beta: 0.4 }, SkewForm::Dediag)
}
fn skew_skew_input_norm(t: &Instance) -> Result<Check> {
    skew_check(t, SkewBeta::InputNorm, SkewForm::Skew)
}
fn skew_dediag_sigma(t: &Instance) -> Result<Check> {
    skew_check(t, SkewBeta::SigmaComp, SkewForm::Dediag)
}

fn noncentred_check(t: &Instance, variant: NonCentredVariant) -> Result<Check> {
    let mut m = t.model(1.5);
    m.mu_mode = MuMode::Batch;
    let g = noncentred_grad(&m, &t.x, variant)?.grad_w;
    let b = t.b();
    let mu_x = Vector::from_iterator(t.x.ncols(), t.x.column_iter().map(|c| c.mean()));
    let mu_y = t.w.tr_mul(&mu_x);
    let (yc, _) = centre(&(&t.x * &t.w));
    let sigma = Vector::from_iterator(t.k(), yc.column_iter().map(|c| (c.norm_squared() / b).sqrt()));
    let (x, w0, h) = (t.x.clone(), t.w.clone(), m.nonlinearity);
    Ok(Check::new(&t.w, g, move |w| {
        let mut y = &x * w;
        for mut row in y.row_iter_mut() {
            row -= mu_y.transpose();
        }
        let hs = scale_cols(&apply_h(&h, &scale_cols(&y, &sigma.map(|s| 1.0 / s))), &sigma);
        match variant {
            NonCentredVariant::Wrap => {
                let mut lat = hs;
                for mut row in lat.row_iter_mut() {
                    row += mu_y.transpose();
                }
                0.5 * (lat * w0.transpose() - &x).norm_squared() / b
            }
            NonCentredVariant::Bound => {
                let mut xc = x.clone();
                for mut row in xc.row_iter_mut() {
                    row -= mu_x.transpose();
                }
                let m = mu_x.transpose();
                0.5 * (hs * w0.transpose() - xc).norm_squared() / b + 0.5 * (&m * w * w.transpose() - &m).norm_squared()
            }
        }
    }))
}

fn noncentred_wrap(t: &Instance) -> Result<Check> {
    noncentred_check(t, NonCentredVariant::Wrap)
}
fn noncentred_bound(t: &Instance) -> Result<Check> {
    noncentred_check(t, NonCentredVariant::Bound)
}

// ---- two-layer ICA ----

fn two_layer_model(t: &Instance) -> Result<TwoLayerModel> {
    let v = random_semi_orthogonal(t.k(), t.k(), t.seed ^ 0x77)? + Mat::from_fn(t.k(), t.k(), |i, j| 0.05 * (i + 2 * j) as f64);
    TwoLayerModel::new(t.model(1.5), v, NonlinearitySpec::scaled_tanh(0.8))
}

fn two_layer_v(t: &Instance) -> Result<Check> {
    let m = two_layer_model(t)?;
    let g = two_layer_nlpca_grad(&m, &t.x)?.grad_v;
    let b = t.b();
    let y = &t.x * &t.w;
    let (yc, _) = centre(&y);
    let sigma = Vector::from_iterator(t.k(), yc.column_iter().map(|c| (c.norm_squared() / b).sqrt()));
    let u = scale_cols(&y, &sigma.map(|s| 1.0 / s));
    let h = m.v_nonlinearity;
    Ok(Check::new(&m.v, g, move |v| 0.5 * (apply_h(&h, &(&u * v)) * v.transpose() - &u).norm_squared() / b))
}

fn two_layer_w(t: &Instance) -> Result<Check> {
    let m = two_layer_model(t)?;
    let g = two_layer_nlpca_grad(&m, &t.x)?.w.grad_w;
    let fz = Frozen::of(&m.sigma_model, &t.x)?;
    Ok(Check::new(&t.w, g, move |w| fz.loss(w, &fz.w0)))
}

// ---- constraint terms ----

fn reg_symmetric(t: &Instance) -> Result<Check> {
    let alpha = 0.3;
    let g = orth_reg_grad(&t.w, OrthRegMode::Symmetric { alpha })?;
    let k = t.k();
    Ok(Check::new(&t.w, g, move |w| alpha * (Mat::identity(k, k) - w.transpose() * w).norm_squared()))
}

fn reg_asymmetric(t: &Instance) -> Result<Check> {
    let beta = 0.9;
    let g = orth_reg_grad(&t.w, OrthRegMode::Asymmetric { beta })?;
    let w0 = t.w.clone();
    Ok(Check::new(&t.w, g, move |w| 0.5 * beta * strict_upper(&(w0.transpose() * w)).norm_squared()))
}

fn reg_asymmetric_sigma(t: &Instance) -> Result<Check> {
    let beta = 0.9;
    let g = orth_reg_grad(&t.w, OrthRegMode::AsymmetricSigma { beta, sigma_hat: &t.sigma })?;
    let ws0 = scale_cols(&t.w, &t.sigma);
    Ok(Check::new(&t.w, g, move |w| 0.5 * beta * strict_upper(&(ws0.transpose() * w)).norm_squared()))
}

fn reg_encoder_implicit(t: &Instance) -> Result<Check> {
    let g = orth_reg_grad(&t.w, OrthRegMode::EncoderImplicit { x: &t.x })?;
    let (x, w0, b) = (t.x.clone(), t.w.clone(), t.b());
    Ok(Check::new(&t.w, g, move |w| 0.5 * (&x * w * w0.transpose() - &x).norm_squared() / b))
}

fn reg_unit_norm(t: &Instance) -> Result<Check> {
    let s = 2.0;
    let g = unit_norm_reg_grad(&t.w, s);
    Ok(Check::new(&t.w, g, move |w| 0.5 * s * w.column_iter().map(|c| (c.norm() - 1.0).powi(2)).sum::<f64>()))
}

fn weight_norm(t: &Instance) -> Result<Check> {
    let v = &t.w * 1.7;
    let (w, back) = weight_norm_map(&v)?;
    let g = back.apply(&linear_pca_grad(&t.x, &w, LinearVariant::TiedFull)?.grad_w);
    let (x, b) = (t.x.clone(), t.b());
    Ok(Check::new(&v, g, move |v| {
        let mut w = v.clone();
        for mut c in w.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        0.5 * (&x * &w * w.transpose() - &x).norm_squared() / b
    }))
}

/// Names of every case, as `module.op_variant`.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("linear.tied_full", linear_tied as CaseFn),
        ("linear.subspace", linear_subspace),
        ("linear.encoder_only", linear_encoder_only),
        ("linear.weighted_v1", linear_v1),
        ("linear.weighted_v2", linear_v2),
        ("linear.weighted_v3", linear_v3),
        ("linear.asymmetric_loss", linear_asymmetric),
        ("linear.gha_plain", gha_plain),
        ("linear.gha_with_encoder", gha_with_encoder),
        ("linear.gha_plus_subspace", gha_plus_subspace),
        ("linear.gha_recon_combo", gha_recon_combo),
        ("linear.nested_dropout", nested_dropout),
        ("linear.weighted_variance_max", weighted_variance_plus),
        ("linear.weighted_variance_min", weighted_variance_minus),
        ("linear.weighted_variance_proportional", weighted_variance_proportional),
        ("linear.weighted_variance_stochastic", weighted_variance_stochastic),
        ("sigma.stopgrad", sigma_stopgrad),
        ("sigma.stopgrad_hard_tanh", sigma_hard_tanh),
        ("sigma.full_decoder", sigma_full),
        ("sigma.encoder_scaled", sigma_encoder_scaled),
        ("sigma.rescaled_spectral", sigma_rescaled_spectral),
        ("sigma.rescaled_frobenius", sigma_rescaled_frobenius),
        ("sigma.rescaled_nuclear", sigma_rescaled_nuclear),
        ("sigma.sigma_dropped", sigma_dropped_keep),
        ("sigma.sigma_dropped_linearised", sigma_dropped_linearised),
        ("sigma.conventional", sigma_conventional),
        ("sigma.compensation", sigma_compensation),
        ("sigma.trainable_w", sigma_trainable_w),
        ("sigma.trainable_sigma", sigma_trainable_sigma),
        ("sigma.projective_deflation", sigma_projective_deflation),
        ("sigma.triangular_1", sigma_triangular_1),
        ("sigma.triangular_2", sigma_triangular_2),
        ("sigma.triangular_3", sigma_triangular_3),
        ("sigma.triangular_4", sigma_triangular_4),
        ("sigma.triangular_5", sigma_triangular_5),
        ("sigma.triangular_6", sigma_triangular_6),
        ("sigma.weighted_latent", sigma_weighted_latent),
        ("sigma.nested", sigma_nested),
        ("sigma.latent_wtw", latent_wtw),
        ("sigma.latent_tri_wtw", latent_tri_wtw),
        ("sigma.latent_plain_orthreg", latent_plain),
        ("sigma.latent_plus_linear", latent_plus_linear),
        ("sigma.rica_l1", rica_l1),
        ("sigma.rica_logcosh", rica_logcosh),
        ("sigma.skew_dediag", skew_dediag_const),
        ("sigma.skew_full", skew_skew_input_norm),
        ("sigma.skew_sigma_comp", skew_dediag_sigma),
        ("sigma.noncentred_wrap", noncentred_wrap),
        ("sigma.noncentred_bound", noncentred_bound),
        ("ica.two_layer_rotation", two_layer_v),
        ("ica.two_layer_sigma", two_layer_w),
        ("constraints.symmetric_reg", reg_symmetric),
        ("constraints.asymmetric_reg", reg_asymmetric),
        ("constraints.asymmetric_sigma_reg", reg_asymmetric_sigma),
        ("constraints.encoder_implicit", reg_encoder_implicit),
        ("constraints.unit_norm_reg", reg_unit_norm),
        ("constraints.weight_norm", weight_norm),
    ]
}

/// Runs every case on `instances` random problems derived from `seed`.
pub fn run_suite(instances: usize, h: f64, tol: f64, seed: u64) -> Result<SuiteReport> {
    let problems = (0..instances as u64).map(|i| Instance::new(seed.wrapping_add(i))).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for (name, case) in cases() {
        let mut worst: f64 = 0.0;
        for t in &problems {
            let c = case(t)?;
            let r = grad_check(&*c.loss, &c.at, &c.analytic, h, t.seed);
            worst = if r.max_rel_err.is_nan() { f64::NAN } else { worst.max(r.max_rel_err) };
        }
        reports.push(CaseReport { name: name.to_string(), instances, max_rel_err: worst });
    }
    Ok(SuiteReport { h, tol, cases: reports })
}
