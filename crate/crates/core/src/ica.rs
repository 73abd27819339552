//! Linear ICA: PCA whitening, symmetric FastICA, the two-stage pipeline, the
//! two-layer σ-PCA model, EASI updates and reordering by unmixing norm.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{orthogonalize, OrthMethod, Orthogonality};
use crate::error::{check_shape, invalid, Error, Result};
use crate::grad::{mean_sq, GradResult};
use crate::linalg::{
    col_norms, mean_cross, pca_fit_svd, scale_cols, semi_orthogonal_from_rng, sub_row, DataMatrix, Mat, Vector,
};
use crate::sigma_pca::{sigma_pca_grad, NonlinearitySpec, Objective, SigmaPcaModel};
use crate::train::{train, Step, TrainConfig, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    /// (X − μ)·A, n×k with identity batch covariance.
    pub z: Mat,
    /// W·Σ⁻¹, p×k.
    pub a: Mat,
    pub w: Mat,
    pub sigma: Vector,
    pub mean: Vector,
}

/// Smallest retained standard deviation accepted by the whitening.
const MIN_WHITEN_STD: f64 = 1e-10;

pub fn whiten_pca(x: &DataMatrix, k: usize) -> Result<Whitening> {
    if x.n() <= k {
        return invalid(format!("whitening needs more rows ({}) than components ({k})", x.n()));
    }
    let basis = pca_fit_svd(x, k)?;
    if let Some(i) = basis.sigma.iter().position(|s| *s <= MIN_WHITEN_STD * basis.sigma[0].max(1.0)) {
        return Err(Error::ZeroVariance(i));
    }
    let a = scale_cols(&basis.w, &basis.sigma.map(|s| 1.0 / s));
    let z = sub_row(x.values(), &basis.mean) * &a;
    Ok(Whitening { z, a, w: basis.w, sigma: basis.sigma, mean: basis.mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// g = tanh.
    Logcosh,
    /// g = u³.
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastIcaConfig {
    pub contrast: Contrast,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FastIcaConfig {
    fn default() -> Self {
        Self { contrast: Contrast::Logcosh, tol: 1e-6, max_iter: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastIcaResult {
    pub v: Mat,
    pub converged: bool,
    pub iterations: usize,
}

fn symmetric_decorrelate(v: &Mat) -> Result<Mat> {
    Ok(orthogonalize(v, OrthMethod::Iterative { beta: 0.5, max_iter: 200, tol: 1e-12 })?.w)
}

/// Symmetric fixed-point FastICA on whitened data.
pub fn fastica(z: &Mat, config: &FastIcaConfig) -> Result<FastIcaResult> {
    let k = z.ncols();
    if z.nrows() < 2 || k == 0 {
        return invalid("FastICA needs at least two rows and one column");
    }
    if !(config.tol > 0.0) || config.max_iter == 0 {
        return invalid("FastICA needs tol > 0 and max_iter >= 1");
    }
    let n = z.nrows() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut v = semi_orthogonal_from_rng(k, k, &mut rng);
    for it in 1..=config.max_iter {
        let u = z * &v;
        let (g, dg) = match config.contrast {
            Contrast::Logcosh => {
                let t = u.map(f64::tanh);
                let d = t.map(|t| 1.0 - t * t);
                (t, d)
            }
            Contrast::Cube => (u.map(|v| v * v * v), u.map(|v| 3.0 * v * v)),
        };
        let mean_dg = Vector::from_iterator(k, dg.column_iter().map(|c| c.sum() / n));
        let next = z.transpose() * g / n - scale_cols(&v, &mean_dg);
        let next = symmetric_decorrelate(&next)?;
        let change = 1.0 - (v.transpose() * &next).diagonal().iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        v = next;
        if change < config.tol {
            return Ok(FastIcaResult { v, converged: true, iterations: it });
        }
    }
    Ok(FastIcaResult { v, converged: false, iterations: config.max_iter })
}

/// Columns of B scaled to unit norm, with σ_est,i = 1/‖b_i‖, all reordered by
/// descending σ_est (stable for ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmixingOrder {
    pub b_unit: Mat,
    /// `order[i]` is the original column placed at position i.
    pub order: Vec<usize>,
    pub sigma_est: Vector,
}

pub fn order_by_unmixing_norm(b: &Mat) -> Result<UnmixingOrder> {
    let norms = col_norms(b);
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::DegenerateColumn { index: i, norm: norms[i] });
    }
    let sigma = norms.map(|n| 1.0 / n);
    let order = crate::sigma_pca::descending_order(&sigma);
    let b_unit = Mat::from_fn(b.nrows(), b.ncols(), |r, c| b[(r, order[c])] / norms[order[c]]);
    let sigma_est = Vector::from_iterator(order.len(), order.iter().map(|&i| sigma[i]));
    Ok(UnmixingOrder { b_unit, order, sigma_est })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaResult {
    /// Overall unmixing W·Σ⁻¹·V, p×k.
    pub b: Mat,
    pub w: Mat,
    pub sigma: Vector,
    pub v: Mat,
    pub mean: Vector,
    pub normalized: UnmixingOrder,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaResult {
    fn assemble(w: Mat, sigma: Vector, v: Mat, mean: Vector, converged: bool, iterations: usize) -> Result<Self> {
        let b = scale_cols(&w, &sigma.map(|s| 1.0 / s)) * &v;
        let normalized = order_by_unmixing_norm(&b)?;
        Ok(Self { b, w, sigma, v, mean, normalized, converged, iterations })
    }

    /// Recovered sources (X − μ)·B.
    pub fn sources(&self, x: &DataMatrix) -> Mat {
        sub_row(x.values(), &self.mean) * &self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RotationMethod {
    FastIca { config: FastIcaConfig },
    /// Conventional nonlinear PCA (Σ = I) on the whitened data with an
    /// orthogonal rotation kept by iterative projection.
    ConventionalNlpca { nonlinearity: NonlinearitySpec, train: TrainConfig },
}

pub fn two_stage_ica(x: &DataMatrix, k: usize, method: &RotationMethod) -> Result<IcaResult> {
    let wh = whiten_pca(x, k)?;
    let (v, converged, iterations) = match method {
        RotationMethod::FastIca { config } => {
            let r = fastica(&wh.z, config)?;
            (r.v, r.converged, r.iterations)
        }
        RotationMethod::ConventionalNlpca { nonlinearity, train: cfg } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = SigmaPcaModel::new(semi_orthogonal_from_rng(k, k, &mut rng), *nonlinearity);
            model.objective = Objective::Conventional;
            let mut cfg = *cfg;
            if matches!(cfg.constraints.orthogonality, Orthogonality::None) {
                cfg.constraints.orthogonality = Orthogonality::iterative_default();
            }
            let out = train(model, &DataMatrix::new(wh.z.clone())?, &cfg)?;
            let v = symmetric_decorrelate(&out.model.w)?;
            (v, true, out.steps)
        }
    };
    IcaResult::assemble(wh.w, wh.sigma, v, wh.mean, converged, iterations)
}

/// σ-PCA layer W plus an orthogonal rotation V trained on x[WΣ⁻¹]_sg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerModel {
    pub sigma_model: SigmaPcaModel,
    pub v: Mat,
    pub v_nonlinearity: NonlinearitySpec,
}

impl TwoLayerModel {
    pub fn new(sigma_model: SigmaPcaModel, v: Mat, v_nonlinearity: NonlinearitySpec) -> Result<Self> {
        let k = sigma_model.k();
        check_shape(v.shape() == (k, k), || format!("V must be {k}x{k}, got {:?}", v.shape()))?;
        Ok(Self { sigma_model, v, v_nonlinearity })
    }

    /// Batch whitened input u = (x − μ)WΣ⁻¹ with σ from the batch.
    fn whitened(&self, x: &Mat) -> Result<(Mat, bool)> {
        let m = &self.sigma_model;
        let mu = match m.mu_mode {
            crate::sigma_pca::MuMode::Precentred => Vector::zeros(x.ncols()),
            _ => crate::linalg::column_means(x),
        };
        let y = sub_row(x, &mu) * &m.w;
        let (sigma, floored) = m.sigma_for(&crate::linalg::centre(&y).0)?;
        Ok((scale_cols(&y, &sigma.map(|s| 1.0 / s)), floored))
    }

    /// Result with σ estimated on the full data set.
    pub fn result(&self, x: &DataMatrix) -> Result<IcaResult> {
        let sigma = self.sigma_model.estimate_sigma(x);
        let mean = x.column_means();
        let v = symmetric_decorrelate(&self.v)?;
        IcaResult::assemble(self.sigma_model.w.clone(), sigma, v, mean, true, 0)
    }
}

/// Loss and gradients of the two-layer objective on one batch.
#[derive(Debug, Clone)]
pub struct TwoLayerGrad {
    /// σ-PCA term for W; its loss includes the rotation term.
    pub w: GradResult,
    pub grad_v: Mat,
    pub loss_v: f64,
}

/// W sees only the σ-PCA term. V sees ½E‖u − h(uV)Vᵀ‖² with u = x[WΣ⁻¹]_sg,
/// differentiated through both encoder and decoder.
pub fn two_layer_nlpca_grad(model: &TwoLayerModel, x: &Mat) -> Result<TwoLayerGrad> {
    let mut gw = sigma_pca_grad(&model.sigma_model, x, None)?;
    let (u, _) = model.whitened(x)?;
    let b = x.nrows() as f64;
    let uv = &u * &model.v;
    let (h, dh) = model.v_nonlinearity.eval(&uv);
    let r = &h * model.v.transpose() - &u;
    let loss_v = 0.5 * mean_sq(&r);
    let grad_v = u.transpose() * (&r * &model.v).component_mul(&dh) / b + mean_cross(&r, &h);
    gw.loss += loss_v;
    Ok(TwoLayerGrad { w: gw, grad_v, loss_v })
}

impl Trainable for TwoLayerModel {
    fn weights(&self) -> &Mat {
        &self.sigma_model.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.sigma_model.w
    }
    fn update_stats(&mut self, x: &Mat) -> Result<()> {
        self.sigma_model.update_stats(x)
    }
    fn grad(&self, x: &Mat, _rng: &mut ChaCha8Rng) -> Result<Step> {
        let g = two_layer_nlpca_grad(self, x)?;
        Ok(Step { result: g.w, aux_grad: Some(g.grad_v) })
    }
    fn aux(&self) -> Option<Mat> {
        Some(self.v.clone())
    }
    fn set_aux(&mut self, aux: Mat) {
        self.v = aux;
    }
    fn post_step(&mut self) -> Result<()> {
        self.v = symmetric_decorrelate(&self.v)?;
        Ok(())
    }
}

/// One EASI update W − ηW(E[yᵀy] − I + E[yᵀh(y)] − E[h(y)ᵀy]).
pub fn easi_step(w: &Mat, y: &Mat, h: &NonlinearitySpec, eta: f64) -> Result<Mat> {
    easi_update(w, y, &h.eval(y).0, eta)
}

fn easi_update(w: &Mat, y: &Mat, hy: &Mat, eta: f64) -> Result<Mat> {
    let k = w.nrows();
    check_shape(w.ncols() == k, || "EASI needs a square W".into())?;
    check_shape(y.ncols() == k, || format!("batch has {} columns, W is {k}x{k}", y.ncols()))?;
    if y.nrows() == 0 {
        return invalid("empty batch");
    }
    let yh = mean_cross(y, hy);
    let m = mean_cross(y, y) - Mat::identity(k, k) + &yh - yh.transpose();
    Ok(w - w * m * eta)
}

/// Driver settings for [`easi`]. The contrast picks h: tanh suits
/// super-Gaussian sources, the cube sub-Gaussian ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EasiConfig {
    pub contrast: Contrast,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Runs the EASI update over shuffled minibatches of whitened `z`, starting
/// from a random orthogonal k×k matrix. Returns the separating matrix.
pub fn easi(z: &Mat, config: &EasiConfig) -> Result<Mat> {
    if !(config.eta > 0.0) || config.batch_size < 2 {
        return invalid("EASI needs eta > 0 and batches of at least two rows");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = semi_orthogonal_from_rng(z.ncols(), z.ncols(), &mut rng);
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let y = z.select_rows(idx.iter()) * &w;
            let hy = match config.contrast {
                Contrast::Logcosh => y.map(f64::tanh),
                Contrast::Cube => y.map(|v| v * v * v),
            };
            w = easi_update(&w, &y, &hy, config.eta)?;
        }
        if !w.iter().all(|v| v.is_finite()) {
            return invalid("EASI diverged; lower eta");
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_example() {
        let b = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let o = order_by_unmixing_norm(&b).unwrap();
        assert_eq!(o.order, vec![0, 1]);
        assert_eq!(o.sigma_est.as_slice(), &[2.0, 0.5]);
        let o = order_by_unmixing_norm(&Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5])).unwrap();
        assert_eq!(o.order, vec![1, 0]);
        assert!(order_by_unmixing_norm(&Mat::zeros(2, 1)).is_err());
    }

    #[test]
    fn easi_fixed_point() {
        // Orthonormal ±1 columns: white, and yᵀh(y) symmetric for odd h.
        let y = Mat::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let w = Mat::identity(2, 2);
        let out = easi_step(&w, &y, &NonlinearitySpec::scaled_tanh(1.0), 0.1).unwrap();
        assert!((out - w).norm() < 1e-14);
    }

    #[test]
    fn easi_separates_with_matching_contrast() {
        use crate::datagen::{gen_points_2d, PointDist};
        for (dist, contrast) in [(PointDist::Uniform, Contrast::Cube), (PointDist::Laplace, Contrast::Logcosh)] {
            let (x, _) = gen_points_2d(dist, 4000, 0.6, false, 1).unwrap();
            let wh = whiten_pca(&x, 2).unwrap();
            let cfg = EasiConfig { contrast, eta: 0.01, epochs: 30, batch_size: 50, seed: 1 };
            let b = &wh.a * easi(&wh.z, &cfg).unwrap();
            let err = crate::metrics::angle_error_deg(&b, 0.6).unwrap();
            assert!(err <= 3.0, "{dist:?}: {err}");
        }
    }

    #[test]
    fn whitened_covariance() {
        let x = Mat::from_fn(400, 2, |i, j| ((i * 7 + j * 13) as f64).sin() * if j == 0 { 2.0 } else { 1.0 });
        let wh = whiten_pca(&DataMatrix::new(x).unwrap(), 2).unwrap();
        let cov = mean_cross(&wh.z, &wh.z);
        assert!((cov - Mat::identity(2, 2)).norm() < 1e-8);
    }
}
