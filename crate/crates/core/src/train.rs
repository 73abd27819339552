//! Mini-batch training loop shared by every method.
//!
//! Per step: statistics update → gradient (+ regularisers) → optimizer →
//! degenerate-column reinit → orthogonality projection → unit-norm projection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    orth_reg_grad, orth_reg_loss, orthogonalize, project_unit_columns, unit_norm_reg_grad, weight_norm_map,
    ConstraintSpec, OrthMethod, OrthRegMode, Orthogonality, UnitNorm, MIN_COLUMN_NORM,
};
use crate::error::{invalid, Error, NanDiagnostic, Result};
use crate::grad::GradResult;
use crate::linalg::{col_norms, floored_std, moment_stats, orth_residual, DataMatrix, Mat, MomentMode, Vector};
use crate::linear_pca::{
    asymmetric_pca_loss_grad, gha_grad, linear_pca_grad, nested_dropout, weighted_subspace_grad,
    weighted_variance_grad, GhaVariant, LinearVariant, VarianceMode, WeightedVariant, WeightingSpec,
};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::sigma_pca::{
    latent_recon_grad, noncentred_grad, rica_grad, sigma_pca_grad, skew_symmetric_grad, LatentVariant,
    NonCentredVariant, NonlinearitySpec, RicaBeta, RicaPenalty, SigmaMode, SigmaPcaModel, SkewBeta, SkewForm,
};

/// Gradient of one batch plus the gradient of any auxiliary parameters.
#[derive(Debug, Clone)]
pub struct Step {
    pub result: GradResult,
    pub aux_grad: Option<Mat>,
}

impl From<GradResult> for Step {
    fn from(result: GradResult) -> Self {
        Self { result, aux_grad: None }
    }
}

/// A model the trainer can optimise. W (p×k) is the constrained parameter;
/// auxiliary parameters are optimised without constraints.
pub trait Trainable: Clone {
    fn weights(&self) -> &Mat;
    fn weights_mut(&mut self) -> &mut Mat;
    fn update_stats(&mut self, _x: &Mat) -> Result<()> {
        Ok(())
    }
    fn grad(&self, x: &Mat, rng: &mut ChaCha8Rng) -> Result<Step>;
    fn aux(&self) -> Option<Mat> {
        None
    }
    fn set_aux(&mut self, _aux: Mat) {}
    /// Hook after the constraints, e.g. to re-orthogonalise a second layer.
    fn post_step(&mut self) -> Result<()> {
        Ok(())
    }
    /// Non-trainable per-component σ̂ for the σ-weighted asymmetric regulariser.
    fn sigma_hat(&self, x: &Mat) -> Result<Vector> {
        let (_, var) = moment_stats(&(x * self.weights()), MomentMode::Batch)?;
        Ok(floored_std(&var).0)
    }
}

impl Trainable for SigmaPcaModel {
    fn weights(&self) -> &Mat {
        &self.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.w
    }
    fn update_stats(&mut self, x: &Mat) -> Result<()> {
        SigmaPcaModel::update_stats(self, x)
    }
    fn grad(&self, x: &Mat, rng: &mut ChaCha8Rng) -> Result<Step> {
        let r = sigma_pca_grad(self, x, Some(rng))?;
        let aux_grad = r.grad_sigma.as_ref().map(|g| Mat::from_column_slice(g.len(), 1, g.as_slice()));
        Ok(Step { result: r, aux_grad })
    }
    fn aux(&self) -> Option<Mat> {
        match &self.sigma_mode {
            SigmaMode::Trainable { values, .. } => Some(Mat::from_column_slice(values.len(), 1, values.as_slice())),
            _ => None,
        }
    }
    fn set_aux(&mut self, aux: Mat) {
        if let SigmaMode::Trainable { values, .. } = &mut self.sigma_mode {
            *values = aux.column(0).into_owned();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LinearMethod {
    Plain { variant: LinearVariant },
    WeightedSubspace { variant: WeightedVariant, weights: WeightingSpec },
    /// The asymmetric weighted loss with σ̂ taken from the batch.
    AsymmetricLoss { weights: WeightingSpec },
    Gha { variant: GhaVariant },
    NestedDropout { rho: f64 },
    WeightedVariance { lambdas: Vector, alpha: f64, mode: VarianceMode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Mat,
    pub method: LinearMethod,
}

impl Trainable for LinearModel {
    fn weights(&self) -> &Mat {
        &self.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.w
    }
    fn grad(&self, x: &Mat, rng: &mut ChaCha8Rng) -> Result<Step> {
        let w = &self.w;
        Ok(match &self.method {
            LinearMethod::Plain { variant } => linear_pca_grad(x, w, *variant)?,
            LinearMethod::WeightedSubspace { variant, weights } => weighted_subspace_grad(x, w, weights, *variant)?,
            LinearMethod::AsymmetricLoss { weights } => {
                let s = self.sigma_hat(x)?;
                asymmetric_pca_loss_grad(x, w, weights, &s)?
            }
            LinearMethod::Gha { variant } => gha_grad(x, w, *variant)?,
            LinearMethod::NestedDropout { rho } => nested_dropout(x, w, *rho, rng)?,
            LinearMethod::WeightedVariance { lambdas, alpha, mode } => {
                weighted_variance_grad(x, w, lambdas, *alpha, *mode, Some(rng))?
            }
        }
        .into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RicaModel {
    pub w: Mat,
    pub beta: RicaBeta,
    pub penalty: RicaPenalty,
}

impl Trainable for RicaModel {
    fn weights(&self) -> &Mat {
        &self.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.w
    }
    fn grad(&self, x: &Mat, _rng: &mut ChaCha8Rng) -> Result<Step> {
        Ok(rica_grad(x, &self.w, self.beta, self.penalty)?.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewModel {
    pub w: Mat,
    pub nonlinearity: NonlinearitySpec,
    pub beta: SkewBeta,
    pub form: SkewForm,
}

impl Trainable for SkewModel {
    fn weights(&self) -> &Mat {
        &self.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.w
    }
    fn grad(&self, x: &Mat, _rng: &mut ChaCha8Rng) -> Result<Step> {
        Ok(skew_symmetric_grad(x, &self.w, &self.nonlinearity, self.beta, self.form)?.into())
    }
}

/// σ-PCA trained through the latent-space or non-centred objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AltObjective {
    Latent { variant: LatentVariant },
    NonCentred { variant: NonCentredVariant },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltSigmaModel {
    pub model: SigmaPcaModel,
    pub objective: AltObjective,
}

impl Trainable for AltSigmaModel {
    fn weights(&self) -> &Mat {
        &self.model.w
    }
    fn weights_mut(&mut self) -> &mut Mat {
        &mut self.model.w
    }
    fn update_stats(&mut self, x: &Mat) -> Result<()> {
        self.model.update_stats(x)
    }
    fn grad(&self, x: &Mat, _rng: &mut ChaCha8Rng) -> Result<Step> {
        Ok(match self.objective {
            AltObjective::Latent { variant } => latent_recon_grad(&self.model, x, variant)?,
            AltObjective::NonCentred { variant } => noncentred_grad(&self.model, x, variant)?,
        }
        .into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Weights at the end of the epoch with the lowest mean loss.
    #[default]
    BestLoss,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub constraints: ConstraintSpec,
    pub checkpoint: CheckpointPolicy,
}

impl TrainConfig {
    /// Signal and 2-D defaults: SGD lr 0.01, momentum 0.9, batch 100.
    pub fn signals(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(0.01, 0.9),
            batch_size: 100,
            epochs,
            seed,
            constraints: ConstraintSpec::unit_norm_only(),
            checkpoint: CheckpointPolicy::BestLoss,
        }
    }

    /// Patch defaults: Adam lr 1e-3, batch 128, last-epoch weights. Adam
    /// rescales the radial part of the gradient into the tangent plane, so the
    /// gradient goes through the weight-norm backmap before the projection.
    pub fn patches(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 128,
            epochs,
            seed,
            constraints: ConstraintSpec { unit_norm: UnitNorm::WeightNorm, orthogonality: Orthogonality::None },
            checkpoint: CheckpointPolicy::Last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        self.constraints.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's steps, regularisers included.
    pub loss: f64,
    pub recon: f64,
    /// ‖WᵀW − I‖_F at the end of the epoch.
    pub orth_residual: f64,
    pub floored_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Model selected by the checkpoint policy.
    pub model: M,
    pub last: M,
    pub history: Vec<EpochRecord>,
    /// Epoch of the checkpointed model, None when no epoch ran.
    pub checkpoint_epoch: Option<usize>,
    pub steps: usize,
    pub reinitialised: usize,
}

impl<M> TrainOutcome<M> {
    pub fn best_loss(&self) -> Option<f64> {
        self.checkpoint_epoch.map(|e| self.history[e].loss)
    }
}

fn finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn nan_error(epoch: usize, step: usize, loss: f64, grad_finite: bool, weights: &Mat) -> Error {
    Error::NonFinite(Box::new(NanDiagnostic { epoch, step, loss, grad_finite, weights: weights.clone() }))
}

fn reinit_degenerate(w: &mut Mat, rng: &mut ChaCha8Rng, opt: &mut OptimizerState) -> usize {
    let norms = col_norms(w);
    let mut count = 0;
    for (j, n) in norms.iter().enumerate() {
        if !(n.is_finite() && *n >= MIN_COLUMN_NORM) {
            let mut c: Vec<f64> = (0..w.nrows()).map(|_| StandardNormal.sample(rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter_mut().for_each(|v| *v /= norm);
            w.column_mut(j).copy_from_slice(&c);
            opt.reset_column(j);
            count += 1;
        }
    }
    count
}

fn regularise<M: Trainable>(model: &M, x: &Mat, spec: &ConstraintSpec, r: &mut GradResult) -> Result<()> {
    let w = model.weights();
    let mode = match spec.orthogonality {
        Orthogonality::SymmetricReg { alpha } => Some(OrthRegMode::Symmetric { alpha }),
        Orthogonality::AsymmetricReg { beta, sigma_weighted: false } => Some(OrthRegMode::Asymmetric { beta }),
        Orthogonality::AsymmetricReg { beta, sigma_weighted: true } => {
            let sigma_hat = model.sigma_hat(x)?;
            r.grad_w += orth_reg_grad(w, OrthRegMode::AsymmetricSigma { beta, sigma_hat: &sigma_hat })?;
            r.loss += orth_reg_loss(w, w, OrthRegMode::AsymmetricSigma { beta, sigma_hat: &sigma_hat });
            None
        }
        _ => None,
    };
    if let Some(mode) = mode {
        r.grad_w += orth_reg_grad(w, mode)?;
        r.loss += orth_reg_loss(w, w, mode);
    }
    if let UnitNorm::Regularize { strength } = spec.unit_norm {
        r.grad_w += unit_norm_reg_grad(w, strength);
        r.loss += 0.5 * strength * col_norms(w).iter().map(|n| (n - 1.0).powi(2)).sum::<f64>();
    }
    Ok(())
}

fn project<M: Trainable>(model: &mut M, spec: &ConstraintSpec) -> Result<()> {
    match spec.orthogonality {
        Orthogonality::Iterative { beta, max_iter, tol } => {
            let r = orthogonalize(model.weights(), OrthMethod::Iterative { beta, max_iter, tol })?;
            *model.weights_mut() = r.w;
        }
        Orthogonality::GramSchmidt => {
            let r = orthogonalize(model.weights(), OrthMethod::GramSchmidt)?;
            *model.weights_mut() = r.w;
        }
        _ => {}
    }
    if matches!(spec.unit_norm, UnitNorm::Project | UnitNorm::WeightNorm) {
        let w = project_unit_columns(model.weights())?;
        *model.weights_mut() = w;
    }
    Ok(())
}

/// Trains `model` on `data` with seeded shuffling. Batches smaller than two
/// rows are skipped because batch statistics need a variance.
pub fn train<M: Trainable>(model: M, data: &DataMatrix, config: &TrainConfig) -> Result<TrainOutcome<M>> {
    config.validate()?;
    if model.weights().nrows() != data.p() {
        return invalid(format!("model expects {} features, data has {}", model.weights().nrows(), data.p()));
    }
    if data.n() < 2 {
        return invalid("training needs at least two rows");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = model;
    let mut opt_w = OptimizerState::new(config.optimizer);
    let mut opt_aux = OptimizerState::new(config.optimizer);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, M)> = None;
    let mut order: Vec<usize> = (0..data.n()).collect();
    let (mut steps, mut reinitialised) = (0, 0);
    let spec = config.constraints;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut recon_sum, mut count, mut floored_steps) = (0.0, 0.0, 0usize, 0);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let x = data.rows(idx);
            model.update_stats(&x)?;
            let Step { result: mut r, aux_grad } = model.grad(&x, &mut rng)?;
            regularise(&model, &x, &spec, &mut r)?;
            let grad_finite = finite(&r.grad_w) && aux_grad.as_ref().is_none_or(finite);
            if !r.loss.is_finite() || !grad_finite {
                return Err(nan_error(epoch, step, r.loss, grad_finite, model.weights()));
            }
            let before = model.weights().clone();
            let g = if let UnitNorm::WeightNorm = spec.unit_norm {
                weight_norm_map(model.weights())?.1.apply(&r.grad_w)
            } else {
                r.grad_w
            };
            opt_w.step(model.weights_mut(), &g)?;
            if let (Some(mut a), Some(ga)) = (model.aux(), aux_grad) {
                opt_aux.step(&mut a, &ga)?;
                model.set_aux(a);
            }
            reinitialised += reinit_degenerate(model.weights_mut(), &mut rng, &mut opt_w);
            project(&mut model, &spec)?;
            model.post_step()?;
            if !finite(model.weights()) {
                return Err(nan_error(epoch, step, r.loss, true, &before));
            }
            loss_sum += r.loss;
            recon_sum += r.recon;
            floored_steps += r.floored as usize;
            count += 1;
            steps += 1;
        }
        let loss = loss_sum / count.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            loss,
            recon: recon_sum / count.max(1) as f64,
            orth_residual: orth_residual(model.weights()),
            floored_steps,
        });
        if config.checkpoint == CheckpointPolicy::BestLoss && best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, epoch, model.clone()));
        }
    }

    let (chosen, checkpoint_epoch) = match (config.checkpoint, best) {
        (CheckpointPolicy::BestLoss, Some((_, e, m))) => (m, Some(e)),
        _ => (model.clone(), config.epochs.checked_sub(1)),
    };
    Ok(TrainOutcome { model: chosen, last: model, history, checkpoint_epoch, steps, reinitialised })
}

/// Runs one `train` call per config, each phase continuing from the model the
/// previous phase selected. Optimizer moments restart at every phase; epoch
/// numbers in the merged history keep counting across phases.
pub fn train_phases<M: Trainable>(mut model: M, data: &DataMatrix, phases: &[TrainConfig]) -> Result<(M, Vec<EpochRecord>)> {
    let mut history = Vec::new();
    for cfg in phases {
        let out = train(model, data, cfg)?;
        let offset = history.len();
        history.extend(out.history.into_iter().map(|mut e| {
            e.epoch += offset;
            e
        }));
        model = out.model;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_semi_orthogonal;

    fn data() -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = crate::linalg::gaussian_matrix(300, 4, &mut rng) * Mat::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 1.0, 0.5]));
        DataMatrix::new(m).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let w = random_semi_orthogonal(4, 2, 0).unwrap();
        let m = LinearModel { w: w.clone(), method: LinearMethod::Plain { variant: LinearVariant::Subspace } };
        let out = train(m, &data(), &TrainConfig::signals(0, 3)).unwrap();
        assert_eq!(out.model.w, w);
        assert!(out.history.is_empty());
    }

    #[test]
    fn unit_norm_after_each_step() {
        let w = random_semi_orthogonal(4, 3, 2).unwrap();
        let m = LinearModel { w, method: LinearMethod::Gha { variant: GhaVariant::Plain } };
        let out = train(m, &data(), &TrainConfig::signals(3, 3)).unwrap();
        for n in col_norms(&out.last.w).iter() {
            assert!((n - 1.0).abs() <= 1e-12);
        }
        assert!(out.best_loss().unwrap() <= out.history.last().unwrap().loss);
    }

    #[test]
    fn nan_aborts() {
        let mut w = random_semi_orthogonal(4, 2, 2).unwrap();
        w[(0, 0)] = 1e200;
        let m = LinearModel { w, method: LinearMethod::Plain { variant: LinearVariant::TiedFull } };
        let mut cfg = TrainConfig::signals(1, 0);
        cfg.constraints = ConstraintSpec::none();
        assert!(matches!(train(m, &data(), &cfg), Err(Error::NonFinite(d)) if d.epoch == 0 && d.step == 0 && !d.loss.is_finite()));
    }
}
