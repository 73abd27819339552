//! Unit-norm and orthogonality constraints: projections, regulariser gradients,
//! differentiable weight normalisation and iterative symmetric orthogonalisation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{degenerate, mean_cross, orth_residual, scale_cols, strict_upper, Mat, Vector};

/// Columns with a norm below this are treated as collapsed.
pub const MIN_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnitNorm {
    None,
    #[default]
    Project,
    Regularize { strength: f64 },
    /// Differentiable normalisation; the projection is still applied afterwards.
    WeightNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Orthogonality {
    #[default]
    None,
    SymmetricReg { alpha: f64 },
    AsymmetricReg { beta: f64, sigma_weighted: bool },
    Iterative { beta: f64, max_iter: usize, tol: f64 },
    GramSchmidt,
}

impl Orthogonality {
    pub fn iterative_default() -> Self {
        Orthogonality::Iterative { beta: 0.5, max_iter: 50, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ConstraintSpec {
    pub unit_norm: UnitNorm,
    pub orthogonality: Orthogonality,
}

impl ConstraintSpec {
    pub fn unit_norm_only() -> Self {
        Self { unit_norm: UnitNorm::Project, orthogonality: Orthogonality::None }
    }

    pub fn none() -> Self {
        Self { unit_norm: UnitNorm::None, orthogonality: Orthogonality::None }
    }

    pub fn validate(&self) -> Result<()> {
        if let UnitNorm::Regularize { strength } = self.unit_norm {
            if !(strength > 0.0) {
                return invalid("unit-norm regulariser strength must be positive");
            }
        }
        match self.orthogonality {
            // The 1/8 bound only holds for plain SGD at unit learning rate, so it is not enforced.
            Orthogonality::SymmetricReg { alpha } if !(alpha > 0.0) => invalid("alpha must be positive"),
            Orthogonality::AsymmetricReg { beta, .. } if !(beta > 0.0) => invalid("beta must be positive"),
            Orthogonality::Iterative { beta, max_iter, tol } => {
                if !(beta > 0.0 && beta <= 0.5) {
                    invalid("iterative beta must lie in (0, 1/2]")
                } else if max_iter == 0 || !(tol > 0.0) {
                    invalid("iterative orthogonalisation needs max_iter >= 1 and tol > 0")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Rescales every column to unit Euclidean norm.
pub fn project_unit_columns(w: &Mat) -> Result<Mat> {
    let mut out = w.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n > MIN_COLUMN_NORM) {
            return Err(degenerate(j, n));
        }
        col /= n;
    }
    Ok(out)
}

/// Jacobian-vector product of the column normalisation `w = v/‖v‖`.
#[derive(Debug, Clone)]
pub struct WeightNormBackmap {
    w: Mat,
    norms: Vector,
}

impl WeightNormBackmap {
    /// Maps ∂L/∂W to ∂L/∂V column-wise: (I − wwᵀ)g/‖v‖ with w the unit column.
    pub fn apply(&self, g: &Mat) -> Mat {
        let mut out = g.clone();
        for j in 0..g.ncols() {
            let w = self.w.column(j);
            let d = w.dot(&g.column(j));
            let mut c = out.column_mut(j);
            c.axpy(-d, &w, 1.0);
            c /= self.norms[j];
        }
        out
    }
}

pub fn weight_norm_map(v: &Mat) -> Result<(Mat, WeightNormBackmap)> {
    let w = project_unit_columns(v)?;
    let norms = crate::linalg::col_norms(v);
    Ok((w.clone(), WeightNormBackmap { w, norms }))
}

#[derive(Debug, Clone, Copy)]
pub enum OrthRegMode<'a> {
    Symmetric { alpha: f64 },
    Asymmetric { beta: f64 },
    AsymmetricSigma { beta: f64, sigma_hat: &'a Vector },
    /// Batch of inputs; the gradient is the batch mean of xᵀy(WᵀW − I).
    EncoderImplicit { x: &'a Mat },
}

/// Gradient of the chosen orthogonality regulariser.
///
/// Asymmetric forms treat the left factor of the Gram matrix as a constant and
/// only couple column i to columns j < i.
pub fn orth_reg_grad(w: &Mat, mode: OrthRegMode<'_>) -> Result<Mat> {
    let k = w.ncols();
    let gram = w.transpose() * w;
    Ok(match mode {
        OrthRegMode::Symmetric { alpha } => w * (gram - Mat::identity(k, k)) * (4.0 * alpha),
        OrthRegMode::Asymmetric { beta } => w * strict_upper(&gram) * beta,
        OrthRegMode::AsymmetricSigma { beta, sigma_hat } => {
            if sigma_hat.len() != k {
                return Err(Error::Shape(format!("sigma_hat has {} entries, W has {k} columns", sigma_hat.len())));
            }
            let ws = scale_cols(w, sigma_hat);
            &ws * strict_upper(&(ws.transpose() * w)) * beta
        }
        OrthRegMode::EncoderImplicit { x } => {
            crate::linalg::require_cols(x, w)?;
            let y = x * w;
            mean_cross(x, &y) * (gram - Mat::identity(k, k))
        }
    })
}

/// Loss whose gradient `orth_reg_grad` returns, with `w0` the frozen copy.
pub fn orth_reg_loss(w: &Mat, w0: &Mat, mode: OrthRegMode<'_>) -> f64 {
    let k = w.ncols();
    match mode {
        OrthRegMode::Symmetric { alpha } => alpha * (Mat::identity(k, k) - w.transpose() * w).norm_squared(),
        OrthRegMode::Asymmetric { beta } => 0.5 * beta * strict_upper(&(w0.transpose() * w)).norm_squared(),
        OrthRegMode::AsymmetricSigma { beta, sigma_hat } => {
            0.5 * beta * strict_upper(&(scale_cols(w0, sigma_hat).transpose() * w)).norm_squared()
        }
        OrthRegMode::EncoderImplicit { x } => {
            let r = x * w * w0.transpose() - x;
            0.5 * r.norm_squared() / x.nrows() as f64
        }
    }
}

/// Gradient of ½ Σ (‖w_j‖ − 1)² scaled by `strength`.
pub fn unit_norm_reg_grad(w: &Mat, strength: f64) -> Mat {
    let mut g = w.clone();
    for mut col in g.column_iter_mut() {
        let n = col.norm();
        let f = if n > MIN_COLUMN_NORM { 1.0 - 1.0 / n } else { 0.0 };
        col *= strength * f;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrthMethod {
    Iterative { beta: f64, max_iter: usize, tol: f64 },
    GramSchmidt,
}

#[derive(Debug, Clone)]
pub struct OrthResult {
    pub w: Mat,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Eigenvalue map of one iterative step: λ ↦ (1+β)²λ − 2(1+β)βλ² + β²λ³.
pub fn eigen_map(lambda: f64, beta: f64) -> f64 {
    let b1 = 1.0 + beta;
    b1 * b1 * lambda - 2.0 * b1 * beta * lambda * lambda + beta * beta * lambda.powi(3)
}

/// Orthonormalises the columns of `w` while keeping their span.
///
/// The iterative scheme first normalises columns, then divides by the square
/// root of a bound on the largest Gram eigenvalue so that every eigenvalue lies
/// in (0, 1], where the map is monotone toward 1.
pub fn orthogonalize(w: &Mat, method: OrthMethod) -> Result<OrthResult> {
    match method {
        OrthMethod::GramSchmidt => gram_schmidt(w),
        OrthMethod::Iterative { beta, max_iter, tol } => {
            if !(beta > 0.0 && beta <= 0.5) {
                return invalid("iterative beta must lie in (0, 1/2]");
            }
            let mut w = project_unit_columns(w)?;
            let k = w.ncols();
            let mut residual = orth_residual(&w);
            if residual <= tol {
                return Ok(OrthResult { w, iterations: 0, converged: true, residual });
            }
            let gram = w.transpose() * &w;
            let inf_norm = gram.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            let bound = gram.norm().min(inf_norm);
            w /= bound.sqrt();
            let eye = Mat::identity(k, k);
            for it in 1..=max_iter {
                let g = w.transpose() * &w;
                w = &w * ((1.0 + beta) * &eye - beta * g);
                residual = orth_residual(&w);
                if residual <= tol {
                    return Ok(OrthResult { w, iterations: it, converged: true, residual });
                }
            }
            Ok(OrthResult { w, iterations: max_iter, converged: false, residual })
        }
    }
}

fn gram_schmidt(w: &Mat) -> Result<OrthResult> {
    let mut out = w.clone();
    for j in 0..w.ncols() {
        let orig = w.column(j).norm();
        let mut c = out.column(j).clone_owned();
        // Two passes keep the result orthonormal to working precision.
        for _ in 0..2 {
            for i in 0..j {
                let q = out.column(i);
                let d = q.dot(&c);
                c.axpy(-d, &q, 1.0);
            }
        }
        let n = c.norm();
        if !(n > 1e-10 * orig.max(MIN_COLUMN_NORM)) || !(orig > MIN_COLUMN_NORM) {
            return Err(Error::RankDeficient(j));
        }
        out.set_column(j, &(c / n));
    }
    let residual = orth_residual(&out);
    Ok(OrthResult { w: out, iterations: 1, converged: true, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let w = Mat::from_column_slice(3, 1, &[3.0, 4.0, 0.0]);
        let p = project_unit_columns(&w).unwrap();
        assert!((p - Mat::from_column_slice(3, 1, &[0.6, 0.8, 0.0])).norm() < 1e-15);
        let tiny = Mat::from_column_slice(2, 1, &[1e-30, 0.0]);
        assert!(matches!(project_unit_columns(&tiny), Err(Error::DegenerateColumn { index: 0, .. })));
    }

    #[test]
    fn weight_norm_radial_gradient_vanishes() {
        let v = Mat::from_column_slice(2, 1, &[2.0, 0.0]);
        let (w, back) = weight_norm_map(&v).unwrap();
        assert_eq!(w, Mat::from_column_slice(2, 1, &[1.0, 0.0]));
        let g = back.apply(&Mat::from_column_slice(2, 1, &[1.0, 0.0]));
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn asymmetric_identical_columns() {
        let c = [0.6, 0.8];
        let w = Mat::from_column_slice(2, 2, &[c[0], c[1], c[0], c[1]]);
        let g = orth_reg_grad(&w, OrthRegMode::Asymmetric { beta: 1.0 }).unwrap();
        assert!(g.column(0).norm() < 1e-15);
        assert!((g.column(1) - w.column(0)).norm() < 1e-15);
    }

    #[test]
    fn fixed_point_unchanged() {
        let w = crate::linalg::random_semi_orthogonal(6, 3, 4).unwrap();
        let r = orthogonalize(&w, OrthMethod::Iterative { beta: 0.5, max_iter: 50, tol: 1e-10 }).unwrap();
        assert!((r.w - &w).norm() < 1e-14);
    }

    #[test]
    fn eigen_map_facts() {
        assert!((eigen_map(1.0, 0.5) - 1.0).abs() < 1e-15);
        let h = 1e-6;
        let d = (eigen_map(1.0 + h, 0.5) - eigen_map(1.0 - h, 0.5)) / (2.0 * h);
        assert!(d.abs() < 1e-9);
        for beta in [0.1, 0.25, 0.5] {
            let d = (eigen_map(1.0 + h, beta) - eigen_map(1.0 - h, beta)) / (2.0 * h);
            assert!((d - (1.0 - 2.0 * beta)).abs() < 1e-8);
        }
    }

    #[test]
    fn gram_schmidt_rank_deficient() {
        let w = Mat::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(orthogonalize(&w, OrthMethod::GramSchmidt), Err(Error::RankDeficient(1))));
    }
}
