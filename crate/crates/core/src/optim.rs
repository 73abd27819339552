//! Momentum SGD and Adam over dense parameter matrices.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    /// v ← μv + g, θ ← θ − lr·v.
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(lr > 0.0) {
                    return invalid(format!("learning rate must be positive, got {lr}"));
                }
                if !unit(momentum) {
                    return invalid(format!("momentum must lie in [0, 1), got {momentum}"));
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0) {
                    return invalid(format!("learning rate must be positive, got {lr}"));
                }
                if !unit(beta1) || !unit(beta2) {
                    return invalid("Adam betas must lie in [0, 1)");
                }
                if !(eps > 0.0) {
                    return invalid("Adam eps must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state; moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Option<Mat>,
    v: Option<Mat>,
    t: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, m: None, v: None, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Mat, grad: &Mat) -> Result<()> {
        check_shape(params.shape() == grad.shape(), || {
            format!("parameter shape {:?} does not match gradient {:?}", params.shape(), grad.shape())
        })?;
        if let Some(m) = &self.m {
            check_shape(m.shape() == grad.shape(), || "gradient shape changed between steps".into())?;
        }
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                if momentum == 0.0 {
                    *params -= grad * lr;
                } else {
                    let v = self.m.get_or_insert_with(|| Mat::zeros(grad.nrows(), grad.ncols()));
                    *v *= momentum;
                    *v += grad;
                    *params -= &*v * lr;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let m = self.m.get_or_insert_with(|| Mat::zeros(grad.nrows(), grad.ncols()));
                m.zip_apply(grad, |mi, g| *mi = beta1 * *mi + (1.0 - beta1) * g);
                let v = self.v.get_or_insert_with(|| Mat::zeros(grad.nrows(), grad.ncols()));
                v.zip_apply(grad, |vi, g| *vi = beta2 * *vi + (1.0 - beta2) * g * g);
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, mi), vi) in params.iter_mut().zip(m.iter()).zip(v.iter()) {
                    *p -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Forgets accumulated moments of column `j` (used after a reinitialisation).
    pub fn reset_column(&mut self, j: usize) {
        for m in [&mut self.m, &mut self.v].into_iter().flatten() {
            if j < m.ncols() {
                m.column_mut(j).fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut p = Mat::from_element(2, 2, 1.0);
        let g = Mat::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.0]);
        s.step(&mut p, &g).unwrap();
        assert_eq!(p, Mat::from_element(2, 2, 1.0) - &g * 0.1);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd(1.0, 0.5));
        let mut p = Mat::zeros(1, 1);
        let g = Mat::from_element(1, 1, 1.0);
        s.step(&mut p, &g).unwrap();
        s.step(&mut p, &g).unwrap();
        assert_eq!(p[(0, 0)], -2.5);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.01));
        let mut p = Mat::zeros(1, 3);
        let g = Mat::from_row_slice(1, 3, &[5.0, -300.0, 0.2]);
        s.step(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g.iter()) {
            assert!((pi + 0.01 * gi.signum()).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_gradient() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.3, 0.9));
        let mut p = Mat::from_element(2, 1, 0.7);
        s.step(&mut p, &Mat::zeros(2, 1)).unwrap();
        assert_eq!(p, Mat::from_element(2, 1, 0.7));
        let mut a = OptimizerState::new(OptimizerConfig::adam(0.3));
        a.step(&mut p, &Mat::zeros(2, 1)).unwrap();
        assert_eq!(p, Mat::from_element(2, 1, 0.7));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig::sgd(-1.0, 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::Adam { lr: 0.1, beta1: 0.9, beta2: 1.0, eps: 1e-8 }.validate().is_err());
    }
}
