use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Mat, VAR_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityKind {
    /// a·tanh(z/a)
    ScaledTanh,
    /// clamp(z, −a, a); derivative 0 at and beyond the kinks.
    HardTanh,
    /// a·tanh(z), a ≈ 1.6 rescales tanh of a standard normal to unit variance.
    AsymConst,
    /// tanh(z)/√var(tanh z), variance taken per column of the batch.
    AsymAdaptive,
    Linear,
    /// sign(z) with sign(0) = 0 and derivative 0; for the sparsity-style updates.
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    #[default]
    Exact,
    /// h' ≡ 1.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub kind: NonlinearityKind,
    pub a: f64,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
}

impl NonlinearitySpec {
    pub fn scaled_tanh(a: f64) -> Self {
        Self { kind: NonlinearityKind::ScaledTanh, a, derivative_mode: DerivativeMode::Exact }
    }

    pub fn hard_tanh(a: f64) -> Self {
        Self { kind: NonlinearityKind::HardTanh, a, derivative_mode: DerivativeMode::Exact }
    }

    pub fn asym_const() -> Self {
        Self { kind: NonlinearityKind::AsymConst, a: 1.6, derivative_mode: DerivativeMode::Identity }
    }

    pub fn asym_adaptive() -> Self {
        Self { kind: NonlinearityKind::AsymAdaptive, a: 1.0, derivative_mode: DerivativeMode::Identity }
    }

    pub fn linear() -> Self {
        Self { kind: NonlinearityKind::Linear, a: 1.0, derivative_mode: DerivativeMode::Exact }
    }

    pub fn sign() -> Self {
        Self { kind: NonlinearityKind::Sign, a: 1.0, derivative_mode: DerivativeMode::Exact }
    }

    pub fn with_derivative(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return invalid(format!("nonlinearity scale must be positive, got {}", self.a));
        }
        Ok(())
    }

    /// Scalar value and exact derivative; batch-dependent kinds use unit scale.
    pub fn eval_scalar(&self, z: f64) -> (f64, f64) {
        let a = self.a;
        let (h, d) = match self.kind {
            NonlinearityKind::ScaledTanh => {
                let t = (z / a).tanh();
                (a * t, 1.0 - t * t)
            }
            NonlinearityKind::HardTanh => {
                if z.abs() < a {
                    (z, 1.0)
                } else {
                    (a * z.signum(), 0.0)
                }
            }
            NonlinearityKind::AsymConst => {
                let t = z.tanh();
                (a * t, a * (1.0 - t * t))
            }
            NonlinearityKind::AsymAdaptive => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            NonlinearityKind::Linear => (z, 1.0),
            NonlinearityKind::Sign => (if z > 0.0 { 1.0 } else if z < 0.0 { -1.0 } else { 0.0 }, 0.0),
        };
        match self.derivative_mode {
            DerivativeMode::Exact => (h, d),
            DerivativeMode::Identity => (h, 1.0),
        }
    }

    /// Elementwise h(z) and h'(z) over a batch.
    pub fn eval(&self, z: &Mat) -> (Mat, Mat) {
        let mut h = Mat::zeros(z.nrows(), z.ncols());
        let mut d = Mat::zeros(z.nrows(), z.ncols());
        for (i, v) in z.iter().enumerate() {
            let (hv, dv) = self.eval_scalar(*v);
            h[i] = hv;
            d[i] = dv;
        }
        if self.kind == NonlinearityKind::AsymAdaptive {
            let n = z.nrows().max(1) as f64;
            for j in 0..z.ncols() {
                let col = h.column(j);
                let m = col.sum() / n;
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let s = var.max(VAR_EPS).sqrt();
                h.column_mut(j).scale_mut(1.0 / s);
                if self.derivative_mode == DerivativeMode::Exact {
                    d.column_mut(j).scale_mut(1.0 / s);
                }
            }
        }
        (h, d)
    }
}

/// Monte-Carlo √var(a·tanh(z/a)) for z ~ N(0, 1).
pub fn tanh_scale_std(a: f64, n: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let h = a * (z / a).tanh();
        s += h;
        s2 += h * h;
    }
    let m = s / n as f64;
    (s2 / n as f64 - m * m).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_tanh_basics() {
        let s = NonlinearitySpec::scaled_tanh(4.0);
        assert_eq!(s.eval_scalar(0.0), (0.0, 1.0));
        let (h, _) = NonlinearitySpec::scaled_tanh(100.0).eval_scalar(0.5);
        assert!(h < 0.5 && (h - 0.5).abs() <= 1e-5);
    }

    #[test]
    fn hard_tanh_kinks() {
        let s = NonlinearitySpec::hard_tanh(1.0);
        assert_eq!(s.eval_scalar(1.0), (1.0, 0.0));
        assert_eq!(s.eval_scalar(-3.0), (-1.0, 0.0));
        assert_eq!(s.eval_scalar(0.5), (0.5, 1.0));
    }

    #[test]
    fn identity_derivative() {
        let s = NonlinearitySpec::scaled_tanh(1.0).with_derivative(DerivativeMode::Identity);
        let (_, d) = s.eval(&Mat::from_element(2, 2, 3.0));
        assert!(d.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adaptive_has_unit_variance() {
        let z = Mat::from_fn(200, 2, |i, j| ((i * 7 + j * 3) % 23) as f64 / 5.0 - 2.2);
        let (h, _) = NonlinearitySpec::asym_adaptive().eval(&z);
        let (_, var) = crate::linalg::moment_stats(&h, crate::linalg::MomentMode::Batch).unwrap();
        assert!((var[0] - 1.0).abs() < 1e-12 && (var[1] - 1.0).abs() < 1e-12);
    }
}
