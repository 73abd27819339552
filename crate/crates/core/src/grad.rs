use serde::{Deserialize, Serialize};

use crate::linalg::{Mat, Vector};

/// Loss value and parameter gradients of one batch.
///
/// `grad_w` is ∂L/∂W with every stop-gradient factor held at its current
/// value, so a descent step is `W − lr·grad_w`. For update rules that are not
/// the gradient of any loss, `grad_w` is the negated update and `loss` is the
/// matching reconstruction objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradResult {
    /// Objective value, with the ½ factor the closed forms assume.
    pub loss: f64,
    /// Mean squared reconstruction error E‖x − x̂‖².
    pub recon: f64,
    pub grad_w: Mat,
    pub grad_sigma: Option<Vector>,
    pub grad_mu: Option<Vector>,
    /// Nested-dropout cut j (units 1..=j kept) when a mask was sampled.
    pub mask_cut: Option<usize>,
    /// True when some standard deviation hit the variance floor.
    pub floored: bool,
}

impl GradResult {
    pub fn new(loss: f64, recon: f64, grad_w: Mat) -> Self {
        Self { loss, recon, grad_w, grad_sigma: None, grad_mu: None, mask_cut: None, floored: false }
    }
}

/// Mean over rows of ‖r‖².
pub(crate) fn mean_sq(r: &Mat) -> f64 {
    r.norm_squared() / r.nrows().max(1) as f64
}
