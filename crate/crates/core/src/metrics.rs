//! Recovery metrics against known ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{orth_residual, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    BruteForce,
    Greedy,
}

/// Largest k accepted by the brute-force matcher.
pub const BRUTE_FORCE_MAX_K: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `perm[i]` is the true source matched to recovered column i.
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    pub corrs: Vec<f64>,
    pub method: MatchMethod,
}

impl MatchReport {
    pub fn min_corr(&self) -> f64 {
        self.corrs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn total(&self) -> f64 {
        self.corrs.iter().sum()
    }
}

/// Pearson correlation of every column of `a` with every column of `b`;
/// constant columns correlate 0 with everything.
pub fn correlation_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() != b.nrows() || a.nrows() < 2 {
        return invalid("correlation needs equal row counts of at least two");
    }
    let standardise = |m: &Mat| {
        let mut out = m.clone();
        for mut c in out.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
            let norm = c.norm();
            if norm > 0.0 {
                c /= norm;
            }
        }
        out
    };
    Ok(standardise(a).transpose() * standardise(b))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_assign(score: &Mat) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in permutations(score.nrows()) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
        if total > best.0 {
            best = (total, p);
        }
    }
    best.1
}

fn greedy_assign(score: &Mat) -> Vec<usize> {
    let k = score.nrows();
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for _ in 0..k {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in (0..k).filter(|&i| perm[i] == usize::MAX) {
            for j in (0..k).filter(|&j| !used[j]) {
                if score[(i, j)] > best.0 {
                    best = (score[(i, j)], i, j);
                }
            }
        }
        perm[best.1] = best.2;
        used[best.2] = true;
    }
    perm
}

/// One-to-one assignment maximising the summed square score matrix: brute
/// force up to six rows, greedy beyond. `out[i]` is the column given to row i.
pub fn assign_max(score: &Mat) -> Result<Vec<usize>> {
    if score.nrows() != score.ncols() {
        return invalid("assignment needs a square score matrix");
    }
    Ok(if score.nrows() <= BRUTE_FORCE_MAX_K { brute_force_assign(score) } else { greedy_assign(score) })
}

/// Pairs recovered columns with true sources, maximising the summed |corr|.
pub fn match_components(y: &Mat, s0: &Mat, method: MatchMethod) -> Result<MatchReport> {
    let k = y.ncols();
    if s0.ncols() != k {
        return invalid(format!("recovered has {k} columns, sources have {}", s0.ncols()));
    }
    let c = correlation_matrix(y, s0)?;
    let abs = c.abs();
    let perm = match method {
        MatchMethod::BruteForce => {
            if k > BRUTE_FORCE_MAX_K {
                return invalid(format!("brute-force matching supports k <= {BRUTE_FORCE_MAX_K}"));
            }
            brute_force_assign(&abs)
        }
        MatchMethod::Greedy => greedy_assign(&abs),
    };
    let signs = perm.iter().enumerate().map(|(i, &j)| if c[(i, j)] < 0.0 { -1.0 } else { 1.0 }).collect();
    let corrs = perm.iter().enumerate().map(|(i, &j)| c[(i, j)].abs()).collect();
    Ok(MatchReport { perm, signs, corrs, method })
}

/// Brute force up to six components, greedy beyond.
pub fn match_auto(y: &Mat, s0: &Mat) -> Result<MatchReport> {
    let method = if y.ncols() <= BRUTE_FORCE_MAX_K { MatchMethod::BruteForce } else { MatchMethod::Greedy };
    match_components(y, s0, method)
}

/// Amari index of P = B0⁻¹·B, normalised to [0, 1]; zero iff P is a scaled
/// signed permutation.
pub fn amari_index(p: &Mat) -> Result<f64> {
    let k = p.nrows();
    if p.ncols() != k {
        return invalid("Amari index needs a square product");
    }
    if k < 2 {
        return Ok(0.0);
    }
    let a = p.abs();
    let mut total = 0.0;
    for row in a.row_iter() {
        let m = row.max();
        if m == 0.0 {
            return invalid("Amari index undefined for a zero row");
        }
        total += row.sum() / m - 1.0;
    }
    for col in a.column_iter() {
        let m = col.max();
        if m == 0.0 {
            return invalid("Amari index undefined for a zero column");
        }
        total += col.sum() / m - 1.0;
    }
    Ok(total / (2.0 * k as f64 * (k as f64 - 1.0)))
}

pub fn amari(b: &Mat, b0_inv: &Mat) -> Result<f64> {
    if b0_inv.ncols() != b.nrows() {
        return invalid("mixing and unmixing shapes do not chain");
    }
    amari_index(&(b0_inv * b))
}

/// Distance between two angles modulo π/2, in [0, π/4].
pub fn angle_mod_quarter(a: f64, b: f64) -> f64 {
    let q = std::f64::consts::FRAC_PI_2;
    let d = (a - b).rem_euclid(q);
    d.min(q - d)
}

/// Worst per-column angle (degrees) between the 2-D filters in `w` and the
/// source axes rotated by θ, modulo quarter turns.
pub fn angle_error_deg(w: &Mat, theta: f64) -> Result<f64> {
    if w.nrows() != 2 {
        return invalid("angle error is defined for 2-D filters");
    }
    let mut worst: f64 = 0.0;
    for c in w.column_iter() {
        if c.norm() == 0.0 {
            return invalid("zero filter has no angle");
        }
        worst = worst.max(angle_mod_quarter(c[1].atan2(c[0]), theta));
    }
    Ok(worst.to_degrees())
}

/// Largest relative error |σ̂ − σ0| / σ0 after applying the matching.
pub fn var_error(sigma_est: &Vector, sigma0: &Vector, perm: &[usize]) -> Result<f64> {
    if sigma_est.len() != perm.len() || perm.iter().any(|&j| j >= sigma0.len()) {
        return invalid("variance vectors and permutation do not agree");
    }
    Ok(perm.iter().enumerate().map(|(i, &j)| (sigma_est[i] - sigma0[j]).abs() / sigma0[j]).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orth_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_error_deg: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsInput<'a> {
    pub b: Option<&'a Mat>,
    pub b0_inv: Option<&'a Mat>,
    pub w: Option<&'a Mat>,
    pub sigma_est: Option<&'a Vector>,
    pub sigma0: Option<&'a Vector>,
    pub perm: Option<&'a [usize]>,
    pub theta: Option<f64>,
}

/// Computes whichever metrics the supplied inputs allow.
pub fn metrics(input: &MetricsInput) -> Result<Metrics> {
    let mut m = Metrics::default();
    if let (Some(b), Some(b0_inv)) = (input.b, input.b0_inv) {
        m.amari = Some(amari(b, b0_inv)?);
    }
    if let Some(w) = input.w {
        m.orth_residual = Some(orth_residual(w));
        if let Some(theta) = input.theta {
            m.angle_error_deg = Some(angle_error_deg(w, theta)?);
        }
    }
    if let (Some(se), Some(s0)) = (input.sigma_est, input.sigma0) {
        let identity: Vec<usize> = (0..se.len()).collect();
        m.var_error = Some(var_error(se, s0, input.perm.unwrap_or(&identity))?);
    }
    Ok(m)
}
