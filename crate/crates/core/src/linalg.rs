//! Dense primitives: data container, thin SVD, PCA by SVD, moment statistics,
//! seeded initialisers and the triangular helpers shared by the learning rules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Floor applied to a variance before its square root is inverted.
pub const VAR_EPS: f64 = 1e-9;

/// Sample matrix, one observation per row. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Mat,
}

impl DataMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite entry at flat index {pos}"));
        }
        Ok(Self { values })
    }

    /// Builds from row-major values.
    pub fn from_row_slice(n: usize, p: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * p {
            return invalid(format!("expected {} values, got {}", n * p, data.len()));
        }
        Self::new(Mat::from_row_slice(n, p, data))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_inner(self) -> Mat {
        self.values
    }

    /// Copies the given rows into a new matrix (a mini-batch).
    pub fn rows(&self, idx: &[usize]) -> Mat {
        self.values.select_rows(idx.iter())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.values * c)
    }

    pub fn column_means(&self) -> Vector {
        column_means(&self.values)
    }

    pub fn centred(&self) -> Self {
        Self { values: centre(&self.values).0 }
    }
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub s: Vector,
    pub v: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PcaBasis {
    /// p×k principal axes.
    pub w: Mat,
    /// Standard deviations along the axes, non-increasing.
    pub sigma: Vector,
    pub mean: Vector,
}

pub fn column_means(x: &Mat) -> Vector {
    let n = x.nrows().max(1) as f64;
    Vector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Subtracts column means. Returns the centred copy and the means.
pub fn centre(x: &Mat) -> (Mat, Vector) {
    let mu = column_means(x);
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    (c, mu)
}

/// Subtracts a fixed row vector from every row.
pub fn sub_row(x: &Mat, mu: &Vector) -> Mat {
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    c
}

pub fn add_row(x: &Mat, mu: &Vector) -> Mat {
    sub_row(x, &(-mu))
}

/// Thin SVD truncated to rank `k`, singular values descending.
///
/// Sign convention: the largest-magnitude entry of every column of V is positive.
pub fn svd_thin(x: &DataMatrix, k: usize) -> Result<SvdResult> {
    svd_thin_mat(x.values(), k)
}

pub(crate) fn svd_thin_mat(x: &Mat, k: usize) -> Result<SvdResult> {
    let (n, p) = x.shape();
    let r = n.min(p);
    if k == 0 || k > r {
        return invalid(format!("rank {k} outside 1..={r}"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite input to svd");
    }
    let svd = x.clone().svd(true, true);
    let (u_full, vt_full) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return invalid("svd did not converge"),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut u = Mat::zeros(n, k);
    let mut v = Mat::zeros(p, k);
    let mut s = Vector::zeros(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        s[dst] = svd.singular_values[src].max(0.0);
        let mut vc = vt_full.row(src).transpose();
        let mut uc = u_full.column(src).clone_owned();
        let imax = vc.iamax();
        if vc[imax] < 0.0 {
            vc.neg_mut();
            uc.neg_mut();
        }
        v.set_column(dst, &vc);
        u.set_column(dst, &uc);
    }
    Ok(SvdResult { u, s, v })
}

/// PCA of the centred data: axes from V, standard deviations S/√n.
pub fn pca_fit_svd(x: &DataMatrix, k: usize) -> Result<PcaBasis> {
    let (n, p) = (x.n(), x.p());
    if n < 2 {
        return invalid("pca needs at least two samples");
    }
    if k == 0 || k > p {
        return invalid(format!("component count {k} outside 1..={p}"));
    }
    let (c, mean) = centre(x.values());
    let r = n.min(p);
    let svd = svd_thin_mat(&c, r)?;
    let mut w = Mat::zeros(p, k);
    let mut sigma = Vector::zeros(k);
    let sqrt_n = (n as f64).sqrt();
    for j in 0..k.min(r) {
        w.set_column(j, &svd.v.column(j));
        sigma[j] = svd.s[j] / sqrt_n;
    }
    if k > r {
        // Fewer samples than requested axes: complete the basis deterministically.
        let extra = complete_basis(&svd.v, p)?;
        for j in r..k {
            w.set_column(j, &extra.column(j - r));
        }
    }
    Ok(PcaBasis { w, sigma, mean })
}

/// Orthonormal complement of the columns of `v` (Gram-Schmidt against unit vectors).
fn complete_basis(v: &Mat, p: usize) -> Result<Mat> {
    let mut cols: Vec<Vector> = v.column_iter().map(|c| c.clone_owned()).collect();
    let start = cols.len();
    for e in 0..p {
        if cols.len() == p {
            break;
        }
        let mut c = Vector::zeros(p);
        c[e] = 1.0;
        for q in &cols {
            let d = q.dot(&c);
            c.axpy(-d, q, 1.0);
        }
        let nrm = c.norm();
        if nrm > 1e-8 {
            cols.push(c / nrm);
        }
    }
    Ok(Mat::from_columns(&cols[start..]))
}

/// Running estimate of mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mu_hat: Vector,
    pub var_hat: Vector,
    pub alpha: f64,
    pub eps: f64,
    /// False until the first batch arrives; the first batch seeds the estimate.
    pub initialized: bool,
}

impl MomentState {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            mu_hat: Vector::zeros(dim),
            var_hat: Vector::from_element(dim, 1.0),
            alpha,
            eps: VAR_EPS,
            initialized: false,
        }
    }

    pub fn with_values(mu_hat: Vector, var_hat: Vector, alpha: f64) -> Self {
        Self { mu_hat, var_hat, alpha, eps: VAR_EPS, initialized: true }
    }
}

pub enum MomentMode<'a> {
    Batch,
    Ema(&'a mut MomentState),
}

/// Per-column mean and biased (1/n) variance, optionally folded into an EMA.
pub fn moment_stats(y: &Mat, mode: MomentMode<'_>) -> Result<(Vector, Vector)> {
    let n = y.nrows();
    if n == 0 {
        return invalid("moment statistics of an empty batch");
    }
    let mu = column_means(y);
    let var = Vector::from_iterator(
        y.ncols(),
        y.column_iter().enumerate().map(|(j, c)| c.iter().map(|v| (v - mu[j]).powi(2)).sum::<f64>() / n as f64),
    );
    match mode {
        MomentMode::Batch => Ok((mu, var)),
        MomentMode::Ema(state) => {
            check_shape(state.mu_hat.len() == y.ncols(), || {
                format!("ema state has {} entries, batch has {}", state.mu_hat.len(), y.ncols())
            })?;
            if state.initialized {
                let a = state.alpha;
                state.mu_hat = &state.mu_hat * a + &mu * (1.0 - a);
                state.var_hat = &state.var_hat * a + &var * (1.0 - a);
            } else {
                state.mu_hat = mu;
                state.var_hat = var;
                state.initialized = true;
            }
            Ok((state.mu_hat.clone(), state.var_hat.clone()))
        }
    }
}

/// Standard deviations with the variance floor. Returns the values and a flag
/// set when any entry was floored.
pub fn floored_std(var: &Vector) -> (Vector, bool) {
    let mut floored = false;
    let s = var.map(|v| {
        if v < VAR_EPS {
            floored = true;
            VAR_EPS.sqrt()
        } else {
            v.sqrt()
        }
    });
    (s, floored)
}

/// Orthonormalised standard-normal draw, deterministic per seed.
pub fn random_semi_orthogonal(p: usize, k: usize, seed: u64) -> Result<Mat> {
    if k > p || k == 0 {
        return invalid(format!("need 1 <= k <= p, got k={k}, p={p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(semi_orthogonal_from_rng(p, k, &mut rng))
}

pub(crate) fn semi_orthogonal_from_rng(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    loop {
        let g = Mat::from_fn(p, k, |_, _| StandardNormal.sample(rng));
        let qr = g.qr();
        let r = qr.r();
        if (0..k).any(|i| r[(i, i)].abs() < 1e-10) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..k {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        return q;
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// ‖WᵀW − I‖_F.
pub fn orth_residual(w: &Mat) -> f64 {
    let k = w.ncols();
    (w.transpose() * w - Mat::identity(k, k)).norm()
}

pub fn col_norms(w: &Mat) -> Vector {
    Vector::from_iterator(w.ncols(), w.column_iter().map(|c| c.norm()))
}

/// Upper triangle including the diagonal. `W * upper(M)` lets column i mix only
/// columns j ≤ i, so earlier columns take priority.
pub fn upper(m: &Mat) -> Mat {
    m.upper_triangle()
}

pub fn strict_upper(m: &Mat) -> Mat {
    let mut u = m.upper_triangle();
    u.fill_diagonal(0.0);
    u
}

pub fn lower(m: &Mat) -> Mat {
    m.lower_triangle()
}

pub fn strict_lower(m: &Mat) -> Mat {
    let mut l = m.lower_triangle();
    l.fill_diagonal(0.0);
    l
}

pub fn diag_part(m: &Mat) -> Mat {
    Mat::from_diagonal(&m.diagonal())
}

/// Scales column j by `d[j]` (right-multiplication by diag(d)).
pub fn scale_cols(m: &Mat, d: &Vector) -> Mat {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

/// Mean over rows of `a ⊙ b` — batch average of elementwise products.
pub fn mean_hadamard_cols(a: &Mat, b: &Mat) -> Vector {
    let n = a.nrows().max(1) as f64;
    Vector::from_iterator(a.ncols(), (0..a.ncols()).map(|j| a.column(j).dot(&b.column(j)) / n))
}

/// `AᵀB / n` — batch average of outer products of rows.
pub fn mean_cross(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows().max(1) as f64;
    a.tr_mul(b) / n
}

pub(crate) fn require_cols(x: &Mat, w: &Mat) -> Result<()> {
    check_shape(x.ncols() == w.nrows(), || {
        format!("data has {} columns but weights have {} rows", x.ncols(), w.nrows())
    })
}

/// Flattens a matrix row-major (the on-disk order used by checkpoints and JSON).
pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

pub(crate) fn degenerate(index: usize, norm: f64) -> Error {
    Error::DegenerateColumn { index, norm }
}
