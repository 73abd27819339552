//! Synthetic data with known ground truth: time signals, mixing matrices,
//! rotated 2-D point clouds and image patches.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{centre, gaussian_matrix, semi_orthogonal_from_rng, svd_thin_mat, DataMatrix, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Sine,
    Square,
    Sawtooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub kind: SignalKind,
    /// Period in samples.
    pub period: f64,
    pub target_std: f64,
    pub noise_std: f64,
}

impl SignalSpec {
    /// Noise defaults to 5% of the target standard deviation.
    pub fn new(kind: SignalKind, period: f64, target_std: f64) -> Self {
        Self { kind, period, target_std, noise_std: 0.05 * target_std }
    }
}

fn waveform(kind: SignalKind, t: f64, period: f64) -> f64 {
    let phase = t / period;
    match kind {
        SignalKind::Sine => (2.0 * PI * phase).sin(),
        SignalKind::Square => {
            let s = (2.0 * PI * phase).sin();
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        SignalKind::Sawtooth => 2.0 * phase.rem_euclid(1.0) - 1.0,
    }
}

/// One column per spec: waveform plus Gaussian noise, then centred and
/// rescaled so the sample standard deviation equals `target_std`.
pub fn gen_signals(n: usize, specs: &[SignalSpec], seed: u64) -> Result<Mat> {
    if n < 2 {
        return invalid("signals need at least two samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Mat::zeros(n, specs.len());
    for (j, spec) in specs.iter().enumerate() {
        if !(spec.period > 0.0) || !(spec.target_std > 0.0) || spec.noise_std < 0.0 {
            return invalid(format!("signal {j}: period and target_std must be positive, noise_std non-negative"));
        }
        for i in 0..n {
            let noise: f64 = StandardNormal.sample(&mut rng);
            s[(i, j)] = waveform(spec.kind, i as f64, spec.period) + spec.noise_std / spec.target_std * noise;
        }
    }
    let (mut c, _) = centre(&s);
    for (j, spec) in specs.iter().enumerate() {
        let sd = (c.column(j).norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            c.column_mut(j).scale_mut(spec.target_std / sd);
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MixingKind {
    Orthogonal,
    NonOrthogonal { cond_max: f64 },
}

/// True sources and mixing, X = S0·B0⁻¹ with B0⁻¹ = V0ᵀ·diag(Σ0)·E0ᵀ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMixing {
    /// n×k sources (may be empty when only the mixing was generated).
    pub s0: Mat,
    /// k×p mixing.
    pub b0_inv: Mat,
    /// p×k with orthonormal columns.
    pub e0: Mat,
    pub sigma0: Vector,
    /// k×k orthogonal.
    pub v0: Mat,
    pub kind: MixingKind,
}

impl GroundTruthMixing {
    pub fn from_mixing(b0_inv: Mat, kind: MixingKind) -> Result<Self> {
        let k = b0_inv.nrows();
        let svd = svd_thin_mat(&b0_inv, k)?;
        Ok(Self { s0: Mat::zeros(0, k), e0: svd.v, sigma0: svd.s, v0: svd.u.transpose(), b0_inv, kind })
    }

    pub fn with_sources(mut self, s0: Mat) -> Self {
        self.s0 = s0;
        self
    }

    pub fn observations(&self) -> Result<DataMatrix> {
        DataMatrix::new(&self.s0 * &self.b0_inv)
    }

    /// Pseudo-inverse of the mixing, p×k: the true unmixing B0.
    pub fn b0(&self) -> Mat {
        &self.e0 * Mat::from_diagonal(&self.sigma0.map(|s| 1.0 / s)) * &self.v0
    }

    pub fn condition_number(&self) -> f64 {
        self.sigma0.max() / self.sigma0.min()
    }
}

pub fn gen_mixing(k: usize, p: usize, kind: MixingKind, seed: u64) -> Result<GroundTruthMixing> {
    if k == 0 || k > p {
        return invalid(format!("need 1 <= k <= p, got k={k}, p={p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        MixingKind::Orthogonal => {
            let q = semi_orthogonal_from_rng(p, k, &mut rng);
            GroundTruthMixing::from_mixing(q.transpose(), kind)
        }
        MixingKind::NonOrthogonal { cond_max } => {
            if !(cond_max >= 1.0) {
                return invalid("cond_max must be at least 1");
            }
            for _ in 0..10_000 {
                let m = gaussian_matrix(k, p, &mut rng);
                let g = GroundTruthMixing::from_mixing(m, kind)?;
                if g.sigma0.min() > 0.0 && g.condition_number() <= cond_max {
                    return Ok(g);
                }
            }
            invalid(format!("no mixing with condition number <= {cond_max} found"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointDist {
    Uniform,
    Laplace,
    Gaussian,
}

/// Row-vector rotation by θ: s·R(θ) turns (1, 0) into (cos θ, sin θ).
pub fn rotation_2d(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_row_slice(2, 2, &[c, s, -s, c])
}

pub fn sample_unit_variance(dist: PointDist, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        PointDist::Uniform => (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
        PointDist::Laplace => {
            // Inverse CDF with scale 1/√2.
            let u: f64 = rng.random::<f64>() - 0.5;
            let b = std::f64::consts::FRAC_1_SQRT_2;
            -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
        }
        PointDist::Gaussian => StandardNormal.sample(rng),
    }
}

/// i.i.d. points with per-axis standard deviations (1, 1) or (1, 0.5), rotated by θ.
pub fn gen_points_2d(dist: PointDist, n: usize, theta: f64, equal_var: bool, seed: u64) -> Result<(DataMatrix, GroundTruthMixing)> {
    if n < 2 {
        return invalid("need at least two points");
    }
    let stds = if equal_var { [1.0, 1.0] } else { [1.0, 0.5] };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = Mat::from_fn(n, 2, |_, j| stds[j] * sample_unit_variance(dist, &mut rng));
    let gt = GroundTruthMixing::from_mixing(rotation_2d(theta), MixingKind::Orthogonal)?.with_sources(s0);
    Ok((gt.observations()?, gt))
}

/// Image with channel-last, row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return invalid(format!("image data has {} values, expected {}", data.len(), h * w * c));
        }
        Ok(Self { h, w, c, data })
    }

    fn at(&self, r: isize, col: isize, ch: usize) -> f64 {
        if r < 0 || col < 0 || r as usize >= self.h || col as usize >= self.w {
            0.0
        } else {
            self.data[(r as usize * self.w + col as usize) * self.c + ch]
        }
    }
}

/// Sliding-window patches in raster order, one per row, channels interleaved.
///
/// Zero padding adds ⌊size/2⌋ pixels before and size−1−⌊size/2⌋ after each
/// spatial axis, so stride 1 yields one patch per pixel.
pub fn extract_patches(images: &[Image], size: usize, stride: usize, zero_pad: bool) -> Result<DataMatrix> {
    if size == 0 || stride == 0 {
        return invalid("patch size and stride must be positive");
    }
    let Some(first) = images.first() else {
        return invalid("no images given");
    };
    let c = first.c;
    let dim = size * size * c;
    let (before, after) = if zero_pad { (size / 2, size - 1 - size / 2) } else { (0, 0) };
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    for img in images {
        if img.c != c {
            return invalid("all images must have the same channel count");
        }
        let (ph, pw) = (img.h + before + after, img.w + before + after);
        if size > ph || size > pw {
            return invalid(format!("patch size {size} exceeds padded image {ph}x{pw}"));
        }
        for r0 in (0..=ph - size).step_by(stride) {
            for c0 in (0..=pw - size).step_by(stride) {
                for dr in 0..size {
                    for dc in 0..size {
                        let r = (r0 + dr) as isize - before as isize;
                        let cc = (c0 + dc) as isize - before as isize;
                        for ch in 0..c {
                            rows.push(img.at(r, cc, ch));
                        }
                    }
                }
                count += 1;
            }
        }
    }
    DataMatrix::from_row_slice(count, dim, &rows)
}

/// Side of the square tiles that `procedural_bars` fills.
pub const BAR_TILE: usize = 8;
/// Number of bars per tile.
pub const BAR_COUNT: usize = 16;

/// The sixteen unit-norm bars of one tile, as columns over the row-major
/// 8×8 pixel grid. Each quadrant holds four parallel 4-pixel bars
/// (horizontal in the top-left and bottom-right, vertical elsewhere), so the
/// supports are disjoint and the columns orthonormal.
pub fn bar_dictionary() -> Mat {
    let half = BAR_TILE / 2;
    let mut d = Mat::zeros(BAR_TILE * BAR_TILE, BAR_COUNT);
    for q in 0..4 {
        let (r0, c0) = ((q / 2) * half, (q % 2) * half);
        let horizontal = q == 0 || q == 3;
        for i in 0..half {
            for t in 0..half {
                let (r, c) = if horizontal { (r0 + i, c0 + t) } else { (r0 + t, c0 + i) };
                d[(r * BAR_TILE + c, q * half + i)] = 0.5;
            }
        }
    }
    d
}

/// Standard deviation of bar i's amplitude: mildly decreasing so the bars
/// carry a variance order, and large next to the usual tanh scales so that a
/// model without per-component normalisation saturates.
pub fn bar_std(i: usize) -> f64 {
    6.0 / (1.0 + 0.05 * i as f64)
}

/// Grayscale images tiled by 8×8 blocks; every block is a sum of all sixteen
/// dictionary bars with independent Laplace amplitudes (std `bar_std`), plus
/// pixel noise of std 0.02. `h` and `w` must be multiples of 8.
pub fn procedural_bars(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Image>> {
    if !h.is_multiple_of(BAR_TILE) || !w.is_multiple_of(BAR_TILE) || h == 0 || w == 0 {
        return invalid(format!("image sides must be positive multiples of {BAR_TILE}, got {h}x{w}"));
    }
    let dict = bar_dictionary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut data = vec![0.0; h * w];
            for tr in (0..h).step_by(BAR_TILE) {
                for tc in (0..w).step_by(BAR_TILE) {
                    for (i, bar) in dict.column_iter().enumerate() {
                        let amp = sample_unit_variance(PointDist::Laplace, &mut rng) * bar_std(i);
                        for (pix, v) in bar.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                            data[(tr + pix / BAR_TILE) * w + tc + pix % BAR_TILE] += amp * v;
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += 0.02 * e;
            }
            Image { h, w, c: 1, data }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_contract() {
        let s = gen_signals(1000, &[SignalSpec { kind: SignalKind::Sine, period: 97.0, target_std: 1.0, noise_std: 0.0 }], 3).unwrap();
        let c = s.column(0);
        assert!(c.mean().abs() <= 1e-12);
        assert!(((c.norm_squared() / 1000.0).sqrt() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn waveforms() {
        assert_eq!(waveform(SignalKind::Square, 10.0, 40.0), 1.0);
        assert_eq!(waveform(SignalKind::Square, 30.0, 40.0), -1.0);
        assert!((waveform(SignalKind::Sawtooth, 10.0, 40.0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn patch_counts() {
        let img = Image::new(4, 4, 1, (0..16).map(|v| v as f64 + 1.0).collect()).unwrap();
        assert_eq!(extract_patches(&[img], 2, 2, false).unwrap().n(), 4);
        let img = Image::new(3, 3, 1, vec![1.0; 9]).unwrap();
        let p = extract_patches(&[img], 3, 1, true).unwrap();
        assert_eq!(p.n(), 9);
        // Top-left patch: padding row above and padding column to the left.
        assert_eq!(p.values().row(0).iter().filter(|v| **v == 0.0).count(), 5);
        assert_eq!(p.values().row(4).iter().filter(|v| **v == 0.0).count(), 0);
        assert!(extract_patches(&[Image::new(3, 3, 1, vec![0.0; 9]).unwrap()], 0, 1, false).is_err());
    }

    #[test]
    fn rotation_direction() {
        let r = rotation_2d(PI / 2.0);
        let x = Mat::from_row_slice(1, 2, &[1.0, 0.0]) * r;
        assert!((x[(0, 0)]).abs() < 1e-15 && (x[(0, 1)] - 1.0).abs() < 1e-15);
    }
}
