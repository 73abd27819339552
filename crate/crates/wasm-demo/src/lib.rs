//! Browser bindings for three small demos. Each export returns a JSON string
//! so the page needs no generated TypeScript types; the same functions are
//! available natively (without the `_json` suffix) for testing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sigma_pca::datagen::{gen_points_2d, sample_unit_variance, PointDist};
use sigma_pca::experiments::{run_points_2d_on, run_signal_method_with, signal_problem, SignalMethod, SignalSetup};
use sigma_pca::sigma_pca::{tanh_scale_std, NonlinearitySpec};
use sigma_pca::train::{CheckpointPolicy, TrainConfig};
use sigma_pca::Mat;
use wasm_bindgen::prelude::*;

/// Largest sample count the page may request; keeps a click under a second.
const MAX_SAMPLES: usize = 20_000;

fn dist(name: &str) -> Result<PointDist, String> {
    match name {
        "uniform" => Ok(PointDist::Uniform),
        "laplace" => Ok(PointDist::Laplace),
        "gaussian" => Ok(PointDist::Gaussian),
        other => Err(format!("unknown distribution `{other}`")),
    }
}

fn bounded(n: usize) -> Result<usize, String> {
    if (10..=MAX_SAMPLES).contains(&n) {
        Ok(n)
    } else {
        Err(format!("sample count must be between 10 and {MAX_SAMPLES}"))
    }
}

/// Column-major matrix as rows of numbers.
fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
pub struct Unrotation {
    /// Sample points, n×2.
    pub points: Vec<Vec<f64>>,
    /// Columns of the learnt σ-PCA filters, as two 2-vectors.
    pub nonlinear: [[f64; 2]; 2],
    pub nonlinear_error_deg: f64,
    /// Linear PCA axes, for contrast.
    pub linear: [[f64; 2]; 2],
    pub linear_error_deg: f64,
}

fn columns(w: &Mat) -> [[f64; 2]; 2] {
    [[w[(0, 0)], w[(1, 0)]], [w[(0, 1)], w[(1, 1)]]]
}

/// Rotates a 2-D sample by θ and learns it back with σ-PCA at tanh scale `a`.
pub fn unrotate_2d(dist_name: &str, theta: f64, a: f64, n: usize, epochs: usize, seed: u64) -> Result<Unrotation, String> {
    let n = bounded(n)?;
    if !(a > 0.0) {
        return Err("the tanh scale must be positive".into());
    }
    let (x, _) = gen_points_2d(dist(dist_name)?, n, theta, true, seed).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::signals(epochs.min(400), seed);
    cfg.checkpoint = CheckpointPolicy::Last;
    let nl = run_points_2d_on(&x, theta, Some(a), &cfg).map_err(|e| e.to_string())?;
    let lin = run_points_2d_on(&x, theta, None, &cfg).map_err(|e| e.to_string())?;
    Ok(Unrotation {
        points: rows(x.values()),
        nonlinear: columns(&nl.w),
        nonlinear_error_deg: nl.angle_error_deg,
        linear: columns(&lin.w),
        linear_error_deg: lin.angle_error_deg,
    })
}

#[derive(Debug, Serialize)]
pub struct Separation {
    /// True sources, mixed observations and recovered components, each
    /// as a list of series; recovered series are matched and sign-corrected.
    pub sources: Vec<Vec<f64>>,
    pub mixed: Vec<Vec<f64>>,
    pub recovered: Vec<Vec<f64>>,
    pub corrs: Vec<f64>,
    pub sigma_est: Vec<f64>,
    pub var_error: f64,
}

fn series(m: &Mat) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Separates the three mixed demo signals (sine, square, sawtooth).
pub fn separate_signals(mixing: &str, method: &str, a: f64, seed: u64) -> Result<Separation, String> {
    let setup = match mixing {
        "orthogonal" => SignalSetup::OrthogonalEqual,
        "orthogonal-distinct" => SignalSetup::OrthogonalDistinct,
        "non-orthogonal" => SignalSetup::NonOrthogonal,
        other => return Err(format!("unknown mixing `{other}`")),
    };
    let method = match method {
        "linear" => SignalMethod::LinearPca,
        "nlpca" => SignalMethod::SigmaPca { a },
        "fastica" => SignalMethod::FastIca,
        "two-layer" => SignalMethod::TwoLayer { a: 4.0, v_a: a },
        other => return Err(format!("unknown method `{other}`")),
    };
    let (x, gt) = signal_problem(setup, 1000, seed).map_err(|e| e.to_string())?;
    let out = run_signal_method_with(&x, &gt, &method, &TrainConfig::signals(150, seed)).map_err(|e| e.to_string())?;
    let mut recovered = vec![Vec::new(); gt.s0.ncols()];
    for (i, (&j, &s)) in out.report.perm.iter().zip(&out.report.signs).enumerate() {
        recovered[j] = out.recovered.column(i).iter().map(|v| v * s).collect();
    }
    let mut sigma_est = vec![0.0; gt.s0.ncols()];
    for (i, &j) in out.report.perm.iter().enumerate() {
        sigma_est[j] = out.sigma_est[i];
    }
    let mut corrs = vec![0.0; gt.s0.ncols()];
    for (i, &j) in out.report.perm.iter().enumerate() {
        corrs[j] = out.report.corrs[i];
    }
    Ok(Separation { sources: series(&gt.s0), mixed: series(x.values()), recovered, corrs, sigma_est, var_error: out.var_error })
}

#[derive(Debug, Serialize)]
pub struct TanhScale {
    /// (z, a·tanh(z/a)) pairs on [-4, 4].
    pub curve: Vec<[f64; 2]>,
    /// Std of h(y) for unit-variance y from each distribution.
    pub std_gaussian: f64,
    pub std_uniform: f64,
    pub std_laplace: f64,
}

/// Shape of h(z) = a·tanh(z/a) and how much of a unit-variance input's
/// spread it keeps for Gaussian, uniform and Laplace inputs.
pub fn tanh_scale(a: f64, n: usize, seed: u64) -> Result<TanhScale, String> {
    let n = bounded(n)?;
    if !(a > 0.0) {
        return Err("the tanh scale must be positive".into());
    }
    let h = NonlinearitySpec::scaled_tanh(a);
    let curve = (0..=80).map(|i| {
        let z = -4.0 + 0.1 * i as f64;
        [z, h.eval_scalar(z).0]
    });
    let spread = |d: PointDist| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| h.eval_scalar(sample_unit_variance(d, &mut rng)).0).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    Ok(TanhScale {
        curve: curve.collect(),
        std_gaussian: tanh_scale_std(a, n, seed),
        std_uniform: spread(PointDist::Uniform),
        std_laplace: spread(PointDist::Laplace),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn unrotate_2d_json(dist: &str, theta: f64, a: f64, n: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(unrotate_2d(dist, theta, a, n, epochs, seed.into()))
}

#[wasm_bindgen]
pub fn separate_signals_json(mixing: &str, method: &str, a: f64, seed: u32) -> Result<String, JsError> {
    to_js(separate_signals(mixing, method, a, seed.into()))
}

#[wasm_bindgen]
pub fn tanh_scale_json(a: f64, n: usize, seed: u32) -> Result<String, JsError> {
    to_js(tanh_scale(a, n, seed.into()))
}
