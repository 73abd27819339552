//! Acceptance criteria, one line each. Runs without the libtest harness so the
//! per-criterion lines always reach stdout; exits nonzero if any fails.

use std::f64::consts::FRAC_PI_4;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sigma_pca::checkpoint::Checkpoint;
use sigma_pca::constraints::{eigen_map, orthogonalize, project_unit_columns, OrthMethod};
use sigma_pca::datagen::PointDist;
use sigma_pca::experiments::*;
use sigma_pca::gradcheck::run_suite;
use sigma_pca::linalg::{gaussian_matrix, orth_residual, random_semi_orthogonal};
use sigma_pca::linear_pca::{GhaVariant, LinearVariant, VarianceMode, WeightedVariant, WeightingSpec};
use sigma_pca::metrics::MatchReport;
use sigma_pca::sigma_pca::{tanh_scale_std, DecoderMode, Objective, RicaBeta, RicaPenalty};
use sigma_pca::train::{train, LinearMethod, RicaModel, TrainConfig};
use sigma_pca::{DataMatrix, Mat};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn min(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// |corr| achieved for true source `j`.
fn source_corr(r: &MatchReport, j: usize) -> f64 {
    r.perm.iter().position(|&p| p == j).map_or(0.0, |i| r.corrs[i])
}

const SEEDS: u64 = 5;
const SIGNAL_EPOCHS: usize = 200;

fn signal_runs(setup: SignalSetup, method: &SignalMethod) -> Vec<MethodOutcome> {
    (0..SEEDS)
        .map(|seed| {
            let (x, gt) = signal_problem(setup, SIGNAL_SAMPLES, seed).unwrap();
            run_signal_method(&x, &gt, method, SIGNAL_EPOCHS, seed).unwrap()
        })
        .collect()
}

fn ac1_gradients() -> Verdict {
    let t = Instant::now();
    let r = run_suite(5, 1e-6, 1e-5, 20_240).unwrap();
    let elapsed = t.elapsed();
    let worst = r.worst().unwrap();
    let failures: Vec<_> = r.failures().iter().map(|c| format!("{} {:.1e}", c.name, c.max_rel_err)).collect();
    verdict(
        r.passed() && elapsed < Duration::from_secs(30),
        format!(
            "{} cases x 5 instances, worst {} {:.1e}, {:.2?}{}",
            r.cases.len(),
            worst.name,
            worst.max_rel_err,
            elapsed,
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join("; ")) }
        ),
    )
}

fn ac2_ac3_linear() -> (Verdict, Verdict) {
    let t = Instant::now();
    let k = 3;
    let ws = WeightingSpec::linear_spaced(k).unwrap();
    let lam = ws.lambdas().clone();
    let aligning = vec![
        ("v1", LinearMethod::WeightedSubspace { variant: WeightedVariant::V1, weights: ws.clone() }),
        ("v2", LinearMethod::WeightedSubspace { variant: WeightedVariant::V2, weights: ws.clone() }),
        ("v3", LinearMethod::WeightedSubspace { variant: WeightedVariant::V3, weights: ws.clone() }),
        ("asym", LinearMethod::AsymmetricLoss { weights: ws.clone() }),
        ("gha", LinearMethod::Gha { variant: GhaVariant::Plain }),
        ("gha_enc", LinearMethod::Gha { variant: GhaVariant::WithEncoder }),
        ("gha_sub", LinearMethod::Gha { variant: GhaVariant::PlusSubspace }),
        ("gha_combo", LinearMethod::Gha { variant: GhaVariant::ReconCombo }),
        ("nested", LinearMethod::NestedDropout { rho: 0.5 }),
        ("wvar", LinearMethod::WeightedVariance { lambdas: lam.clone(), alpha: 1.0, mode: VarianceMode::Fixed }),
    ];
    let plain = [
        ("tied", LinearMethod::Plain { variant: LinearVariant::TiedFull }),
        ("subspace", LinearMethod::Plain { variant: LinearVariant::Subspace }),
    ];
    let x = linear_problem(LINEAR_SAMPLES, 3).unwrap();
    let phases = linear_phases(60, 300, LINEAR_SAMPLES, 3);
    let run = |m: &LinearMethod| run_linear(&x, m.clone(), k, &phases).unwrap();

    let mut ok2 = true;
    let mut worst_cos = (1.0, "");
    let mut outcomes = Vec::new();
    for (name, m) in &aligning {
        let o = run(m);
        let c = min(&o.abs_cos);
        ok2 &= c >= 0.98;
        if c < worst_cos.0 {
            worst_cos = (c, name);
        }
        outcomes.push((*name, o));
    }
    let mut worst_proj: f64 = 0.0;
    for (_, m) in &plain {
        let o = run(m);
        worst_proj = worst_proj.max(o.projector_distance);
        ok2 &= o.projector_distance <= 1e-2;
    }
    let elapsed2 = t.elapsed();
    ok2 &= elapsed2 < Duration::from_secs(120);
    let v2 = verdict(
        ok2,
        format!("min |cos| {:.4} ({}), plain projector distance {:.1e}, {:.2?}", worst_cos.0, worst_cos.1, worst_proj, elapsed2),
    );

    // Norm identities at the converged points.
    let norms = |name: &str| outcomes.iter().find(|(n, _)| *n == name).unwrap().1.col_norms.clone();
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    let v1 = (0..k).map(|i| rel(norms("v1")[i], lam[i].sqrt())).fold(0.0, f64::max);
    let v3 = (0..k).map(|i| (norms("v3")[i] - 1.0).abs()).fold(0.0, f64::max);
    let asym = (0..k).map(|i| (norms("asym")[i] - 1.0).abs()).fold(0.0, f64::max);
    let mut wvar: f64 = 0.0;
    for alpha in [1.0, -1.0] {
        let m = LinearMethod::WeightedVariance { lambdas: lam.clone(), alpha, mode: VarianceMode::Fixed };
        let n = run(&m).col_norms;
        for i in 0..k {
            wvar = wvar.max(rel(n[i] * n[i], 1.0 + alpha * lam[i] / 2.0));
        }
    }
    let v3_ok = v1 <= 0.02 && v3 <= 1e-3 && asym <= 1e-3 && wvar <= 0.02;
    let v3_verdict = verdict(
        v3_ok,
        format!("v1 rel {v1:.1e}, v3 abs {v3:.1e}, asymmetric abs {asym:.1e}, weighted variance rel {wvar:.1e}"),
    );
    (v2, v3_verdict)
}

fn ac4_orthogonalization() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut iters = 0;
    let mut ok = true;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = project_unit_columns(&gaussian_matrix(16, 8, &mut rng)).unwrap();
        let r = orthogonalize(&w, OrthMethod::Iterative { beta: 0.5, max_iter: 30, tol: 1e-10 }).unwrap();
        ok &= r.converged && r.residual <= 1e-10 && r.iterations <= 30;
        worst = worst.max(r.residual);
        iters = iters.max(r.iterations);
    }
    let mut grid_ok = true;
    for i in 1..=1000 {
        let l = i as f64 / 1000.0;
        let f = eigen_map(l, 0.5);
        grid_ok &= f >= l - 1e-15 && f <= 1.0 + 1e-15;
    }
    verdict(ok && grid_ok, format!("worst residual {worst:.1e} in at most {iters} iterations, eigen-map grid in [l, 1]: {grid_ok}"))
}

fn ac5_equal_variance() -> Verdict {
    let t = Instant::now();
    let sigma = signal_runs(SignalSetup::OrthogonalEqual, &SignalMethod::SigmaPca { a: 0.8 });
    let linear = signal_runs(SignalSetup::OrthogonalEqual, &SignalMethod::LinearPca);
    let sigma_ok = sigma.iter().filter(|o| o.report.min_corr() >= 0.95 && o.var_error <= 0.10).count();
    let linear_ok = linear
        .iter()
        .filter(|o| source_corr(&o.report, 0) >= 0.95 && source_corr(&o.report, 1).min(source_corr(&o.report, 2)) < 0.9)
        .count();
    let elapsed = t.elapsed();
    verdict(
        sigma_ok >= 4 && linear_ok >= 4 && elapsed < Duration::from_secs(120),
        format!(
            "sigma-PCA {sigma_ok}/5 (min corr {:.3}, max var err {:.3}); linear PCA fails the equal pair {linear_ok}/5; {:.2?}",
            min(&sigma.iter().map(|o| o.report.min_corr()).collect::<Vec<_>>()),
            max(&sigma.iter().map(|o| o.var_error).collect::<Vec<_>>()),
            elapsed
        ),
    )
}

fn ac6_non_orthogonal() -> Verdict {
    let min_corrs = |m: &SignalMethod| signal_runs(SignalSetup::NonOrthogonal, m).iter().map(|o| o.report.min_corr()).collect::<Vec<_>>();
    let fastica = min_corrs(&SignalMethod::FastIca);
    let two_layer = min_corrs(&SignalMethod::TwoLayer { a: 4.0, v_a: 0.8 });
    let linear = min_corrs(&SignalMethod::LinearPca);
    let sigma = min_corrs(&SignalMethod::SigmaPca { a: 0.8 });
    let fails = |v: &[f64]| v.iter().filter(|c| **c < 0.9).count();
    verdict(
        min(&fastica) >= 0.95 && min(&two_layer) >= 0.95 && fails(&linear) >= 4 && fails(&sigma) >= 4,
        format!(
            "FastICA min {:.3}, two-layer min {:.3}; linear fails {}/5, sigma-PCA fails {}/5",
            min(&fastica),
            min(&two_layer),
            fails(&linear),
            fails(&sigma)
        ),
    )
}

fn ac7_distinct() -> Verdict {
    let methods =
        [SignalMethod::LinearPca, SignalMethod::SigmaPca { a: 0.8 }, SignalMethod::FastIca, SignalMethod::TwoStageNlpca { a: 0.8 }];
    let mins: Vec<f64> = methods
        .iter()
        .map(|m| min(&signal_runs(SignalSetup::OrthogonalDistinct, m).iter().map(|o| o.report.min_corr()).collect::<Vec<_>>()))
        .collect();
    verdict(
        min(&mins) >= 0.95,
        format!("min corr over 5 seeds: linear {:.3}, sigma-PCA {:.3}, FastICA {:.3}, two-stage nlpca {:.3}", mins[0], mins[1], mins[2], mins[3]),
    )
}

fn ac8_points() -> Verdict {
    let errs = |d, a| (0..SEEDS).map(|s| run_points_2d(d, FRAC_PI_4, Some(a), POINTS_SAMPLES, SIGNAL_EPOCHS, s).unwrap().angle_error_deg).collect::<Vec<_>>();
    let uniform = errs(PointDist::Uniform, 0.5);
    let laplace = errs(PointDist::Laplace, 4.0);
    let laplace_a1 = errs(PointDist::Laplace, 1.0);
    let off = laplace_a1.iter().filter(|e| **e > 5.0).count();
    verdict(
        max(&uniform) <= 3.0 && max(&laplace) <= 3.0 && off >= 2,
        format!(
            "uniform a=0.5 worst {:.2} deg, Laplace a=4 worst {:.2} deg, Laplace a=1 beyond 5 deg in {off}/5",
            max(&uniform),
            max(&laplace)
        ),
    )
}

/// √var(a·tanh(z/a)) by composite Simpson on [−12, 12]; the tails beyond
/// carry less than 1e-30 of the mass.
fn tanh_std_quadrature(a: f64) -> f64 {
    let (lo, hi, n) = (-12.0f64, 12.0f64, 24_000);
    let step = (hi - lo) / n as f64;
    let f = |z: f64| (a * (z / a).tanh()).powi(2) * (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (s * step / 3.0).sqrt()
}

fn ac9_tanh_constants() -> Verdict {
    let s1 = tanh_scale_std(1.0, 1_000_000, 9);
    let s3 = tanh_scale_std(3.0, 1_000_000, 9);
    verdict(
        (0.615..=0.635).contains(&s1) && (0.89..=0.91).contains(&s3),
        format!(
            "a=1: {s1:.4}, a=3: {s3:.4} (quadrature {:.5} / {:.5})",
            tanh_std_quadrature(1.0),
            tanh_std_quadrature(3.0)
        ),
    )
}

fn ac10_scale_invariance() -> Verdict {
    let k = 16;
    let x0 = patch_corpus(200, 0).unwrap();
    let cfg = TrainConfig::patches(100, 0);
    let sigma = |x: &DataMatrix| train(sigma_pca_model(x.p(), k, 4.0, 0), x, &cfg).unwrap().model.w;
    let rica = |beta: RicaBeta| {
        move |x: &DataMatrix| {
            let m = RicaModel { w: random_semi_orthogonal(x.p(), k, 7).unwrap(), beta, penalty: RicaPenalty::L1 };
            train(m, x, &cfg).unwrap().model.w
        }
    };
    let scales = [0.01, 100.0, 1000.0];
    let sweep = |f: &dyn Fn(&DataMatrix) -> Mat| -> Vec<f64> {
        let base = f(&x0);
        scales.iter().map(|&c| min(&matched_abs_cos(&f(&x0.scaled(c).unwrap()), &base).unwrap())).collect()
    };
    let s = sweep(&sigma);
    let adaptive = sweep(&rica(RicaBeta::Adaptive { beta0: 0.05 }));
    let fixed = sweep(&rica(RicaBeta::Fixed { beta: 1.0 }));
    verdict(
        min(&s) >= 0.98 && min(&adaptive) >= 0.98 && fixed[1] < 0.9,
        format!(
            "min |cos| vs scale 1 at 0.01/100/1000: sigma-PCA {:.3?}, RICA adaptive {:.3?}, RICA fixed {:.3?}",
            s, adaptive, fixed
        ),
    )
}

fn ac11_trainable_sigma() -> Verdict {
    let x = patch_corpus(200, 0).unwrap().scaled(TRAINABLE_SIGMA_SCALE).unwrap();
    let free = run_trainable_sigma(&x, 16, 4.0, 0.0, 1e-2, 6, 100, 0).unwrap().ratios();
    let held = run_trainable_sigma(&x, 16, 4.0, 1e-3, 1e-2, 6, 100, 0).unwrap().ratios();
    verdict(
        free.min() > 10.0 && held.max() <= 3.0,
        format!("sigma / data std: l2=0 min {:.1}, l2=1e-3 max {:.2}", free.min(), held.max()),
    )
}

fn ac12_ablations() -> Verdict {
    let (k, a, seed) = (16, 4.0, 0);
    let x = patch_corpus(1600, seed).unwrap();
    let phases = patch_phases(30, 100, x.n(), seed);
    let base = run_patch_filters(&x, &PatchMethod::stopgrad(a), k, &phases).unwrap();
    let norms_ok = base.w.column_iter().all(|c| (c.norm() - 1.0).abs() <= 1e-9);
    let resid = orth_residual(&base.w);
    let descending = base.sigma.as_slice().windows(2).all(|p| p[0] > p[1]);
    let ablations = [
        ("full decoder", PatchMethod::SigmaPca { a, decoder: DecoderMode::Full, objective: Objective::SigmaPca }),
        ("symmetric linear", PatchMethod::LinearTied),
        ("conventional", PatchMethod::SigmaPca { a, decoder: DecoderMode::Stopgrad, objective: Objective::Conventional }),
    ];
    let mut ok = norms_ok && resid <= 1e-2 && descending;
    let mut parts = Vec::new();
    for (name, m) in &ablations {
        let o = run_patch_filters(&x, m, k, &phases).unwrap();
        let below = matched_abs_cos(&o.w, &base.w).unwrap().iter().filter(|c| **c < 0.8).count();
        ok &= 2 * below >= k;
        parts.push(format!("{name} {below}/{k}"));
    }
    verdict(
        ok,
        format!("stopgrad: unit norms {norms_ok}, orth residual {resid:.1e}, descending {descending}; below 0.8: {}", parts.join(", ")),
    )
}

fn bits(m: &Mat) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

fn ac13_determinism() -> Verdict {
    let signals = || {
        let (x, gt) = signal_problem(SignalSetup::OrthogonalEqual, 500, 11).unwrap();
        let o = run_signal_method(&x, &gt, &SignalMethod::TwoLayer { a: 4.0, v_a: 0.8 }, 20, 11).unwrap();
        let history: Vec<u64> = o.history.iter().flat_map(|e| [e.loss.to_bits(), e.orth_residual.to_bits()]).collect();
        let ckpt = Checkpoint::new().with("unmixing", o.unmixing.clone()).to_bytes();
        (ckpt, history, o.report.corrs.iter().map(|c| c.to_bits()).collect::<Vec<_>>(), o.amari.to_bits())
    };
    let patches = || {
        let x = patch_corpus(8, 5).unwrap();
        let o = run_patch_filters(&x, &PatchMethod::stopgrad(4.0), 8, &patch_phases(3, 5, x.n(), 5)).unwrap();
        (bits(&o.w), o.history.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>())
    };
    let linear = || {
        let x = linear_problem(400, 2).unwrap();
        let m = LinearMethod::NestedDropout { rho: 0.5 };
        bits(&run_linear(&x, m, 3, &linear_phases(3, 3, 400, 2)).unwrap().w)
    };
    let suite = || run_suite(1, 1e-6, 1e-5, 4).unwrap().cases.iter().map(|c| c.max_rel_err.to_bits()).collect::<Vec<_>>();
    let same = [signals() == signals(), patches() == patches(), linear() == linear(), suite() == suite()];
    let ckpt = Checkpoint::new().with("w", random_semi_orthogonal(6, 3, 1).unwrap()).with("nl", Mat::from_element(1, 1, 0.1));
    let roundtrip = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap() == ckpt;
    verdict(
        same.iter().all(|s| *s) && roundtrip,
        format!("bitwise repeats (signals, patches, linear, gradient suite): {same:?}; checkpoint round trip {roundtrip}"),
    )
}

fn main() {
    let start = Instant::now();
    let results = std::thread::scope(|s| {
        let linear = s.spawn(ac2_ac3_linear);
        let jobs: Vec<(u32, _)> = vec![
            (1, s.spawn(ac1_gradients)),
            (4, s.spawn(ac4_orthogonalization)),
            (5, s.spawn(ac5_equal_variance)),
            (6, s.spawn(ac6_non_orthogonal)),
            (7, s.spawn(ac7_distinct)),
            (8, s.spawn(ac8_points)),
            (9, s.spawn(ac9_tanh_constants)),
            (10, s.spawn(ac10_scale_invariance)),
            (11, s.spawn(ac11_trainable_sigma)),
            (12, s.spawn(ac12_ablations)),
            (13, s.spawn(ac13_determinism)),
        ];
        let mut out: Vec<(u32, Verdict)> = jobs
            .into_iter()
            .map(|(n, h)| (n, h.join().unwrap_or_else(|_| verdict(false, "panicked"))))
            .collect();
        match linear.join() {
            Ok((v2, v3)) => {
                out.push((2, v2));
                out.push((3, v3));
            }
            Err(_) => {
                out.push((2, verdict(false, "panicked")));
                out.push((3, verdict(false, "panicked")));
            }
        }
        out.sort_by_key(|(n, _)| *n);
        out
    });
    let mut failed = 0;
    for (n, v) in &results {
        println!("AC{n:<2} {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed in {:.1?}", results.len() - failed, results.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
