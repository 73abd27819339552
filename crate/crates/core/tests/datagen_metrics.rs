use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigma_pca::datagen::{
    extract_patches, gen_mixing, gen_points_2d, gen_signals, procedural_bars, GroundTruthMixing, Image, MixingKind, PointDist, SignalKind,
    SignalSpec,
};
use sigma_pca::linalg::{gaussian_matrix, mean_cross, random_semi_orthogonal};
use sigma_pca::metrics::{amari, amari_index, match_components, metrics, MatchMethod, MetricsInput};
use sigma_pca::{Mat, Vector};

fn signals(seed: u64) -> Mat {
    let specs = [
        SignalSpec::new(SignalKind::Sine, 50.0, 2.0),
        SignalSpec::new(SignalKind::Square, 73.0, 1.0),
        SignalSpec::new(SignalKind::Sawtooth, 31.0, 1.0),
    ];
    gen_signals(2000, &specs, seed).unwrap()
}

/// Signed permutation: column i of the result is sign[i]·e_{perm[i]}.
fn signed_perm(perm: &[usize], signs: &[f64]) -> Mat {
    let k = perm.len();
    Mat::from_fn(k, k, |r, c| if perm[c] == r { signs[c] } else { 0.0 })
}

fn amari_from_definition(p: &Mat) -> f64 {
    let k = p.nrows();
    let mut total = 0.0;
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| p[(i, j)].abs()).collect();
        let col: Vec<f64> = (0..k).map(|j| p[(j, i)].abs()).collect();
        let rmax = row.iter().cloned().fold(0.0, f64::max);
        let cmax = col.iter().cloned().fold(0.0, f64::max);
        total += row.iter().map(|v| v / rmax).sum::<f64>() - 1.0;
        total += col.iter().map(|v| v / cmax).sum::<f64>() - 1.0;
    }
    total / (2.0 * (k * (k - 1)) as f64)
}

#[test]
fn noiseless_sine_is_exactly_rescaled() {
    let s = gen_signals(1000, &[SignalSpec { kind: SignalKind::Sine, period: 40.0, target_std: 1.0, noise_std: 0.0 }], 0).unwrap();
    let c = s.column(0);
    assert!(c.mean().abs() <= 1e-12);
    assert!((c.variance().sqrt() - 1.0).abs() <= 1e-6);
}

#[test]
fn square_and_sawtooth_share_variance_and_are_reproducible() {
    let s = signals(1);
    let v = s.row_variance();
    assert!((v[1] / v[2] - 1.0).abs() <= 0.01);
    assert!((v[0].sqrt() / 2.0 - 1.0).abs() <= 0.01);
    assert_eq!(s, signals(1));
}

#[test]
fn mixing_contracts() {
    let o = gen_mixing(3, 5, MixingKind::Orthogonal, 2).unwrap();
    assert!((&o.b0_inv * o.b0_inv.transpose() - Mat::identity(3, 3)).amax() <= 1e-10);
    for seed in 0..10 {
        let g = gen_mixing(4, 6, MixingKind::NonOrthogonal { cond_max: 10.0 }, seed).unwrap();
        let s = g.b0_inv.clone().svd(false, false).singular_values;
        assert!(s.max() / s.min() <= 10.0 + 1e-9);
        let rebuilt = g.v0.transpose() * Mat::from_diagonal(&g.sigma0) * g.e0.transpose();
        assert!((rebuilt - &g.b0_inv).amax() <= 1e-10);
        assert!((&g.b0_inv * g.b0() - Mat::identity(4, 4)).amax() <= 1e-10);
    }
}

#[test]
fn ground_truth_round_trips_through_json() {
    let g = gen_mixing(3, 4, MixingKind::NonOrthogonal { cond_max: 5.0 }, 7).unwrap().with_sources(signals(7));
    let text = serde_json::to_string(&g).unwrap();
    let back: GroundTruthMixing = serde_json::from_str(&text).unwrap();
    assert_eq!(back, g);
}

#[test]
fn points_contracts() {
    let (x, gt) = gen_points_2d(PointDist::Laplace, 100, 0.0, false, 3).unwrap();
    assert_eq!(x.values(), &gt.s0);
    let (x, _) = gen_points_2d(PointDist::Uniform, 20_000, std::f64::consts::FRAC_PI_4, true, 3).unwrap();
    let c = mean_cross(x.values(), x.values());
    assert!((c - Mat::identity(2, 2)).amax() <= 0.05);
}

#[test]
fn laplace_excess_kurtosis() {
    let (x, _) = gen_points_2d(PointDist::Laplace, 100_000, 0.0, true, 4).unwrap();
    let c = x.values().column(0);
    let m = c.mean();
    let m2 = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64;
    let m4 = c.iter().map(|v| (v - m).powi(4)).sum::<f64>() / c.len() as f64;
    let excess = m4 / (m2 * m2) - 3.0;
    assert!((excess - 3.0).abs() <= 0.3, "{excess}");
}

#[test]
fn patch_dimensions() {
    let img = |c: usize| Image::new(32, 32, c, (0..32 * 32 * c).map(|v| v as f64).collect()).unwrap();
    for c in [1, 3] {
        let p = extract_patches(&[img(c), img(c)], 11, 4, false).unwrap();
        assert_eq!((p.n(), p.p()), (2 * 36, 121 * c));
        let p = extract_patches(&[img(c)], 11, 4, true).unwrap();
        assert_eq!((p.n(), p.p()), (64, 121 * c));
    }
    let bars = procedural_bars(2, 32, 32, 0).unwrap();
    assert_eq!(extract_patches(&bars, 11, 4, true).unwrap().p(), 121);
    assert!(extract_patches(&bars, 0, 4, true).is_err());
}

#[test]
fn corner_patch_with_padding() {
    let img = Image::new(3, 3, 1, vec![1.0; 9]).unwrap();
    let p = extract_patches(&[img], 3, 1, true).unwrap();
    assert_eq!(p.n(), 9);
    assert_eq!(p.values().row(0).iter().filter(|v| **v == 0.0).count(), 5);
    assert_eq!(p.values().row(4).iter().filter(|v| **v == 0.0).count(), 0);
}

#[test]
fn amari_matches_definition() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut large = 0;
    for _ in 0..20 {
        let p = gaussian_matrix(4, 4, &mut r);
        let a = amari_index(&p).unwrap();
        assert!((a - amari_from_definition(&p)).abs() <= 1e-12);
        large += usize::from(a > 0.1);
    }
    assert!(large >= 18);
    let b0_inv = gaussian_matrix(3, 3, &mut r);
    let b0 = b0_inv.clone().try_inverse().unwrap();
    assert!(amari(&b0, &b0_inv).unwrap() <= 1e-12);
    let twisted = &b0 * signed_perm(&[2, 0, 1], &[-1.0, 1.0, -1.0]) * Mat::from_diagonal(&Vector::from_vec(vec![2.0, 0.5, 3.0]));
    assert!(amari(&twisted, &b0_inv).unwrap() <= 1e-12);
}

#[test]
fn greedy_matching_against_brute_force() {
    let mut equal = 0;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s0 = gaussian_matrix(300, 4, &mut r);
        let y = &s0 * gaussian_matrix(4, 4, &mut r).map(|v| v * 0.3) + &s0 * signed_perm(&[1, 3, 0, 2], &[1.0, -1.0, 1.0, 1.0]);
        let brute = match_components(&y, &s0, MatchMethod::BruteForce).unwrap().total();
        let greedy = match_components(&y, &s0, MatchMethod::Greedy).unwrap().total();
        assert!(greedy <= brute + 1e-12);
        equal += usize::from((brute - greedy).abs() <= 1e-12);
    }
    assert!(equal >= 90, "{equal}/100");
}

#[test]
fn metrics_bundle() {
    let w = random_semi_orthogonal(2, 2, 1).unwrap();
    let theta = w[(1, 0)].atan2(w[(0, 0)]);
    let m = metrics(&MetricsInput {
        w: Some(&w),
        theta: Some(theta),
        sigma_est: Some(&Vector::from_vec(vec![1.1, 2.0])),
        sigma0: Some(&Vector::from_vec(vec![2.0, 1.0])),
        perm: Some(&[1, 0]),
        ..Default::default()
    })
    .unwrap();
    assert!(m.orth_residual.unwrap() <= 1e-12);
    assert!(m.angle_error_deg.unwrap() <= 1e-9);
    assert!((m.var_error.unwrap() - 0.1).abs() <= 1e-12);
    assert!(m.amari.is_none());
}

fn perm_strategy(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (Just((0..k).collect::<Vec<_>>()).prop_shuffle(), prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_composes_with_signed_permutations(seed in 0u64..1000, (perm, signs) in perm_strategy(3)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s0 = gaussian_matrix(200, 3, &mut r);
        let y = &s0 + gaussian_matrix(200, 3, &mut r).map(|v| v * 0.2);
        let base = match_components(&y, &s0, MatchMethod::BruteForce).unwrap();
        let moved = match_components(&(&y * signed_perm(&perm, &signs)), &s0, MatchMethod::BruteForce).unwrap();
        for i in 0..3 {
            prop_assert_eq!(moved.perm[i], base.perm[perm[i]]);
            prop_assert_eq!(moved.signs[i], base.signs[perm[i]] * signs[i]);
            prop_assert!((moved.corrs[i] - base.corrs[perm[i]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn amari_invariant_on_both_sides(seed in 0u64..1000, (p1, s1) in perm_strategy(4), (p2, s2) in perm_strategy(4)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // Signed permutations leave a general product unchanged; scaling only
        // preserves the zero of an exact scaled permutation.
        let m = gaussian_matrix(4, 4, &mut r);
        let moved = signed_perm(&p1, &s1) * &m * signed_perm(&p2, &s2);
        prop_assert!((amari_index(&moved).unwrap() - amari_index(&m).unwrap()).abs() <= 1e-12);
        let d1 = Mat::from_diagonal(&Vector::from_fn(4, |_, _| r.random_range(0.2..5.0)));
        let d2 = Mat::from_diagonal(&Vector::from_fn(4, |_, _| r.random_range(0.2..5.0)));
        let scaled = signed_perm(&p1, &s1) * d1 * signed_perm(&p2, &s2) * d2;
        prop_assert!(amari_index(&scaled).unwrap() <= 1e-12);
    }
}
