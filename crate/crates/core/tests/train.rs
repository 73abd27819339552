use proptest::prelude::*;
use sigma_pca::checkpoint::Checkpoint;
use sigma_pca::constraints::ConstraintSpec;
use sigma_pca::experiments::{patch_corpus, sigma_pca_model, signal_problem, SignalSetup, SIGNAL_SAMPLES};
use sigma_pca::linalg::{col_norms, random_semi_orthogonal};
use sigma_pca::linear_pca::LinearVariant;
use sigma_pca::metrics::match_auto;
use sigma_pca::optim::{OptimizerConfig, OptimizerState};
use sigma_pca::train::{train, CheckpointPolicy, LinearMethod, LinearModel, TrainConfig};
use sigma_pca::{Error, Mat};

#[test]
fn sgd_step_is_lr_times_gradient() {
    let mut p = Mat::from_element(2, 2, 1.0);
    let g = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.0]);
    OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0)).step(&mut p, &g).unwrap();
    assert!((p - (Mat::from_element(2, 2, 1.0) - g * 0.1)).amax() <= 1e-15);
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let start = Mat::from_element(2, 3, 0.3);
    let mut p = start.clone();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
    opt.step(&mut p, &Mat::zeros(2, 3)).unwrap();
    assert!((&p - &start).amax() <= 1e-8);
    let mut p = start.clone();
    let g = Mat::from_row_slice(2, 3, &[5.0, -3.0, 100.0, -0.2, 1.0, -7.0]);
    OptimizerState::new(OptimizerConfig::adam(1e-3)).step(&mut p, &g).unwrap();
    let moved = &start - &p;
    for (d, gi) in moved.iter().zip(g.iter()) {
        assert!((d - 1e-3 * gi.signum()).abs() <= 1e-6);
    }
}

#[test]
fn signal_demo_recovers_sources_at_best_loss() {
    let (x, gt) = signal_problem(SignalSetup::OrthogonalDistinct, SIGNAL_SAMPLES, 0).unwrap();
    let xc = x.centred();
    let out = train(sigma_pca_model(3, 3, 0.8, 0), &xc, &TrainConfig::signals(200, 0)).unwrap();
    assert!(out.best_loss().unwrap() <= out.history.last().unwrap().loss);
    let m = match_auto(&(xc.values() * &out.model.w), &gt.s0).unwrap();
    assert!(m.min_corr() >= 0.95, "{:?}", m.corrs);
}

#[test]
fn patch_training_is_bitwise_deterministic() {
    let x = patch_corpus(20, 3).unwrap();
    let run = || {
        let out = train(sigma_pca_model(x.p(), 6, 4.0, 3), &x, &TrainConfig::patches(3, 3)).unwrap();
        (Checkpoint::new().with("w", out.model.w).to_bytes(), out.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn nan_diagnostic_keeps_the_last_finite_weights() {
    let x = patch_corpus(4, 0).unwrap();
    let mut w = random_semi_orthogonal(x.p(), 3, 0).unwrap();
    w[(0, 0)] = 1e300;
    let model = LinearModel { w: w.clone(), method: LinearMethod::Plain { variant: LinearVariant::TiedFull } };
    let mut cfg = TrainConfig::signals(2, 0);
    cfg.constraints = ConstraintSpec::none();
    match train(model, &x, &cfg) {
        Err(Error::NonFinite(d)) => {
            assert_eq!((d.epoch, d.step), (0, 0));
            assert_eq!(d.weights, w);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let x = patch_corpus(2, 0).unwrap();
    let model = sigma_pca_model(x.p(), 2, 4.0, 0);
    let mut cfg = TrainConfig::signals(1, 0);
    cfg.optimizer = OptimizerConfig::sgd(-1.0, 0.9);
    assert!(train(model.clone(), &x, &cfg).is_err());
    cfg.optimizer = OptimizerConfig::sgd(0.1, 1.0);
    assert!(train(model.clone(), &x, &cfg).is_err());
    cfg.optimizer = OptimizerConfig::sgd(0.1, 0.9);
    cfg.batch_size = 0;
    assert!(train(model, &x, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn best_checkpoint_and_unit_norms(seed in 0u64..500, k in 1usize..4, momentum in prop::sample::select(vec![0.0, 0.9])) {
        let (x, _) = signal_problem(SignalSetup::OrthogonalEqual, 300, seed).unwrap();
        let xc = x.centred();
        let mut cfg = TrainConfig::signals(5, seed);
        cfg.optimizer = OptimizerConfig::sgd(0.01, momentum);
        let out = train(sigma_pca_model(3, k, 1.0, seed), &xc, &cfg).unwrap();
        prop_assert!(out.best_loss().unwrap() <= out.history.last().unwrap().loss);
        for n in col_norms(&out.last.w).iter() {
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
        cfg.checkpoint = CheckpointPolicy::Last;
        let again = train(sigma_pca_model(3, k, 1.0, seed), &xc, &cfg).unwrap();
        prop_assert_eq!(again.model.w, out.last.w);
    }
}
