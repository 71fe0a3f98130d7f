mod common;

use common::{fd_gradient_check, load_spec, Objective};
use piml_core::bayes::PriorScale;
use piml_core::data::{Dataset, NormStats, Provenance};
use piml_core::harness::{build_model, generate_data, train_variant, Variant};
use piml_core::nn::{Activation, DenseLayer, DenseNetwork};
use piml_core::physics::{AffinePhysics, Physics};
use piml_core::rng::rng_from_seed;
use piml_core::train::{
    evaluate_rmse, loss_and_gradient, promote_to_bayesian, train_stage1, train_stage2, PromotionConfig, Stage,
    TrainConfig,
};
use piml_core::{Error, Parameterized, PimlModel, TransferMode, TransferNet};
use rand::Rng;

fn names(p: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{p}{i}")).collect()
}

fn linear_data(n: usize, slope: f64) -> Dataset {
    let mut rng = rng_from_seed(11);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let ys = xs.iter().map(|x| vec![slope * x[0]]).collect();
    let mut d = Dataset::new(xs, ys, names("x", 1), names("y", 1), Provenance::ExternalCsv).unwrap();
    d.fit_stats().unwrap();
    d
}

/// Pure network mapping to normalized outputs, like the ANN baseline.
fn direct_model(data: &Dataset, sizes: &[usize]) -> PimlModel<AffinePhysics> {
    let out = data.target_stats.clone().unwrap();
    let net = DenseNetwork::new(sizes, 0.01, &mut rng_from_seed(5)).unwrap();
    let physics = AffinePhysics::diagonal(&out.std, &out.mean).unwrap();
    PimlModel::new(net, physics, TransferMode::Direct, data.input_stats.clone().unwrap(), out).unwrap()
}

#[test]
fn learns_a_linear_slope() {
    let data = linear_data(64, 2.0);
    let mut m = direct_model(&data, &[1, 1]);
    let cfg = TrainConfig {
        epochs: 3000,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let h = train_stage1(&mut m, &data, None, &cfg).unwrap();
    let slope = m.forward(&[1.0]).unwrap().y[0] - m.forward(&[0.0]).unwrap().y[0];
    assert!((slope - 2.0).abs() < 1e-3, "slope {slope}");
    assert!(h.records.last().unwrap().train_loss < h.records[0].train_loss);
}

#[test]
fn history_has_one_finite_record_per_epoch() {
    let data = linear_data(40, -1.0);
    let mut m = direct_model(&data, &[1, 4, 1]);
    let cfg = TrainConfig {
        epochs: 17,
        batch_size: Some(8),
        ..TrainConfig::default()
    };
    let h = train_stage1(&mut m, &data, Some(&data), &cfg).unwrap();
    assert_eq!(h.len(), 17);
    for (i, r) in h.records.iter().enumerate() {
        assert_eq!(r.epoch, i);
        assert!(r.train_loss.is_finite() && r.test_loss.is_finite());
    }
    let csv = h.to_csv(true);
    assert!(csv.starts_with("epoch,train_loss,test_loss,mse_term,elbo_term,wall_ms\n"));
    assert_eq!(csv.lines().count(), 18);
}

/// One weight, one bias, identity physics: the toy stage-2 problem.
fn toy_bayesian() -> (PimlModel<AffinePhysics>, Dataset) {
    let data = linear_data(16, 3.0);
    let layer = DenseLayer::from_parts(1, 1, vec![0.7], vec![0.1], Activation::Identity).unwrap();
    let net = DenseNetwork::from_layers(vec![layer]).unwrap();
    let out = data.target_stats.clone().unwrap();
    let physics = AffinePhysics::diagonal(&out.std, &out.mean).unwrap();
    let m = PimlModel::new(net, physics, TransferMode::Direct, data.input_stats.clone().unwrap(), out).unwrap();
    let mut b = m.promote_to_bayesian(PriorScale::LayerWide, 0.5).unwrap();
    b.net.head_mut().unwrap().mu_w[0] = 0.9;
    (b, data)
}

#[test]
fn toy_stage2_gradient_matches_fd_under_common_random_numbers() {
    let (mut b, data) = toy_bayesian();
    let sample = b.net.head().unwrap().sample_weights(42);
    let obj = Objective {
        xs: data.inputs.iter().map(Vec::as_slice).collect(),
        ys: data.targets.iter().map(Vec::as_slice).collect(),
        lambda: 0.01,
        noise: 0.05,
        n_batches: 3,
        sample: Some(sample),
    };
    let r = fd_gradient_check(&mut b, &obj, 40, 1, 1e-12);
    assert!(r.max_rel < 1e-4, "{r:?}");
}

#[test]
fn loss_and_gradient_rejects_mismatched_batches() {
    let (b, data) = toy_bayesian();
    let xs: Vec<&[f64]> = data.inputs.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[f64]> = data.targets[..3].iter().map(Vec::as_slice).collect();
    assert!(matches!(
        loss_and_gradient(&b, &xs, &ys, None, 0.0, 0.05, 1),
        Err(Error::Dimension { .. })
    ));
}

fn gl_piml(epochs: usize) -> (PimlModel<Physics>, Dataset, Dataset) {
    let spec = load_spec("gramacy_lee.toml");
    let (train, test) = generate_data(&spec).unwrap();
    let mut m = build_model(&spec, Variant::PimlAnn, &train).unwrap();
    let cfg = TrainConfig {
        epochs,
        ..spec.train.piml.stage1.clone()
    };
    train_stage1(&mut m, &train, None, &cfg).unwrap();
    (m, train, test)
}

#[test]
fn zero_lambda_zero_sigma_reproduces_stage1() {
    let (m, train, _) = gl_piml(30);
    let cfg1 = TrainConfig {
        epochs: 5,
        learning_rate: 1e-3,
        batch_size: Some(64),
        seed: 9,
        ..TrainConfig::default()
    };
    let mut det = m.clone();
    train_stage1(&mut det, &train, None, &cfg1).unwrap();

    let promo = PromotionConfig {
        posterior_ratio: 0.0,
        ..PromotionConfig::default()
    };
    let mut bnn = promote_to_bayesian(&m, &promo).unwrap();
    assert_eq!(bnn.net.head().unwrap().mean_sigma(), 0.0);
    let cfg2 = TrainConfig {
        lambda_elbo: 0.0,
        stage: Stage::Bayesian,
        ..cfg1
    };
    let h = train_stage2(&mut bnn, &train, None, &cfg2).unwrap();
    assert_eq!(h.records.last().unwrap().elbo_term, 0.0);
    let (TransferNet::Deterministic(d), TransferNet::Bayesian { trunk, head }) = (&det.net, &bnn.net) else {
        panic!("unexpected network kinds");
    };
    let n = d.layers().len();
    for (a, b) in d.layers()[..n - 1].iter().zip(trunk) {
        assert_eq!(a, b);
    }
    assert_eq!(d.layers()[n - 1].weights(), head.mu_w.as_slice());
    assert_eq!(d.layers()[n - 1].biases(), head.mu_b.as_slice());
    assert_eq!(head.mean_sigma(), 0.0);
}

#[test]
fn promotion_keeps_trunk_and_priors_exact() {
    let (m, train, _) = gl_piml(5);
    let b = promote_to_bayesian(&m, &PromotionConfig::default()).unwrap();
    let TransferNet::Deterministic(d) = &m.net else { unreachable!() };
    let TransferNet::Bayesian { trunk, head } = &b.net else { unreachable!() };
    let last = d.layers().last().unwrap();
    assert_eq!(trunk.as_slice(), &d.layers()[..d.layers().len() - 1]);
    assert_eq!(head.prior_mu_w, last.weights());
    assert_eq!(head.mu_b, last.biases());
    let s = head.sigma_w();
    assert!(s.iter().zip(&head.prior_sigma_w).all(|(a, p)| (a - 0.5 * p).abs() <= 1e-15 * p));
    assert!(matches!(promote_to_bayesian(&b, &PromotionConfig::default()), Err(Error::AlreadyBayesian)));
    let mut again = b.clone();
    assert!(matches!(
        train_stage1(&mut again, &train, None, &TrainConfig::default()),
        Err(Error::AlreadyBayesian)
    ));
}

#[test]
fn stage2_requires_bayesian_model_and_stage() {
    let (mut m, train, _) = gl_piml(1);
    let cfg = TrainConfig {
        stage: Stage::Bayesian,
        ..TrainConfig::default()
    };
    assert!(matches!(train_stage2(&mut m, &train, None, &cfg), Err(Error::NotBayesian)));
    let mut b = promote_to_bayesian(&m, &PromotionConfig::default()).unwrap();
    assert!(train_stage2(&mut b, &train, None, &TrainConfig::default()).is_err());
}

#[test]
fn training_is_deterministic() {
    let spec = load_spec("gramacy_lee.toml");
    let (train, test) = generate_data(&spec).unwrap();
    let mut spec = spec;
    spec.train.piml.stage1.epochs = 20;
    spec.train.piml.stage2.epochs = 20;
    let run = || {
        let a = train_variant(&spec, Variant::PimlAnn, &train, &test, None).unwrap();
        let b = train_variant(&spec, Variant::PimlBnn, &train, &test, Some(&a.model)).unwrap();
        (a.model, b.model, b.history.to_csv(false))
    };
    let (a1, b1, h1) = run();
    let (a2, b2, h2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(h1, h2);
}

#[test]
fn rmse_examples() {
    let data = linear_data(30, 2.0);
    // Identity affine physics over a zero network is the constant-zero model.
    let net = DenseNetwork::from_layers(vec![DenseLayer::zeros(1, 1, Activation::Identity).unwrap()]).unwrap();
    let zero = PimlModel::new(
        net,
        AffinePhysics::diagonal(&[1.0], &[0.0]).unwrap(),
        TransferMode::Direct,
        NormStats::identity(1),
        data.target_stats.clone().unwrap(),
    )
    .unwrap();
    let r = evaluate_rmse(&zero, &data, 1, 0).unwrap();
    let want = (data.targets.iter().map(|y| y[0] * y[0]).sum::<f64>() / data.len() as f64).sqrt();
    assert!((r.total - want).abs() < 1e-12);

    let exact = PimlModel::new(
        DenseNetwork::from_layers(vec![DenseLayer::from_parts(1, 1, vec![2.0], vec![0.0], Activation::Identity).unwrap()])
            .unwrap(),
        AffinePhysics::diagonal(&[1.0], &[0.0]).unwrap(),
        TransferMode::Direct,
        NormStats::identity(1),
        data.target_stats.clone().unwrap(),
    )
    .unwrap();
    assert_eq!(evaluate_rmse(&exact, &data, 1, 0).unwrap().total, 0.0);
}

#[test]
fn trained_piml_beats_partial_physics() {
    let (m, _, test) = gl_piml(200);
    let spec = load_spec("gramacy_lee.toml");
    let (train, _) = generate_data(&spec).unwrap();
    let untrained = build_model(&spec, Variant::PimlAnn, &train).unwrap();
    let base = evaluate_rmse(&untrained, &test, 1, 0).unwrap().total;
    let trained = evaluate_rmse(&m, &test, 1, 0).unwrap().total;
    assert!(trained < base, "{trained} vs {base}");
}

#[test]
fn posterior_sigma_is_nondecreasing_in_lambda() {
    let (m, train, _) = gl_piml(300);
    let sigma = |lambda: f64| {
        let mut b = promote_to_bayesian(&m, &PromotionConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            lambda_elbo: lambda,
            batch_size: Some(192),
            seed: 3,
            stage: Stage::Bayesian,
            ..TrainConfig::default()
        };
        train_stage2(&mut b, &train, None, &cfg).unwrap();
        b.net.head().unwrap().mean_sigma()
    };
    let s: Vec<f64> = [0.0, 0.01, 0.1].into_iter().map(sigma).collect();
    assert!(s[0] <= s[1] && s[1] <= s[2], "sigma by lambda: {s:?}");
}

#[test]
fn frozen_hidden_layers_do_not_move() {
    let (m, train, _) = gl_piml(2);
    let mut b = promote_to_bayesian(&m, &PromotionConfig::default()).unwrap();
    let before = b.net.params()[..2].iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    let cfg = TrainConfig {
        epochs: 3,
        stage: Stage::Bayesian,
        freeze_hidden: true,
        ..TrainConfig::default()
    };
    train_stage2(&mut b, &train, None, &cfg).unwrap();
    let after = b.net.params()[..2].iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    assert_eq!(before, after);
}
