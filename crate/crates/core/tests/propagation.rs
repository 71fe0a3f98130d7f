mod common;

use common::load_spec;
use piml_core::bayes::{softplus, softplus_inv, PriorScale};
use piml_core::data::NormStats;
use piml_core::harness::{generate_data, train_variant, Variant};
use piml_core::nn::{Activation, DenseLayer, DenseNetwork};
use piml_core::physics::{AffinePhysics, GramacyLeePartial, Matrix, Physics};
use piml_core::rng::rng_from_seed;
use piml_core::uq::{
    propagate_end_to_end_mc, propagate_hybrid, propagate_taylor, transfer_uncertainty, uncertainty_band, BandScheme,
    Scheme, TaylorMode,
};
use piml_core::{Error, PimlModel, TransferMode};

fn gl_bayesian(sizes: &[usize], ratio: f64) -> PimlModel<Physics> {
    let mut net = DenseNetwork::new(sizes, 0.01, &mut rng_from_seed(21)).unwrap();
    for w in net.layers_mut().last_mut().unwrap().weights_mut() {
        *w *= 0.05;
    }
    PimlModel::new(
        net,
        Physics::GramacyLee(GramacyLeePartial::default()),
        TransferMode::Residual,
        NormStats::identity(1),
        NormStats::identity(1),
    )
    .unwrap()
    .promote_to_bayesian(PriorScale::LayerWide, ratio)
    .unwrap()
}

#[test]
fn zero_sigma_gives_zero_spread_everywhere() {
    let m = gl_bayesian(&[1, 8, 1], 0.0);
    let x = [1.3];
    let det = m.forward(&x).unwrap();
    assert_eq!(transfer_uncertainty(&m, &x, 20, 1).unwrap().t_spread, vec![0.0]);
    let mc = propagate_end_to_end_mc(&m, &x, 20, 1).unwrap();
    // Identical draws; only the rounding of their mean remains.
    let tiny = 1e-15 * det.y[0].abs();
    assert!(mc.y_spread[0] <= tiny);
    assert!((mc.y_mean[0] - det.y[0]).abs() <= tiny);
    let hy = propagate_hybrid(&m, &x, 20, 1, TaylorMode::Linear).unwrap();
    assert_eq!(hy.y_spread, vec![0.0]);
    let draws = m.predict_with_sampling(&x, 7, 3).unwrap();
    assert!(draws.iter().all(|d| d.y == Some(det.y.clone())));
    for scheme in BandScheme::ALL {
        let band = uncertainty_band(&m, &[vec![0.9], vec![2.1]], scheme, 20, 5).unwrap();
        for p in &band.points {
            assert!((p.hi[0] - p.lo[0]).abs() <= 1e-14 * p.mean[0].abs().max(1.0));
        }
    }
}

#[test]
fn linear_gaussian_transfer_spread() {
    // A single linear unit on the normalized input h: t = w h + b.
    let layer = DenseLayer::from_parts(1, 1, vec![0.8], vec![0.2], Activation::Identity).unwrap();
    let det = PimlModel::new(
        DenseNetwork::from_layers(vec![layer]).unwrap(),
        AffinePhysics::diagonal(&[1.0], &[0.0]).unwrap(),
        TransferMode::Direct,
        NormStats {
            mean: vec![1.0],
            std: vec![2.0],
        },
        NormStats::identity(1),
    )
    .unwrap();
    let mut m = det.promote_to_bayesian(PriorScale::LayerWide, 0.5).unwrap();
    let head = m.net.head_mut().unwrap();
    head.rho_w[0] = softplus_inv(0.3);
    head.rho_b[0] = -40.0;
    let sigma_w = softplus(head.rho_w[0]);
    let x = 4.0;
    let h: f64 = (x - 1.0) / 2.0;
    let tu = transfer_uncertainty(&m, &[x], 100_000, 8).unwrap();
    let want = h.abs() * sigma_w;
    assert!((tu.t_spread[0] - want).abs() < 0.01 * want, "{} vs {want}", tu.t_spread[0]);
}

#[test]
fn affine_mc_converges_to_quadrature() {
    let physics = AffinePhysics::new(
        Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap(),
        vec![0.0, 1.0],
    )
    .unwrap();
    let net = DenseNetwork::new(&[2, 5, 2], 0.01, &mut rng_from_seed(4)).unwrap();
    let m = PimlModel::new(net, physics, TransferMode::Direct, NormStats::identity(2), NormStats::identity(2))
        .unwrap()
        .promote_to_bayesian(PriorScale::PerOutputRow, 0.5)
        .unwrap();
    let x = [0.4, -0.7];
    let n = 50_000;
    let mc = propagate_end_to_end_mc(&m, &x, n, 1).unwrap();
    let tu = transfer_uncertainty(&m, &x, n, 2).unwrap();
    let q = propagate_taylor(&m.physics, &tu, TaylorMode::Quadrature).unwrap();
    for (a, b) in mc.y_spread.iter().zip(&q.y_spread) {
        assert!((a - b).abs() < 0.03 * b, "{a} vs {b}");
    }
    assert_eq!(mc.scheme, Scheme::EndToEndMc);
    assert_eq!(q.scheme, Scheme::TaylorQuadrature);
    assert_eq!(q.taylor, Some(TaylorMode::Quadrature));
}

#[test]
fn reports_record_sample_counts_and_schemes() {
    let m = gl_bayesian(&[1, 8, 1], 0.5);
    let r = propagate_end_to_end_mc(&m, &[1.0], 20, 0).unwrap();
    assert_eq!(r.n_samples, 20);
    let h = propagate_hybrid(&m, &[1.0], 20, 0, TaylorMode::Linear).unwrap();
    assert_eq!((h.scheme, h.taylor, h.n_samples), (Scheme::HybridMcTaylor, Some(TaylorMode::Linear), 20));
    assert!(matches!(
        propagate_end_to_end_mc(&m, &[1.0], 1, 0),
        Err(Error::InsufficientSamples { .. })
    ));
    let det = gl_bayesian(&[1, 8, 1], 0.5);
    let plain = PimlModel {
        net: piml_core::TransferNet::Deterministic(DenseNetwork::new(&[1, 2, 1], 0.01, &mut rng_from_seed(1)).unwrap()),
        ..det
    };
    assert!(matches!(transfer_uncertainty(&plain, &[1.0], 5, 0), Err(Error::NotBayesian)));
}

#[test]
fn band_width_is_four_spreads() {
    let m = gl_bayesian(&[1, 8, 1], 0.5);
    let grid: Vec<Vec<f64>> = (0..9).map(|i| vec![0.6 + 0.2 * i as f64]).collect();
    for scheme in BandScheme::ALL {
        let band = uncertainty_band(&m, &grid, scheme, 20, 77).unwrap();
        assert_eq!(band.n_samples, 20);
        for p in &band.points {
            let w = p.hi[0] - p.lo[0];
            assert!((w - 4.0 * p.spread[0]).abs() <= 1e-12 * w.max(1e-300));
        }
        let csv = band.to_csv(&["x".into()], &["y".into()]);
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "x,y_mean,y_lo,y_hi,scheme,n_samples,excluded");
        assert!(csv.lines().skip(1).all(|l| l.contains(&format!(",{scheme},20,"))));
    }
    // Bands are reproducible from their seed.
    let a = uncertainty_band(&m, &grid, BandScheme::EndToEndMc, 20, 77).unwrap();
    let b = uncertainty_band(&m, &grid, BandScheme::EndToEndMc, 20, 77).unwrap();
    assert_eq!(a, b);
}

#[test]
fn domain_violations_are_excluded_and_counted() {
    let mut m = gl_bayesian(&[1, 8, 1], 0.5);
    // Push the transfer near the upper evaluation limit with a wide posterior.
    let head = m.net.head_mut().unwrap();
    head.mu_b[0] = 2.95 - 2.5;
    for r in head.rho_w.iter_mut().chain(head.rho_b.iter_mut()) {
        *r = softplus_inv(0.05);
    }
    let r = propagate_end_to_end_mc(&m, &[2.5], 400, 1).unwrap();
    assert!(r.excluded_samples > 0 && r.excluded_samples < 400, "{}", r.excluded_samples);
    let band = uncertainty_band(&m, &[vec![2.5]], BandScheme::EndToEndMc, 400, 1).unwrap();
    assert!(band.points[0].excluded > 0);

    m.net.head_mut().unwrap().mu_b[0] = 10.0;
    assert!(matches!(
        propagate_end_to_end_mc(&m, &[2.5], 50, 1),
        Err(Error::AllSamplesExcluded(50))
    ));
}

#[test]
fn twenty_sample_spread_tracks_reference_on_trained_model() {
    let spec = load_spec("gramacy_lee.toml");
    let (train, test) = generate_data(&spec).unwrap();
    let ann = train_variant(&spec, Variant::PimlAnn, &train, &test, None).unwrap().model;
    let bnn = train_variant(&spec, Variant::PimlBnn, &train, &test, Some(&ann)).unwrap().model;
    for (i, x) in [0.7, 1.0, 1.3, 1.6, 1.9, 2.2].iter().enumerate() {
        let reference = propagate_end_to_end_mc(&bnn, &[*x], 2000, 1000 + i as u64).unwrap().y_spread[0];
        let small = propagate_end_to_end_mc(&bnn, &[*x], 20, i as u64).unwrap().y_spread[0];
        assert!((small - reference).abs() <= 0.4 * reference, "x = {x}: {small} vs {reference}");
    }
}
