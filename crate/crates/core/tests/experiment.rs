mod common;

use common::config_path;
use piml_core::harness::{
    compare_baselines, recompute_rmse, run_experiment, run_uq, verify, ExperimentSpec, Manifest, Variant,
    VariantStatus,
};
use piml_core::uq::BandScheme;
use piml_core::Error;

const SMALL: &str = r#"
case_study = "gramacy_lee"
variants = ["ann", "piml_ann", "bnn", "piml_bnn"]
seed = 5

[data]
n_samples = 120
n_train = 80
n_test = 20

[network.ann]
hidden = [8, 8]

[network.piml]
hidden = [6]

[train.ann.stage1]
epochs = 5
batch_size = 16
[train.ann.stage2]
epochs = 3
batch_size = 40
[train.piml.stage1]
epochs = 5
batch_size = 16
[train.piml.stage2]
epochs = 3
batch_size = 40

[uq]
samples = 20
grid_points = 15
rmse_samples = 10
"#;

fn small() -> ExperimentSpec {
    ExperimentSpec::from_toml_str(SMALL).unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["gramacy_lee.toml", "gramacy_lee_wide.toml", "fixed_wing.toml"] {
        let spec = ExperimentSpec::from_path(&config_path(name)).unwrap();
        assert_eq!(spec.variants.len(), 4, "{name}");
        assert_eq!(ExperimentSpec::from_toml_str(&spec.to_toml().unwrap()).unwrap(), spec);
    }
}

#[test]
fn config_errors_are_reported() {
    let unknown = SMALL.replace("[uq]", "[uq]\nsampels = 3");
    assert!(matches!(ExperimentSpec::from_toml_str(&unknown), Err(Error::Config(_))));
    let orphan = SMALL.replace(r#"["ann", "piml_ann", "bnn", "piml_bnn"]"#, r#"["ann", "piml_bnn"]"#);
    match ExperimentSpec::from_toml_str(&orphan) {
        Err(Error::Config(m)) => assert!(m.contains("piml_ann"), "{m}"),
        other => panic!("{other:?}"),
    }
    let missing = config_path("does_not_exist.toml");
    match ExperimentSpec::from_path(&missing) {
        Err(e) => assert!(e.to_string().contains("does_not_exist.toml")),
        Ok(_) => panic!("missing config accepted"),
    }
}

#[test]
fn full_pipeline_writes_verifiable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small();
    let m = run_experiment(&spec, dir.path()).unwrap();
    assert!(m.complete);
    assert_eq!(m.variants.len(), 4);
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);

    for v in Variant::ALL {
        let r = m.record(v).unwrap();
        assert_eq!(r.status, VariantStatus::Completed);
        assert_eq!(r.bands.len(), if v.is_bayesian() { spec.uq.schemes.len() } else { 0 });
        let again = recompute_rmse(dir.path(), &m, v).unwrap();
        let saved = r.rmse.as_ref().unwrap().total;
        assert!((again.total - saved).abs() <= 1e-12 * saved.max(1.0), "{v:?}: {} vs {saved}", again.total);
    }

    let table = compare_baselines(&m).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.to_csv().starts_with("variant,rmse_y,rmse_total,train_time_min,n_params\n"));

    let band = run_uq(&spec, dir.path(), Variant::PimlBnn, BandScheme::EndToEndMc, 20).unwrap();
    let csv = std::fs::read_to_string(band).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",end_to_end_mc,20,")));
    assert!(matches!(
        run_uq(&spec, dir.path(), Variant::Ann, BandScheme::EndToEndMc, 20),
        Err(Error::InvalidConfig(_))
    ));

    let report = verify(dir.path()).unwrap();
    assert!(report.ok(), "{report:?}");
    assert_eq!(report.checked, m.files.len());

    std::fs::write(dir.path().join("rmse.csv"), "tampered\n").unwrap();
    std::fs::remove_file(dir.path().join("errors/ann.csv")).unwrap();
    let report = verify(dir.path()).unwrap();
    assert_eq!(report.mismatched, vec!["rmse.csv".to_string()]);
    assert_eq!(report.missing, vec!["errors/ann.csv".to_string()]);
}

#[test]
fn comparison_needs_two_variants() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small().restricted_to(Variant::Ann);
    assert_eq!(spec.variants, vec![Variant::Ann]);
    let m = run_experiment(&spec, dir.path()).unwrap();
    assert!(matches!(
        compare_baselines(&m),
        Err(Error::InsufficientSamples { requested: 2, available: 1 })
    ));
}

#[test]
fn failed_variant_is_recorded_and_dependents_skipped() {
    // A huge step throws the transfer out of the physics domain at once.
    let text = SMALL.replace("[train.piml.stage1]\nepochs = 5", "[train.piml.stage1]\nepochs = 5\nlearning_rate = 50.0");
    let spec = ExperimentSpec::from_toml_str(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&spec, dir.path()).unwrap();
    assert!(!m.complete);
    assert_eq!(m.record(Variant::Ann).unwrap().status, VariantStatus::Completed);
    assert_eq!(m.record(Variant::Bnn).unwrap().status, VariantStatus::Completed);
    assert!(matches!(m.record(Variant::PimlAnn).unwrap().status, VariantStatus::Failed { .. }));
    assert!(matches!(m.record(Variant::PimlBnn).unwrap().status, VariantStatus::Skipped { .. }));
    assert_eq!(compare_baselines(&m).unwrap().rows.len(), 2);
    assert!(verify(dir.path()).unwrap().ok());
}

#[test]
fn reruns_share_a_numeric_digest() {
    let spec = small().restricted_to(Variant::PimlBnn);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_experiment(&spec, a.path()).unwrap();
    let mb = run_experiment(&spec, b.path()).unwrap();
    assert_eq!(ma.numeric_digest, mb.numeric_digest);
    assert_eq!(ma.seeds, mb.seeds);
}
