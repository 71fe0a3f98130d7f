//! Experiment runner: data generation, the four baseline variants, RMSE,
//! uncertainty bands and a hashed manifest of everything written.
//!
//! Every random stream is derived from the master seed as
//! `derive_seed(master, label, index)`; the labels are listed in the
//! manifest's `seeds` map.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{load_model, save_model, sha256_hex};
use crate::data::{generate_gramacy_lee, generate_synthetic_aero, split, AeroPerturbation, AeroRanges, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::{DenseNetwork, Parameterized, DEFAULT_LEAKY_SLOPE};
use crate::physics::{AeroConstants, AffinePhysics, FixedWingForces, GramacyLeePartial, Physics, PhysicsModel, GL_DOMAIN};
use crate::piml::{PimlModel, TransferMode};
use crate::rng::{derive_seed, rng_for};
use crate::train::{evaluate_rmse, train_stage1, train_stage2, ConvergenceHistory, PromotionConfig, RmseReport, Stage, TrainConfig};
use crate::uq::{uncertainty_band, BandScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStudy {
    GramacyLee,
    FixedWingAero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ann,
    PimlAnn,
    Bnn,
    PimlBnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ann, Variant::PimlAnn, Variant::Bnn, Variant::PimlBnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ann => "ann",
            Variant::PimlAnn => "piml_ann",
            Variant::Bnn => "bnn",
            Variant::PimlBnn => "piml_bnn",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Variant::Bnn | Variant::PimlBnn)
    }

    pub fn is_piml(self) -> bool {
        matches!(self, Variant::PimlAnn | Variant::PimlBnn)
    }

    /// The stage-1 variant a Bayesian variant is promoted from.
    pub fn stage1_parent(self) -> Option<Variant> {
        match self {
            Variant::Bnn => Some(Variant::Ann),
            Variant::PimlBnn => Some(Variant::PimlAnn),
            _ => None,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}' (expected ann, piml_ann, bnn or piml_bnn)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub n_samples: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Gramacy & Lee observation noise.
    pub noise_std: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_train: 900,
            n_test: 100,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Ignored for the pure-network variants, which always map directly.
    pub mode: TransferMode,
    /// Start the output layer at zero (with residual mode: the bare physics).
    pub zero_init_output: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![200; 5],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            mode: TransferMode::Residual,
            zero_init_output: true,
        }
    }
}

fn default_stage2() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        stage: Stage::Bayesian,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StagePairRaw")]
pub struct StagePair {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

/// Keys missing from a `stage2` table fall back to the stage-2 defaults
/// rather than the generic training defaults.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StagePairRaw {
    stage1: TrainConfig,
    stage2: serde_json::Map<String, serde_json::Value>,
}

impl Default for StagePairRaw {
    fn default() -> Self {
        Self {
            stage1: TrainConfig::default(),
            stage2: serde_json::Map::new(),
        }
    }
}

impl TryFrom<StagePairRaw> for StagePair {
    type Error = serde_json::Error;

    fn try_from(raw: StagePairRaw) -> std::result::Result<Self, Self::Error> {
        let serde_json::Value::Object(mut merged) = serde_json::to_value(default_stage2())? else {
            unreachable!("a struct serializes to an object")
        };
        merged.extend(raw.stage2);
        Ok(Self {
            stage1: raw.stage1,
            stage2: serde_json::from_value(serde_json::Value::Object(merged))?,
        })
    }
}

impl Default for StagePair {
    fn default() -> Self {
        Self {
            stage1: TrainConfig::default(),
            stage2: default_stage2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworksSpec {
    pub ann: NetworkSpec,
    pub piml: NetworkSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub ann: StagePair,
    pub piml: StagePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqSpec {
    pub schemes: Vec<BandScheme>,
    pub samples: usize,
    /// Gramacy & Lee band grid size; the aircraft case uses the test inputs.
    pub grid_points: usize,
    /// Weight samples per row for Bayesian RMSE.
    pub rmse_samples: usize,
}

impl Default for UqSpec {
    fn default() -> Self {
        Self {
            schemes: vec![BandScheme::EndToEndMc, BandScheme::HybridQuadrature],
            samples: 20,
            grid_points: 200,
            rmse_samples: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeroSpec {
    pub constants: AeroConstants,
    pub perturbation: AeroPerturbation,
    pub ranges: AeroRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub case_study: CaseStudy,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub network: NetworksSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub promotion: PromotionConfig,
    #[serde(default)]
    pub uq: UqSpec,
    #[serde(default)]
    pub aero: AeroSpec,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(Error::Config("duplicate variant".into()));
        }
        for v in &self.variants {
            if let Some(parent) = v.stage1_parent() {
                if !self.variants.contains(&parent) {
                    return Err(Error::Config(format!(
                        "variant {} needs its stage-1 variant {} in the same experiment",
                        v.as_str(),
                        parent.as_str()
                    )));
                }
            }
        }
        let d = &self.data;
        if d.n_train < 2 || d.n_test == 0 || d.n_train + d.n_test > d.n_samples {
            return Err(Error::Config(format!(
                "data: need n_train >= 2, n_test >= 1 and n_train + n_test <= n_samples (got {} + {} of {})",
                d.n_train, d.n_test, d.n_samples
            )));
        }
        if !(d.noise_std >= 0.0) {
            return Err(Error::Config("data.noise_std must be >= 0".into()));
        }
        for (name, net) in [("ann", &self.network.ann), ("piml", &self.network.piml)] {
            if net.hidden.contains(&0) {
                return Err(Error::Config(format!("network.{name}: hidden widths must be > 0")));
            }
        }
        for pair in [&self.train.ann, &self.train.piml] {
            pair.stage1.validate()?;
            pair.stage2.validate()?;
        }
        if !(self.promotion.posterior_ratio >= 0.0) {
            return Err(Error::Config("promotion.posterior_ratio must be >= 0".into()));
        }
        if self.uq.samples < 2 || self.uq.rmse_samples == 0 || self.uq.grid_points == 0 {
            return Err(Error::Config("uq: need samples >= 2, rmse_samples >= 1, grid_points >= 1".into()));
        }
        self.aero.constants.validate()?;
        Ok(())
    }

    /// The spec narrowed to `variant` and the stage-1 variant it depends on.
    pub fn restricted_to(&self, variant: Variant) -> Self {
        let mut s = self.clone();
        s.variants = variant.stage1_parent().into_iter().chain([variant]).collect();
        s
    }

    fn physics(&self) -> Physics {
        match self.case_study {
            CaseStudy::GramacyLee => Physics::GramacyLee(GramacyLeePartial::default()),
            CaseStudy::FixedWingAero => Physics::FixedWing(FixedWingForces {
                constants: self.aero.constants,
            }),
        }
    }

    fn stage_pair(&self, v: Variant) -> &StagePair {
        if v.is_piml() {
            &self.train.piml
        } else {
            &self.train.ann
        }
    }
}

pub fn seed_data(master: u64) -> u64 {
    derive_seed(master, "data", 0)
}

pub fn seed_split(master: u64) -> u64 {
    derive_seed(master, "split", 0)
}

pub fn seed_init(master: u64, v: Variant) -> u64 {
    derive_seed(master, "init", v.index())
}

pub fn seed_train(master: u64, v: Variant) -> u64 {
    derive_seed(master, "train", v.index())
}

pub fn seed_rmse(master: u64, v: Variant) -> u64 {
    derive_seed(master, "rmse", v.index())
}

pub fn seed_band(master: u64, v: Variant, scheme: BandScheme) -> u64 {
    let s = BandScheme::ALL.iter().position(|b| *b == scheme).unwrap_or(0) as u64;
    derive_seed(master, "bands", v.index() * 16 + s)
}

/// Generates and splits the case-study dataset; both halves carry the
/// training statistics.
pub fn generate_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let d = &spec.data;
    let full = match spec.case_study {
        CaseStudy::GramacyLee => generate_gramacy_lee(d.n_samples, seed_data(spec.seed), d.noise_std)?,
        CaseStudy::FixedWingAero => generate_synthetic_aero(
            d.n_samples,
            seed_data(spec.seed),
            &spec.aero.perturbation,
            &spec.aero.constants,
            &spec.aero.ranges,
        )?,
    };
    split(&full, d.n_train, d.n_test, seed_split(spec.seed))
}

/// Untrained stage-1 model for `variant` (its stage-1 parent for Bayesian
/// variants).
pub fn build_model(spec: &ExperimentSpec, variant: Variant, train: &Dataset) -> Result<PimlModel<Physics>> {
    let variant = variant.stage1_parent().unwrap_or(variant);
    let in_stats = train.input_stats.clone().ok_or(Error::Empty("training input statistics"))?;
    let out_stats = train.target_stats.clone().ok_or(Error::Empty("training target statistics"))?;
    let (net_spec, physics, mode) = if variant.is_piml() {
        (&spec.network.piml, spec.physics(), spec.network.piml.mode)
    } else {
        let phys = Physics::Affine(AffinePhysics::diagonal(&out_stats.std, &out_stats.mean)?);
        (&spec.network.ann, phys, TransferMode::Direct)
    };
    let mut sizes = vec![train.input_dim()];
    sizes.extend(&net_spec.hidden);
    sizes.push(physics.input_dim());
    let mut net = DenseNetwork::new(&sizes, net_spec.leaky_slope, &mut rng_for(seed_init(spec.seed, variant), "layers", 0))?;
    if net_spec.zero_init_output && variant.is_piml() {
        let last = net.layers_mut().last_mut().expect("at least one layer");
        last.weights_mut().fill(0.0);
        last.biases_mut().fill(0.0);
    }
    PimlModel::new(net, physics, mode, in_stats, out_stats)
}

/// Evaluation grid for bands.
pub fn band_grid(spec: &ExperimentSpec, test: &Dataset) -> Vec<Vec<f64>> {
    match spec.case_study {
        CaseStudy::GramacyLee => {
            let n = spec.uq.grid_points;
            let (lo, hi) = GL_DOMAIN;
            (0..n)
                .map(|i| {
                    let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                    vec![lo + (hi - lo) * f]
                })
                .collect()
        }
        CaseStudy::FixedWingAero => test.inputs.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum VariantStatus {
    Completed,
    Failed { error: String },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub per_output: Vec<f64>,
    pub total: f64,
    pub n_mc: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant: Variant,
    pub status: VariantStatus,
    pub n_params: usize,
    /// Training wall time (not part of any hash).
    pub wall_ms: f64,
    pub rmse: Option<RmseSummary>,
    pub model: Option<String>,
    pub history: Option<String>,
    pub bands: Vec<String>,
    pub excluded_training_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
    /// Hash with wall-clock columns blanked; equal across reruns.
    pub numeric_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub build: String,
    pub spec: ExperimentSpec,
    pub seeds: BTreeMap<String, u64>,
    pub target_names: Vec<String>,
    pub variants: Vec<VariantRecord>,
    pub files: Vec<FileEntry>,
    /// Hash over every file's `numeric_sha256`.
    pub numeric_digest: String,
    pub complete: bool,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn record(&self, v: Variant) -> Option<&VariantRecord> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

pub fn build_id() -> String {
    format!("piml-core {}", env!("CARGO_PKG_VERSION"))
}

/// Removes the trailing `wall_ms` column from a history CSV.
fn strip_wall(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        })
}

struct Writer {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn write(&mut self, rel: &str, content: &[u8], numeric: Option<&[u8]>) -> Result<String> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.add(rel, content, numeric);
        Ok(rel.to_string())
    }

    fn add(&mut self, rel: &str, content: &[u8], numeric: Option<&[u8]>) {
        let sha = sha256_hex(content);
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: content.len(),
            numeric_sha256: numeric.map_or_else(|| sha.clone(), sha256_hex),
            sha256: sha,
        });
    }

    fn add_existing(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.add(rel, &bytes, None);
        Ok(())
    }
}

pub struct Trained {
    pub model: PimlModel<Physics>,
    pub history: ConvergenceHistory,
}

/// Trains one variant with the seeds the experiment runner uses. Bayesian
/// variants need their trained stage-1 `parent`.
pub fn train_variant(
    spec: &ExperimentSpec,
    v: Variant,
    train: &Dataset,
    test: &Dataset,
    parent: Option<&PimlModel<Physics>>,
) -> Result<Trained> {
    let pair = spec.stage_pair(v);
    if let Some(p) = parent {
        let mut model = crate::train::promote_to_bayesian(p, &spec.promotion)?;
        let cfg = TrainConfig {
            seed: seed_train(spec.seed, v),
            stage: Stage::Bayesian,
            ..pair.stage2.clone()
        };
        let history = train_stage2(&mut model, train, Some(test), &cfg)?;
        Ok(Trained { model, history })
    } else {
        let mut model = build_model(spec, v, train)?;
        let cfg = TrainConfig {
            seed: seed_train(spec.seed, v),
            stage: Stage::Deterministic,
            ..pair.stage1.clone()
        };
        let history = train_stage1(&mut model, train, Some(test), &cfg)?;
        Ok(Trained { model, history })
    }
}

fn rmse_csv_row(v: Variant, r: &RmseSummary) -> String {
    let mut row = v.as_str().to_string();
    for x in r.per_output.iter().chain([&r.total]) {
        let _ = write!(row, ",{x}");
    }
    let _ = write!(row, ",{}", r.n_mc);
    row
}

fn errors_csv(test: &Dataset, report: &RmseReport) -> String {
    let mut out = String::from("index");
    for n in &test.input_names {
        let _ = write!(out, ",{n}");
    }
    for n in &test.target_names {
        let _ = write!(out, ",{n}_abs_err");
    }
    out.push('\n');
    for (i, (x, e)) in test.inputs.iter().zip(&report.abs_errors).enumerate() {
        let _ = write!(out, "{i}");
        for v in x.iter().chain(e) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Post-training outputs of one variant: model, history, RMSE, errors, bands.
fn emit_variant(
    spec: &ExperimentSpec,
    v: Variant,
    trained: &Trained,
    test: &Dataset,
    grid: &[Vec<f64>],
    w: &mut Writer,
) -> Result<VariantRecord> {
    let name = v.as_str();
    let model_rel = format!("models/{name}.bin");
    std::fs::create_dir_all(w.root.join("models")).map_err(|e| Error::io(w.root.join("models"), e))?;
    save_model(&trained.model, seed_init(spec.seed, v.stage1_parent().unwrap_or(v)), &w.root.join(&model_rel))?;
    w.add_existing(&model_rel)?;
    w.add_existing(&format!("models/{name}.json"))?;

    let hist = trained.history.to_csv(true);
    let hist_rel = w.write(
        &format!("history/{name}.csv"),
        hist.as_bytes(),
        Some(strip_wall(&hist).as_bytes()),
    )?;

    let n_mc = if v.is_bayesian() { spec.uq.rmse_samples } else { 1 };
    let rmse_seed = seed_rmse(spec.seed, v);
    let report = evaluate_rmse(&trained.model, test, n_mc, rmse_seed)?;
    w.write(&format!("errors/{name}.csv"), errors_csv(test, &report).as_bytes(), None)?;

    let mut bands = Vec::new();
    if v.is_bayesian() {
        for &scheme in &spec.uq.schemes {
            let band = uncertainty_band(&trained.model, grid, scheme, spec.uq.samples, seed_band(spec.seed, v, scheme))?;
            let csv = band.to_csv(&test.input_names, &test.target_names);
            bands.push(w.write(&format!("bands/{name}_{scheme}.csv"), csv.as_bytes(), None)?);
        }
    }
    Ok(VariantRecord {
        variant: v,
        status: VariantStatus::Completed,
        n_params: trained.model.net.num_params(),
        wall_ms: trained.history.total_wall_ms(),
        rmse: Some(RmseSummary {
            per_output: report.per_output,
            total: report.total,
            n_mc,
            seed: rmse_seed,
        }),
        model: Some(model_rel),
        history: Some(hist_rel),
        bands,
        excluded_training_rows: trained.history.excluded_rows(),
    })
}

fn failed(v: Variant, status: VariantStatus) -> VariantRecord {
    VariantRecord {
        variant: v,
        status,
        n_params: 0,
        wall_ms: 0.0,
        rmse: None,
        model: None,
        history: None,
        bands: Vec::new(),
        excluded_training_rows: 0,
    }
}

/// Runs every requested variant in dependency order and writes the artifacts
/// under `out`. A failing variant is recorded in the manifest (and its
/// dependents skipped) rather than aborting the run.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = Writer {
        root: out.to_path_buf(),
        files: Vec::new(),
    };
    w.write("config.toml", spec.to_toml()?.as_bytes(), None)?;
    let (train, test) = generate_data(spec)?;
    w.write("data/train.csv", train.to_csv().as_bytes(), None)?;
    w.write("data/test.csv", test.to_csv().as_bytes(), None)?;
    let grid = band_grid(spec, &test);

    let ordered: Vec<Variant> = Variant::ALL.into_iter().filter(|v| spec.variants.contains(v)).collect();
    // Stage-1 variants are independent of each other, as are stage-2 ones.
    let stage1: Vec<Variant> = ordered.iter().copied().filter(|v| !v.is_bayesian()).collect();
    let stage2: Vec<Variant> = ordered.iter().copied().filter(|v| v.is_bayesian()).collect();
    let trained1: Vec<(Variant, Result<Trained>)> = {
        use rayon::prelude::*;
        stage1
            .par_iter()
            .map(|&v| (v, train_variant(spec, v, &train, &test, None)))
            .collect()
    };
    let trained2: Vec<(Variant, Result<Trained>)> = {
        use rayon::prelude::*;
        stage2
            .par_iter()
            .map(|&v| {
                let parent = v.stage1_parent().expect("bayesian variants have a parent");
                let result = match trained1.iter().find(|(p, _)| *p == parent) {
                    Some((_, Ok(p))) => train_variant(spec, v, &train, &test, Some(&p.model)),
                    _ => Err(Error::Invariant(format!("stage-1 variant {} unavailable", parent.as_str()))),
                };
                (v, result)
            })
            .collect()
    };

    let mut records = Vec::new();
    for (v, result) in trained1.iter().chain(&trained2) {
        let record = match result {
            Ok(t) => emit_variant(spec, *v, t, &test, &grid, &mut w)
                .unwrap_or_else(|e| failed(*v, VariantStatus::Failed { error: e.to_string() })),
            Err(Error::Invariant(reason)) if v.is_bayesian() => failed(*v, VariantStatus::Skipped { reason: reason.clone() }),
            Err(e) => failed(*v, VariantStatus::Failed { error: e.to_string() }),
        };
        records.push(record);
    }
    records.sort_by_key(|r| r.variant);

    let mut rmse = String::from("variant");
    for n in &test.target_names {
        let _ = write!(rmse, ",{n}");
    }
    rmse.push_str(",total,n_mc\n");
    for r in &records {
        if let Some(s) = &r.rmse {
            rmse.push_str(&rmse_csv_row(r.variant, s));
            rmse.push('\n');
        }
    }
    w.write("rmse.csv", rmse.as_bytes(), None)?;

    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), spec.seed);
    seeds.insert("data".to_string(), seed_data(spec.seed));
    seeds.insert("split".to_string(), seed_split(spec.seed));
    for &v in &ordered {
        let n = v.as_str();
        if !v.is_bayesian() {
            seeds.insert(format!("init/{n}"), seed_init(spec.seed, v));
        }
        seeds.insert(format!("train/{n}"), seed_train(spec.seed, v));
        seeds.insert(format!("rmse/{n}"), seed_rmse(spec.seed, v));
        if v.is_bayesian() {
            for &s in &spec.uq.schemes {
                seeds.insert(format!("bands/{n}/{s}"), seed_band(spec.seed, v, s));
            }
        }
    }
    w.files.sort_by(|a, b| a.path.cmp(&b.path));
    let digest_input: String = w.files.iter().map(|f| format!("{} {}\n", f.path, f.numeric_sha256)).collect();
    let manifest = Manifest {
        build: build_id(),
        spec: spec.clone(),
        seeds,
        target_names: test.target_names.clone(),
        complete: records.iter().all(|r| r.status == VariantStatus::Completed),
        variants: records,
        numeric_digest: sha256_hex(digest_input.as_bytes()),
        files: w.files,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Writes just the split datasets.
pub fn write_datasets(spec: &ExperimentSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, test) = generate_data(spec)?;
    let dir = out.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (name, d) in [("train.csv", &train), ("test.csv", &test)] {
        let p = dir.join(name);
        written.push(p.clone());
        written.push(d.write(&p)?);
    }
    Ok(written)
}

/// Bands for one saved Bayesian model of a finished run.
pub fn run_uq(spec: &ExperimentSpec, run_dir: &Path, variant: Variant, scheme: BandScheme, samples: usize) -> Result<PathBuf> {
    if !variant.is_bayesian() {
        return Err(Error::InvalidConfig(format!("variant {} has no Bayesian layer", variant.as_str())));
    }
    let (model, _) = load_model(&run_dir.join(format!("models/{}.bin", variant.as_str())))?;
    let (_, test) = generate_data(spec)?;
    let grid = band_grid(spec, &test);
    let band = uncertainty_band(&model, &grid, scheme, samples, seed_band(spec.seed, variant, scheme))?;
    let dir = run_dir.join("bands");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}_{}_n{}.csv", variant.as_str(), scheme, samples));
    std::fs::write(&path, band.to_csv(&test.input_names, &test.target_names)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub per_output: Vec<f64>,
    pub total: f64,
    pub wall_ms: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub target_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for n in &self.target_names {
            let _ = write!(out, ",rmse_{n}");
        }
        out.push_str(",rmse_total,train_time_min,n_params\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.variant.as_str());
            for v in &r.per_output {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{}", r.total, r.wall_ms / 60_000.0, r.n_params);
        }
        out
    }
}

/// RMSE, training time and parameter count of every completed variant.
pub fn compare_baselines(manifest: &Manifest) -> Result<ComparisonTable> {
    let rows: Vec<ComparisonRow> = manifest
        .variants
        .iter()
        .filter_map(|r| {
            let s = r.rmse.as_ref()?;
            Some(ComparisonRow {
                variant: r.variant,
                per_output: s.per_output.clone(),
                total: s.total,
                wall_ms: r.wall_ms,
                n_params: r.n_params,
            })
        })
        .collect();
    if rows.len() < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: rows.len(),
        });
    }
    Ok(ComparisonTable {
        target_names: manifest.target_names.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Re-hashes every file listed in a run's manifest.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let manifest = Manifest::read(dir)?;
    let mut report = VerifyReport {
        checked: 0,
        mismatched: Vec::new(),
        missing: Vec::new(),
    };
    for f in &manifest.files {
        match std::fs::read(dir.join(&f.path)) {
            Ok(bytes) => {
                report.checked += 1;
                if sha256_hex(&bytes) != f.sha256 {
                    report.mismatched.push(f.path.clone());
                }
            }
            Err(_) => report.missing.push(f.path.clone()),
        }
    }
    Ok(report)
}

/// Recomputes a variant's RMSE from its saved model and the saved test split.
pub fn recompute_rmse(dir: &Path, manifest: &Manifest, v: Variant) -> Result<RmseReport> {
    let record = manifest.record(v).ok_or(Error::Empty("variant record"))?;
    let rmse = record.rmse.as_ref().ok_or(Error::Empty("variant RMSE"))?;
    let (model, _) = load_model(&dir.join(record.model.as_ref().ok_or(Error::Empty("model path"))?))?;
    let provenance = match manifest.spec.case_study {
        CaseStudy::GramacyLee => Provenance::GramacyLee,
        CaseStudy::FixedWingAero => Provenance::SyntheticAero,
    };
    let test = Dataset::read_csv(&dir.join("data/test.csv"), model.output_dim(), provenance)?;
    evaluate_rmse(&model, &test, rmse.n_mc, rmse.seed)
}
