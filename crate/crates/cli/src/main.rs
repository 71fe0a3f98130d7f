//! `piml`: datasets, training, uncertainty bands and experiment manifests.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use piml_core::harness::{self, ExperimentSpec, Manifest, Variant};
use piml_core::uq::BandScheme;
use piml_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "piml", version, about = "Physics-informed Bayesian surrogate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the case-study dataset.
    Generate(Common),
    /// Train one variant (and the stage-1 variant it depends on).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Variant,
    },
    /// Uncertainty bands from a Bayesian model of a finished run.
    Uq {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "piml_bnn")]
        variant: Variant,
        #[arg(long, default_value = "end_to_end_mc")]
        scheme: BandScheme,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Run every variant in the config and write the manifest.
    Experiment(Common),
    /// RMSE, training time and parameter table of a finished run.
    Compare {
        /// Run directory holding manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-hash every file listed in a run's manifest.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentSpec, PathBuf), Error> {
    let mut spec = ExperimentSpec::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((spec, out))
}

fn manifest_summary(m: &Manifest, dir: &Path) -> serde_json::Value {
    json!({
        "status": if m.complete { "ok" } else { "partial" },
        "manifest": dir.join("manifest.json"),
        "numeric_digest": m.numeric_digest,
        "variants": m.variants.iter().map(|r| json!({
            "variant": r.variant,
            "status": r.status,
            "rmse_total": r.rmse.as_ref().map(|s| s.total),
        })).collect::<Vec<_>>(),
    })
}

fn run(cli: Cli) -> Result<(serde_json::Value, bool), Error> {
    match cli.command {
        Command::Generate(common) => {
            let (spec, out) = load(&common)?;
            let files = harness::write_datasets(&spec, &out)?;
            Ok((json!({ "status": "ok", "files": files }), true))
        }
        Command::Train { common, variant } => {
            let (spec, out) = load(&common)?;
            let m = harness::run_experiment(&spec.restricted_to(variant), &out)?;
            Ok((manifest_summary(&m, &out), m.complete))
        }
        Command::Uq {
            common,
            variant,
            scheme,
            samples,
        } => {
            let (spec, out) = load(&common)?;
            let path = harness::run_uq(&spec, &out, variant, scheme, samples)?;
            Ok((json!({ "status": "ok", "bands": path, "scheme": scheme, "n_samples": samples }), true))
        }
        Command::Experiment(common) => {
            let (spec, out) = load(&common)?;
            let m = harness::run_experiment(&spec, &out)?;
            Ok((manifest_summary(&m, &out), m.complete))
        }
        Command::Compare { out } => {
            let m = Manifest::read(&out)?;
            let table = harness::compare_baselines(&m)?;
            print!("{}", table.to_csv());
            Ok((serde_json::Value::Null, true))
        }
        Command::Verify { out } => {
            let report = harness::verify(&out)?;
            let ok = report.ok();
            Ok((json!({ "status": if ok { "ok" } else { "mismatch" }, "report": report }), ok))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((summary, ok)) => {
            if !summary.is_null() {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json values serialize"));
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let body = json!({
                "error": e.to_string(),
                "kind": e.kind(),
                "path": e.path(),
            });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
