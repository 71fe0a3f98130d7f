//! Dataset synthesis, normalization, splitting and CSV persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::physics::{
    body_forces, gl_full, net_forces, wind_to_body, AeroConstants, AeroState, GL_DOMAIN, TRANSFER_NAMES,
};
use crate::rng::rng_for;

pub const AERO_TARGET_NAMES: [&str; 3] = ["f_x", "f_y", "f_z"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GramacyLee,
    SyntheticAero,
    ExternalCsv,
}

/// Per-dimension z-score statistics (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("normalization rows"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            check_dim("normalization row", d, r.len())?;
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    /// Identity statistics of dimension `d`.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("stats", self.mean.len(), self.std.len())?;
        if let Some(j) = self.std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::ZeroVariance(j));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invariant("non-finite normalization mean".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
    pub provenance: Provenance,
    pub input_stats: Option<NormStats>,
    pub target_stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        input_names: Vec<String>,
        target_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        check_dim("dataset rows", inputs.len(), targets.len())?;
        for (x, y) in inputs.iter().zip(&targets) {
            check_dim("dataset input width", input_names.len(), x.len())?;
            check_dim("dataset target width", target_names.len(), y.len())?;
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::Invariant("dataset contains non-finite entries".into()));
            }
        }
        Ok(Self {
            inputs,
            targets,
            input_names,
            target_names,
            provenance,
            input_stats: None,
            target_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn target_dim(&self) -> usize {
        self.target_names.len()
    }

    /// Computes input and target statistics from this dataset's rows.
    pub fn fit_stats(&mut self) -> Result<()> {
        self.input_stats = Some(NormStats::from_rows(&self.inputs)?);
        self.target_stats = Some(NormStats::from_rows(&self.targets)?);
        Ok(())
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            input_names: self.input_names.clone(),
            target_names: self.target_names.clone(),
            provenance: self.provenance,
            input_stats: None,
            target_stats: None,
        }
    }

    /// Headered CSV: input columns then target columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = self
            .input_names
            .iter()
            .chain(&self.target_names)
            .map(String::as_str)
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(y).map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Writes `path` and a `<path>.stats.json` sidecar; returns the sidecar path.
    pub fn write(&self, path: &Path) -> Result<std::path::PathBuf> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("stats.json");
        let stats = serde_json::json!({
            "provenance": self.provenance,
            "rows": self.len(),
            "input_names": self.input_names,
            "target_names": self.target_names,
            "input_stats": self.input_stats,
            "target_stats": self.target_stats,
        });
        std::fs::write(&sidecar, serde_json::to_string_pretty(&stats)? + "\n").map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }

    /// Reads a headered CSV whose last `n_targets` columns are targets.
    pub fn read_csv(path: &Path, n_targets: usize, provenance: Provenance) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, n_targets, provenance)
    }

    pub fn parse_csv(text: &str, n_targets: usize, provenance: Provenance) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or(Error::Empty("csv header"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if header.len() <= n_targets {
            return Err(Error::Csv(format!(
                "expected more than {n_targets} columns, header has {}",
                header.len()
            )));
        }
        let n_in = header.len() - n_targets;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv(format!("row {}: {e}", lineno + 1)))?;
            if vals.len() != header.len() {
                return Err(Error::Csv(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 1,
                    header.len(),
                    vals.len()
                )));
            }
            inputs.push(vals[..n_in].to_vec());
            targets.push(vals[n_in..].to_vec());
        }
        if inputs.is_empty() {
            return Err(Error::Empty("csv rows"));
        }
        Self::new(
            inputs,
            targets,
            header[..n_in].to_vec(),
            header[n_in..].to_vec(),
            provenance,
        )
    }
}

/// `n` points uniform over `[0.5, 2.5]` with targets from the full model plus
/// optional Gaussian noise.
pub fn generate_gramacy_lee(n: usize, seed: u64, noise_std: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
    }
    let mut rng = rng_for(seed, "gramacy_lee", 0);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(GL_DOMAIN.0..=GL_DOMAIN.1);
        let mut y = gl_full(x);
        if noise_std > 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            y += noise_std * e;
        }
        inputs.push(vec![x]);
        targets.push(vec![y]);
    }
    Dataset::new(inputs, targets, vec!["x".into()], vec!["y".into()], Provenance::GramacyLee)
}

/// The systematic gap between the stand-in physics and the synthetic
/// "measured" forces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeroPerturbation {
    /// Lift slope multiplier grows as `1 + lift_slope_gain * alpha`.
    pub lift_slope_gain: f64,
    /// Added to the drag coefficient.
    pub drag_offset: f64,
    /// Side force per rad of aileron, absent from the stand-in.
    pub aileron_side_force: f64,
    /// Multiplies the thrust model.
    pub thrust_scale: f64,
}

impl Default for AeroPerturbation {
    fn default() -> Self {
        Self {
            lift_slope_gain: 1.5,
            drag_offset: 0.02,
            aileron_side_force: 0.05,
            thrust_scale: 0.85,
        }
    }
}

impl AeroPerturbation {
    pub fn none() -> Self {
        Self {
            lift_slope_gain: 0.0,
            drag_offset: 0.0,
            aileron_side_force: 0.0,
            thrust_scale: 1.0,
        }
    }
}

/// Sampling ranges for the synthetic aircraft inputs (angles in degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeroRanges {
    pub v_inf: (f64, f64),
    pub alpha_deg: (f64, f64),
    pub beta_deg: (f64, f64),
    pub deflection_deg: (f64, f64),
    pub throttle: (f64, f64),
}

impl Default for AeroRanges {
    fn default() -> Self {
        Self {
            v_inf: (10.0, 30.0),
            alpha_deg: (-5.0, 15.0),
            beta_deg: (-2.0, 10.0),
            deflection_deg: (-15.0, 15.0),
            throttle: (0.0, 1.0),
        }
    }
}

/// Forces with the perturbation applied.
pub fn perturbed_forces(state: &AeroState, c: &AeroConstants, p: &AeroPerturbation) -> [f64; 3] {
    let cl = c.cl0 + c.cl_alpha * state.alpha * (1.0 + p.lift_slope_gain * state.alpha);
    let cd = c.cd0 + p.drag_offset + c.k_induced * cl * cl;
    let cy = c.cy_beta * state.beta + c.cy_rudder * state.rudder + p.aileron_side_force * state.aileron;
    let coeffs = wind_to_body(cl, cd, cy, state.alpha);
    let scaled = AeroConstants {
        thrust_max: c.thrust_max * p.thrust_scale,
        ..*c
    };
    net_forces(body_forces(coeffs, state, c), state, &scaled)
}

pub fn generate_synthetic_aero(
    n: usize,
    seed: u64,
    perturbation: &AeroPerturbation,
    constants: &AeroConstants,
    ranges: &AeroRanges,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    constants.validate()?;
    if !(ranges.v_inf.0 > 0.0) || !(ranges.throttle.0 >= 0.0 && ranges.throttle.1 <= 1.0) {
        return Err(Error::InvalidConfig("aero ranges violate state invariants".into()));
    }
    let mut rng = rng_for(seed, "synthetic_aero", 0);
    let mut uniform = |(lo, hi): (f64, f64)| -> f64 { rng.random_range(lo..=hi) };
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let state = AeroState {
            v_inf: uniform(ranges.v_inf),
            alpha: uniform(ranges.alpha_deg).to_radians(),
            beta: uniform(ranges.beta_deg).to_radians(),
            aileron: uniform(ranges.deflection_deg).to_radians(),
            rudder: uniform(ranges.deflection_deg).to_radians(),
            throttle: uniform(ranges.throttle),
        };
        targets.push(perturbed_forces(&state, constants, perturbation).to_vec());
        inputs.push(state.to_vec());
    }
    Dataset::new(
        inputs,
        targets,
        TRANSFER_NAMES.iter().map(|s| s.to_string()).collect(),
        AERO_TARGET_NAMES.iter().map(|s| s.to_string()).collect(),
        Provenance::SyntheticAero,
    )
}

/// Seeded-shuffle partition. Both halves carry statistics fitted on the
/// training rows only.
pub fn split(data: &Dataset, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + n_test > data.len() {
        return Err(Error::InsufficientSamples {
            requested: n_train + n_test,
            available: data.len(),
        });
    }
    if n_train == 0 {
        return Err(Error::InvalidConfig("n_train must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_for(seed, "split", 0));
    let mut train = data.subset(&idx[..n_train]);
    let mut test = data.subset(&idx[n_train..n_train + n_test]);
    train.fit_stats()?;
    test.input_stats = train.input_stats.clone();
    test.target_stats = train.target_stats.clone();
    Ok((train, test))
}
