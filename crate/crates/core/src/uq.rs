//! Uncertainty propagation over a Bayesian-head model.
//!
//! Spread is one sample standard deviation (n - 1 denominator); bands are
//! `mean ± 2 * spread`. Samples whose transfer parameters leave the physics
//! domain are excluded and counted, never clamped.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::physics::PhysicsModel;
use crate::piml::PimlModel;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorMode {
    /// `sum_i |J_ji| eps_i`.
    Linear,
    /// `sqrt(sum_i (J_ji eps_i)^2)`.
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TaylorLinear,
    TaylorQuadrature,
    EndToEndMc,
    HybridMcTaylor,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::TaylorLinear => "taylor_linear",
            Scheme::TaylorQuadrature => "taylor_quadrature",
            Scheme::EndToEndMc => "end_to_end_mc",
            Scheme::HybridMcTaylor => "hybrid_mc_taylor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferUncertainty {
    pub t_mean: Vec<f64>,
    pub t_spread: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub y_mean: Vec<f64>,
    pub y_spread: Vec<f64>,
    pub scheme: Scheme,
    /// Taylor variant used, for the Taylor and hybrid schemes.
    pub taylor: Option<TaylorMode>,
    pub n_samples: usize,
    pub excluded_samples: usize,
}

/// Per-dimension sample mean and standard deviation.
pub fn sample_stats(rows: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.len() < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: rows.len(),
        });
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        check_dim("sample row", d, r.len())?;
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    Ok((mean, var.into_iter().map(|s| (s / (n - 1.0)).sqrt()).collect()))
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: n_samples,
        });
    }
    Ok(())
}

/// Spread of the transfer parameters under output-layer weight sampling.
pub fn transfer_uncertainty<P: PhysicsModel>(
    model: &PimlModel<P>,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<TransferUncertainty> {
    check_samples(n_samples)?;
    let draws = model.predict_with_sampling(x, n_samples, seed)?;
    let rows: Vec<&[f64]> = draws.iter().map(|d| d.t.as_slice()).collect();
    let (t_mean, t_spread) = sample_stats(&rows)?;
    Ok(TransferUncertainty {
        t_mean,
        t_spread,
        n_samples,
    })
}

/// First-order propagation of independent transfer spreads through the
/// physics Jacobian at the mean.
pub fn propagate_taylor<P: PhysicsModel + ?Sized>(
    physics: &P,
    tu: &TransferUncertainty,
    mode: TaylorMode,
) -> Result<UncertaintyReport> {
    check_dim("transfer mean", physics.input_dim(), tu.t_mean.len())?;
    check_dim("transfer spread", physics.input_dim(), tu.t_spread.len())?;
    let y_mean = physics.evaluate(&tu.t_mean)?;
    let jac = physics.jacobian(&tu.t_mean)?;
    let y_spread = (0..jac.rows)
        .map(|j| {
            let terms = (0..jac.cols).map(|i| (jac[(j, i)] * tu.t_spread[i]).abs());
            match mode {
                TaylorMode::Linear => terms.sum(),
                TaylorMode::Quadrature => terms.map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .collect();
    Ok(UncertaintyReport {
        y_mean,
        y_spread,
        scheme: match mode {
            TaylorMode::Linear => Scheme::TaylorLinear,
            TaylorMode::Quadrature => Scheme::TaylorQuadrature,
        },
        taylor: Some(mode),
        n_samples: tu.n_samples,
        excluded_samples: 0,
    })
}

/// Sample statistics of full forward passes through the physics.
pub fn propagate_end_to_end_mc<P: PhysicsModel>(
    model: &PimlModel<P>,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    check_samples(n_samples)?;
    let draws = model.predict_with_sampling(x, n_samples, seed)?;
    let rows: Vec<&[f64]> = draws.iter().filter_map(|d| d.y.as_deref()).collect();
    if rows.is_empty() {
        return Err(Error::AllSamplesExcluded(n_samples));
    }
    let (y_mean, y_spread) = sample_stats(&rows)?;
    Ok(UncertaintyReport {
        y_mean,
        y_spread,
        scheme: Scheme::EndToEndMc,
        taylor: None,
        n_samples,
        excluded_samples: n_samples - rows.len(),
    })
}

/// Monte Carlo over the transfer network, then Taylor through the physics.
pub fn propagate_hybrid<P: PhysicsModel>(
    model: &PimlModel<P>,
    x: &[f64],
    n_samples: usize,
    seed: u64,
    mode: TaylorMode,
) -> Result<UncertaintyReport> {
    let tu = transfer_uncertainty(model, x, n_samples, seed)?;
    let mut report = propagate_taylor(&model.physics, &tu, mode)?;
    report.scheme = Scheme::HybridMcTaylor;
    Ok(report)
}

/// Propagation path used for bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandScheme {
    EndToEndMc,
    HybridLinear,
    HybridQuadrature,
}

impl BandScheme {
    pub const ALL: [BandScheme; 3] = [BandScheme::EndToEndMc, BandScheme::HybridLinear, BandScheme::HybridQuadrature];

    pub fn as_str(self) -> &'static str {
        match self {
            BandScheme::EndToEndMc => "end_to_end_mc",
            BandScheme::HybridLinear => "hybrid_linear",
            BandScheme::HybridQuadrature => "hybrid_quadrature",
        }
    }

    pub fn propagate<P: PhysicsModel>(
        self,
        model: &PimlModel<P>,
        x: &[f64],
        n_samples: usize,
        seed: u64,
    ) -> Result<UncertaintyReport> {
        match self {
            BandScheme::EndToEndMc => propagate_end_to_end_mc(model, x, n_samples, seed),
            BandScheme::HybridLinear => propagate_hybrid(model, x, n_samples, seed, TaylorMode::Linear),
            BandScheme::HybridQuadrature => propagate_hybrid(model, x, n_samples, seed, TaylorMode::Quadrature),
        }
    }
}

impl fmt::Display for BandScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scheme '{s}' (expected end_to_end_mc, hybrid_linear or hybrid_quadrature)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub spread: Vec<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBand {
    pub scheme: BandScheme,
    pub n_samples: usize,
    pub points: Vec<BandPoint>,
}

/// Point `i` of a band is seeded with `derive_seed(seed, "band", i)`.
pub fn band_point_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "band", index as u64)
}

/// `mean ± 2 * spread` at every grid point.
pub fn uncertainty_band<P: PhysicsModel>(
    model: &PimlModel<P>,
    grid: &[Vec<f64>],
    scheme: BandScheme,
    n_samples: usize,
    seed: u64,
) -> Result<UncertaintyBand> {
    if grid.is_empty() {
        return Err(Error::Empty("band grid"));
    }
    let points = grid
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let r = scheme.propagate(model, x, n_samples, band_point_seed(seed, i))?;
            let lo = r.y_mean.iter().zip(&r.y_spread).map(|(m, s)| m - 2.0 * s).collect();
            let hi = r.y_mean.iter().zip(&r.y_spread).map(|(m, s)| m + 2.0 * s).collect();
            Ok(BandPoint {
                x: x.clone(),
                mean: r.y_mean,
                lo,
                hi,
                spread: r.y_spread,
                excluded: r.excluded_samples,
            })
        })
        .collect::<Result<_>>()?;
    Ok(UncertaintyBand {
        scheme,
        n_samples,
        points,
    })
}

impl UncertaintyBand {
    /// `x..., y_mean..., y_lo..., y_hi..., scheme, n_samples, excluded`.
    pub fn to_csv(&self, input_names: &[String], output_names: &[String]) -> String {
        let mut cols: Vec<String> = input_names.to_vec();
        for tag in ["mean", "lo", "hi"] {
            cols.extend(output_names.iter().map(|n| format!("{n}_{tag}")));
        }
        cols.extend(["scheme", "n_samples", "excluded"].map(String::from));
        let mut out = cols.join(",");
        out.push('\n');
        for p in &self.points {
            let nums: Vec<String> = p
                .x
                .iter()
                .chain(&p.mean)
                .chain(&p.lo)
                .chain(&p.hi)
                .map(|v| format!("{v}"))
                .collect();
            let _ = writeln!(out, "{},{},{},{}", nums.join(","), self.scheme, self.n_samples, p.excluded);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{AffinePhysics, Matrix};

    fn affine(rows: Vec<Vec<f64>>) -> AffinePhysics {
        let m = rows.len();
        AffinePhysics::new(Matrix::from_rows(&rows).unwrap(), vec![0.0; m]).unwrap()
    }

    #[test]
    fn linear_map_arithmetic() {
        let phys = affine(vec![vec![3.0, 2.0]]);
        let tu = TransferUncertainty {
            t_mean: vec![0.0, 0.0],
            t_spread: vec![0.1, 0.2],
            n_samples: 20,
        };
        let lin = propagate_taylor(&phys, &tu, TaylorMode::Linear).unwrap();
        let quad = propagate_taylor(&phys, &tu, TaylorMode::Quadrature).unwrap();
        assert!((lin.y_spread[0] - 0.7).abs() < 1e-15);
        assert!((quad.y_spread[0] - 0.5).abs() < 1e-15);
        assert_eq!(lin.scheme, Scheme::TaylorLinear);
        assert_eq!(quad.scheme, Scheme::TaylorQuadrature);
        assert_eq!(quad.n_samples, 20);
    }

    #[test]
    fn negative_partials_do_not_cancel() {
        let phys = affine(vec![vec![1.0, -1.0]]);
        let tu = TransferUncertainty {
            t_mean: vec![0.0, 0.0],
            t_spread: vec![0.3, 0.3],
            n_samples: 2,
        };
        assert!((propagate_taylor(&phys, &tu, TaylorMode::Linear).unwrap().y_spread[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn identity_physics_passes_spread_through() {
        let phys = affine(vec![vec![1.0]]);
        let tu = TransferUncertainty {
            t_mean: vec![0.7],
            t_spread: vec![0.25],
            n_samples: 5,
        };
        for mode in [TaylorMode::Linear, TaylorMode::Quadrature] {
            let r = propagate_taylor(&phys, &tu, mode).unwrap();
            assert_eq!(r.y_spread, vec![0.25]);
            assert_eq!(r.y_mean, vec![0.7]);
        }
    }

    #[test]
    fn sample_stats_by_hand() {
        let a = [1.0, 10.0];
        let b = [3.0, 10.0];
        let c = [5.0, 10.0];
        let (m, s) = sample_stats(&[&a, &b, &c]).unwrap();
        assert_eq!(m, vec![3.0, 10.0]);
        assert_eq!(s, vec![2.0, 0.0]);
        assert!(sample_stats(&[&a]).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in BandScheme::ALL {
            assert_eq!(s.as_str().parse::<BandScheme>().unwrap(), s);
        }
        assert!("taylor".parse::<BandScheme>().is_err());
    }
}
