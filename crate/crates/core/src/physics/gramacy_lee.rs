//! Partial and full Gramacy & Lee models.
//!
//! The partial model is `sin(10 pi t) / (2 t) + (t - 1)^4`. The full model is
//! the partial model composed with the ideal input transfer
//! `0.5 + 2 sin(pi (x - 0.5) / 4)`, which maps `[0.5, 2.5]` onto itself.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{domain_error, Matrix, PhysicsModel};
use crate::error::{check_dim, Error, Result};

pub const GL_DOMAIN: (f64, f64) = (0.5, 2.5);

#[inline]
fn partial_unchecked(t: f64) -> f64 {
    (10.0 * PI * t).sin() / (2.0 * t) + (t - 1.0).powi(4)
}

fn singular(t: f64) -> Error {
    domain_error(&[t], "partial model is singular at t = 0")
}

pub fn gl_partial(t: f64) -> Result<f64> {
    if t == 0.0 {
        return Err(singular(t));
    }
    Ok(partial_unchecked(t))
}

pub fn gl_partial_derivative(t: f64) -> Result<f64> {
    if t == 0.0 {
        return Err(singular(t));
    }
    let w = 10.0 * PI;
    Ok((w * (w * t).cos() * 2.0 * t - 2.0 * (w * t).sin()) / (4.0 * t * t) + 4.0 * (t - 1.0).powi(3))
}

pub fn gl_ideal_transfer(x: f64) -> f64 {
    0.5 + 2.0 * (PI * (x - 0.5) / 4.0).sin()
}

pub fn gl_full(x: f64) -> f64 {
    partial_unchecked(gl_ideal_transfer(x))
}

/// The partial model as a 1 -> 1 physics component, restricted to an
/// evaluation interval wider than the data domain so that imperfect learned
/// transfers stay evaluable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramacyLeePartial {
    pub lower: f64,
    pub upper: f64,
}

impl Default for GramacyLeePartial {
    fn default() -> Self {
        Self {
            lower: 0.25,
            upper: 3.0,
        }
    }
}

impl GramacyLeePartial {
    fn check(&self, t: &[f64]) -> Result<f64> {
        check_dim("gramacy-lee transfer", 1, t.len())?;
        let v = t[0];
        if !(v >= self.lower && v <= self.upper) {
            return Err(domain_error(
                t,
                format!("outside evaluation interval [{}, {}]", self.lower, self.upper),
            ));
        }
        Ok(v)
    }
}

impl PhysicsModel for GramacyLeePartial {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, t: &[f64]) -> Result<Vec<f64>> {
        let v = self.check(t)?;
        Ok(vec![gl_partial(v)?])
    }

    fn jacobian(&self, t: &[f64]) -> Result<Matrix> {
        let v = self.check(t)?;
        Ok(Matrix {
            rows: 1,
            cols: 1,
            data: vec![gl_partial_derivative(v)?],
        })
    }
}
