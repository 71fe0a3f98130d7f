//! Differentiable partial-physics models.
//!
//! Every model maps a vector of transfer parameters `t` (length `p`) to
//! outputs `y` (length `m`) and supplies the analytic Jacobian `dy/dt` as an
//! `m x p` matrix.

mod aero;
mod gramacy_lee;

use serde::{Deserialize, Serialize};

pub use aero::{
    aero_jacobian, body_forces, net_forces, standin_coefficients, wind_to_body, AeroConstants, AeroState,
    FixedWingForces, TRANSFER_NAMES,
};
pub use gramacy_lee::{
    gl_full, gl_ideal_transfer, gl_partial, gl_partial_derivative, GramacyLeePartial, GL_DOMAIN,
};

use crate::error::{check_dim, Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim("matrix row", c, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, vi) in self.data.chunks_exact(self.cols).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub trait PhysicsModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, t: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, t: &[f64]) -> Result<Matrix>;
}

/// `y = A t + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePhysics {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl AffinePhysics {
    pub fn new(matrix: Matrix, offset: Vec<f64>) -> Result<Self> {
        check_dim("affine offset", matrix.rows, offset.len())?;
        Ok(Self { matrix, offset })
    }

    /// Elementwise `y = scale * t + offset`, used to map normalized network
    /// outputs back to physical units for the pure-network baselines.
    pub fn diagonal(scale: &[f64], offset: &[f64]) -> Result<Self> {
        Self::new(Matrix::diag(scale), offset.to_vec())
    }
}

impl PhysicsModel for AffinePhysics {
    fn input_dim(&self) -> usize {
        self.matrix.cols
    }

    fn output_dim(&self) -> usize {
        self.matrix.rows
    }

    fn evaluate(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_dim("affine input", self.matrix.cols, t.len())?;
        let mut y = self.matrix.mul_vec(t);
        y.iter_mut().zip(&self.offset).for_each(|(y, c)| *y += c);
        Ok(y)
    }

    fn jacobian(&self, t: &[f64]) -> Result<Matrix> {
        check_dim("affine input", self.matrix.cols, t.len())?;
        Ok(self.matrix.clone())
    }
}

/// The physics components the experiment harness knows how to persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Physics {
    GramacyLee(GramacyLeePartial),
    FixedWing(FixedWingForces),
    Affine(AffinePhysics),
}

impl Physics {
    pub fn identifier(&self) -> &'static str {
        match self {
            Physics::GramacyLee(_) => "gramacy_lee_partial",
            Physics::FixedWing(_) => "fixed_wing_forces",
            Physics::Affine(_) => "affine",
        }
    }

    fn inner(&self) -> &dyn PhysicsModel {
        match self {
            Physics::GramacyLee(p) => p,
            Physics::FixedWing(p) => p,
            Physics::Affine(p) => p,
        }
    }
}

impl PhysicsModel for Physics {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }
    fn evaluate(&self, t: &[f64]) -> Result<Vec<f64>> {
        self.inner().evaluate(t)
    }
    fn jacobian(&self, t: &[f64]) -> Result<Matrix> {
        self.inner().jacobian(t)
    }
}

pub(crate) fn domain_error(t: &[f64], reason: impl Into<String>) -> Error {
    Error::PhysicsDomain {
        t: t.to_vec(),
        reason: reason.into(),
    }
}
