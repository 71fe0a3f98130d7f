//! Fixed-wing net force model.
//!
//! Wind-frame coefficients come from a linear lift curve and a parabolic drag
//! polar, are rotated into the body frame through the angle of attack (small
//! sideslip), scaled by dynamic pressure, and summed with a linear thrust model
//! and gravity. The body z axis points down.

use serde::{Deserialize, Serialize};

use super::{domain_error, Matrix, PhysicsModel};
use crate::error::{check_dim, Result};

/// Transfer parameter order for the aircraft case.
pub const TRANSFER_NAMES: [&str; 6] = ["v_inf", "alpha", "beta", "aileron", "rudder", "throttle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeroState {
    /// Airspeed, m/s.
    pub v_inf: f64,
    /// Angle of attack, rad.
    pub alpha: f64,
    /// Sideslip, rad.
    pub beta: f64,
    pub aileron: f64,
    pub rudder: f64,
    /// Fraction in `[0, 1]`.
    pub throttle: f64,
}

impl AeroState {
    pub fn from_slice(t: &[f64]) -> Result<Self> {
        check_dim("aero state", 6, t.len())?;
        Ok(Self {
            v_inf: t[0],
            alpha: t[1],
            beta: t[2],
            aileron: t[3],
            rudder: t[4],
            throttle: t[5],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.v_inf, self.alpha, self.beta, self.aileron, self.rudder, self.throttle]
    }
}

/// Physical constants and stand-in coefficient parameters, RC-aircraft scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeroConstants {
    /// Air density, kg/m^3.
    pub rho: f64,
    /// Reference wing area, m^2.
    pub s_ref: f64,
    /// Mass, kg.
    pub mass: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Lift at zero angle of attack.
    pub cl0: f64,
    /// Lift slope, 1/rad.
    pub cl_alpha: f64,
    /// Parasitic drag.
    pub cd0: f64,
    /// Induced drag factor.
    pub k_induced: f64,
    /// Side force per rad of sideslip.
    pub cy_beta: f64,
    /// Side force per rad of rudder.
    pub cy_rudder: f64,
    /// Static thrust at full throttle, N.
    pub thrust_max: f64,
}

impl Default for AeroConstants {
    fn default() -> Self {
        Self {
            rho: 1.225,
            s_ref: 0.3,
            mass: 1.5,
            g: 9.81,
            cl0: 0.25,
            cl_alpha: 5.0,
            cd0: 0.03,
            k_induced: 0.06,
            cy_beta: -0.5,
            cy_rudder: 0.15,
            thrust_max: 15.0,
        }
    }
}

impl AeroConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("s_ref", self.s_ref), ("mass", self.mass), ("g", self.g)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::InvalidConfig(format!("aero constant {name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Wind-frame `(C_L, C_D, C_Y)`. Aileron deflection does not enter.
pub fn standin_coefficients(state: &AeroState, c: &AeroConstants) -> (f64, f64, f64) {
    let cl = c.cl0 + c.cl_alpha * state.alpha;
    let cd = c.cd0 + c.k_induced * cl * cl;
    let cy = c.cy_beta * state.beta + c.cy_rudder * state.rudder;
    (cl, cd, cy)
}

/// Body-frame `(C_X, C_Y, C_Z)` under the small-sideslip assumption.
pub fn wind_to_body(cl: f64, cd: f64, cy: f64, alpha: f64) -> [f64; 3] {
    let (s, co) = alpha.sin_cos();
    [-cd * co + cl * s, cy, -cd * s - cl * co]
}

pub fn body_forces(coeffs: [f64; 3], state: &AeroState, c: &AeroConstants) -> [f64; 3] {
    let qs = 0.5 * c.rho * state.v_inf * state.v_inf * c.s_ref;
    coeffs.map(|k| qs * k)
}

/// Aerodynamic forces plus thrust along body x and gravity rotated by alpha.
pub fn net_forces(f_aero: [f64; 3], state: &AeroState, c: &AeroConstants) -> [f64; 3] {
    let w = c.mass * c.g;
    let (s, co) = state.alpha.sin_cos();
    [
        f_aero[0] + c.thrust_max * state.throttle - w * s,
        f_aero[1],
        f_aero[2] + w * co,
    ]
}

fn pipeline(state: &AeroState, c: &AeroConstants) -> [f64; 3] {
    let (cl, cd, cy) = standin_coefficients(state, c);
    let coeffs = wind_to_body(cl, cd, cy, state.alpha);
    net_forces(body_forces(coeffs, state, c), state, c)
}

/// `d(F_x, F_y, F_z) / d(v_inf, alpha, beta, aileron, rudder, throttle)`.
pub fn aero_jacobian(t: &[f64], c: &AeroConstants) -> Result<Matrix> {
    let st = AeroState::from_slice(t)?;
    let (cl, cd, cy) = standin_coefficients(&st, c);
    let [cx, _, cz] = wind_to_body(cl, cd, cy, st.alpha);
    let (s, co) = st.alpha.sin_cos();
    let q_s = 0.5 * c.rho * st.v_inf * st.v_inf * c.s_ref;
    let dqs_dv = c.rho * st.v_inf * c.s_ref;
    let w = c.mass * c.g;

    let dcl = c.cl_alpha;
    let dcd = 2.0 * c.k_induced * cl * dcl;
    let dcx = -dcd * co + cd * s + dcl * s + cl * co;
    let dcz = -dcd * s - cd * co - dcl * co + cl * s;

    let mut j = Matrix::zeros(3, 6);
    j[(0, 0)] = dqs_dv * cx;
    j[(1, 0)] = dqs_dv * cy;
    j[(2, 0)] = dqs_dv * cz;
    j[(0, 1)] = q_s * dcx - w * co;
    j[(2, 1)] = q_s * dcz - w * s;
    j[(1, 2)] = q_s * c.cy_beta;
    j[(1, 4)] = q_s * c.cy_rudder;
    j[(0, 5)] = c.thrust_max;
    Ok(j)
}

/// Net body-frame forces as a 6 -> 3 physics component over
/// [`TRANSFER_NAMES`]-ordered transfer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedWingForces {
    pub constants: AeroConstants,
}

impl FixedWingForces {
    fn state(&self, t: &[f64]) -> Result<AeroState> {
        let st = AeroState::from_slice(t)?;
        if !(st.v_inf > 0.0) || t.iter().any(|v| !v.is_finite()) {
            return Err(domain_error(t, "airspeed must be positive and finite"));
        }
        Ok(st)
    }
}

impl PhysicsModel for FixedWingForces {
    fn input_dim(&self) -> usize {
        6
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn evaluate(&self, t: &[f64]) -> Result<Vec<f64>> {
        let st = self.state(t)?;
        Ok(pipeline(&st, &self.constants).to_vec())
    }

    fn jacobian(&self, t: &[f64]) -> Result<Matrix> {
        self.state(t)?;
        aero_jacobian(t, &self.constants)
    }
}
