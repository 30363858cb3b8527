//! Nonlinear lateral vehicle model in curvilinear track coordinates.
//!
//! The state lives in the Frenet frame of a track centerline: longitudinal
//! and lateral body velocities, yaw rate, heading error, arc-length progress
//! and lateral deviation. Tire forces follow the Pacejka magic formula
//! `2 D sin(C arctan(B alpha))`; integration is explicit Euler.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Vehicle parameters for a small-scale (1/10) car.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass [kg].
    pub m: f64,
    /// Yaw inertia [kg m^2].
    pub iz: f64,
    /// Front axle to CG [m].
    pub lf: f64,
    /// Rear axle to CG [m].
    pub lr: f64,
    pub bf: f64,
    pub br: f64,
    pub cf: f64,
    pub cr: f64,
    pub df: f64,
    pub dr: f64,
    /// Simulation time step [s].
    pub dt_sim: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let m = 1.98;
        Self {
            m,
            iz: 0.024,
            lf: 0.125,
            lr: 0.125,
            bf: 1.0,
            br: 1.0,
            cf: 1.25,
            cr: 1.25,
            df: 0.8 * m * 9.81 * 0.5,
            dr: 0.8 * m * 9.81 * 0.5,
            dt_sim: 1e-3,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("df", self.df),
            ("dr", self.dr),
            ("dt_sim", self.dt_sim),
        ];
        for (name, value) in positive {
            if value <= 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "vehicle parameter {name} must be positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Vehicle state `[vx, vy, phi, e_phi, s, e_y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    /// Longitudinal velocity [m/s].
    pub vx: f64,
    /// Lateral velocity [m/s].
    pub vy: f64,
    /// Yaw rate [rad/s].
    pub phi: f64,
    /// Heading error to the centerline [rad].
    pub e_phi: f64,
    /// Arc-length progress along the centerline [m].
    pub s: f64,
    /// Lateral deviation from the centerline [m].
    pub e_y: f64,
}

impl VehicleState {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.vx, self.vy, self.phi, self.e_phi, self.s, self.e_y])
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::DimensionMismatch {
                what: "vehicle state",
                expected: 6,
                got: v.len(),
            });
        }
        Ok(Self {
            vx: v[0],
            vy: v[1],
            phi: v[2],
            e_phi: v[3],
            s: v[4],
            e_y: v[5],
        })
    }
}

/// Which axle's Pacejka coefficients to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axle {
    Front,
    Rear,
}

/// Lateral tire force `2 D sin(C arctan(B alpha))` [N].
pub fn tire_lateral_force(params: &VehicleParams, slip_angle: f64, axle: Axle) -> f64 {
    let (b, c, d) = match axle {
        Axle::Front => (params.bf, params.cf, params.df),
        Axle::Rear => (params.br, params.cr, params.dr),
    };
    2.0 * d * (c * (b * slip_angle).atan()).sin()
}

/// One explicit-Euler step of the lateral vehicle model at curvature `kappa`.
///
/// Slip angles are computed internally from the current state; `u` is
/// `[a, delta]` (longitudinal acceleration, steering angle).
pub fn vehicle_step(
    params: &VehicleParams,
    x: &VehicleState,
    u: &DVector<f64>,
    kappa: f64,
) -> Result<VehicleState> {
    if u.len() != 2 {
        return Err(Error::DimensionMismatch {
            what: "vehicle input",
            expected: 2,
            got: u.len(),
        });
    }
    if x.vx <= 0.0 {
        return Err(Error::SingularState(format!(
            "longitudinal velocity must be positive to evaluate slip angles, got vx = {}",
            x.vx
        )));
    }
    let denom = 1.0 - kappa * x.e_y;
    if denom.abs() < 1e-9 {
        return Err(Error::SingularState(format!(
            "1 - kappa*e_y = {denom} is singular (kappa = {kappa}, e_y = {})",
            x.e_y
        )));
    }

    let (a, delta) = (u[0], u[1]);
    let alpha_f = delta - ((x.vy + params.lf * x.phi) / x.vx).atan();
    let alpha_r = -((x.vy - params.lf * x.phi) / x.vx).atan();
    let f_yf = tire_lateral_force(params, alpha_f, Axle::Front);
    let f_yr = tire_lateral_force(params, alpha_r, Axle::Rear);

    let dt = params.dt_sim;
    let s_dot = (x.vx * x.e_phi.cos() - x.vy * x.e_phi.sin()) / denom;
    Ok(VehicleState {
        vx: x.vx + dt * (a - f_yf * delta.sin() / params.m + x.phi * x.vy),
        vy: x.vy + dt * ((f_yf * delta.cos() + f_yr) / params.m - x.phi * x.vx),
        phi: x.phi + dt * (params.lf * f_yf * delta.cos() - params.lr * f_yr) / params.iz,
        e_phi: x.e_phi + dt * (x.phi - s_dot * kappa),
        s: x.s + dt * s_dot,
        e_y: x.e_y + dt * (x.vx * x.e_phi.sin() + x.vy * x.e_phi.cos()),
    })
}

/// Proportional centerline-tracking gains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PidGains {
    /// Steering gain on lateral deviation.
    pub k1: f64,
    /// Steering gain on heading error.
    pub k2: f64,
    /// Acceleration gain on speed error.
    pub k3: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            k1: 0.8,
            k2: 0.8,
            k3: 2.0,
        }
    }
}

/// Centerline tracking law `delta = -k1 e_y - k2 e_phi`, `a = k3 (v_d - vx)`.
pub fn pid_tracking_control(gains: &PidGains, x: &VehicleState, v_d: f64) -> DVector<f64> {
    DVector::from_row_slice(&[
        gains.k3 * (v_d - x.vx),
        -gains.k1 * x.e_y - gains.k2 * x.e_phi,
    ])
}
