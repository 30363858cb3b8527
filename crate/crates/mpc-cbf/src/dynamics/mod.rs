//! Plant models and their simulation stepping.

mod sysid;
mod vehicle;

pub use sysid::{fit_linear_model, one_step_rms, LinearModel};
pub use vehicle::{
    pid_tracking_control, tire_lateral_force, vehicle_step, Axle, PidGains, VehicleParams,
    VehicleState,
};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A discrete-time transition map `x_{t+1} = f(x_t, u_t)`.
///
/// Implementations provide Jacobians analytically where available; the
/// default falls back to central finite differences of `step`.
pub trait DiscreteModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(d f / d x, d f / d u)` at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        let m = self.input_dim();
        let h = 1e-6;
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, m);
        let mut xp = x.clone();
        for j in 0..n {
            let step_h = h * (1.0 + x[j].abs());
            xp[j] = x[j] + step_h;
            let fp = self.step(&xp, u)?;
            xp[j] = x[j] - step_h;
            let fm = self.step(&xp, u)?;
            xp[j] = x[j];
            jx.set_column(j, &((fp - fm) / (2.0 * step_h)));
        }
        let mut up = u.clone();
        for j in 0..m {
            let step_h = h * (1.0 + u[j].abs());
            up[j] = u[j] + step_h;
            let fp = self.step(x, &up)?;
            up[j] = u[j] - step_h;
            let fm = self.step(x, &up)?;
            up[j] = u[j];
            ju.set_column(j, &((fp - fm) / (2.0 * step_h)));
        }
        Ok((jx, ju))
    }
}

/// Linear discrete-time 2D double integrator under exact zero-order hold.
///
/// State ordering is `[px, py, vx, vy]`, input `[ax, ay]`. Position rows
/// gain `dt * velocity + dt^2/2 * input`, velocity rows gain `dt * input`.
#[derive(Debug, Clone)]
pub struct DoubleIntegratorModel {
    pub dt: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl DoubleIntegratorModel {
    pub fn new(dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::InvalidProblem(format!(
                "sampling time must be positive, got {dt}"
            )));
        }
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 0.5 * dt * dt;
        b[(1, 1)] = 0.5 * dt * dt;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        Ok(Self { dt, a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl DiscreteModel for DoubleIntegratorModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        double_integrator_step(self, x, u)
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// One step of the double integrator: `A x + B u`.
pub fn double_integrator_step(
    model: &DoubleIntegratorModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != 4 {
        return Err(Error::DimensionMismatch {
            what: "double integrator state",
            expected: 4,
            got: x.len(),
        });
    }
    if u.len() != 2 {
        return Err(Error::DimensionMismatch {
            what: "double integrator input",
            expected: 2,
            got: u.len(),
        });
    }
    Ok(&model.a * x + &model.b * u)
}
