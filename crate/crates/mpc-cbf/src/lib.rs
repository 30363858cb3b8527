//! Safety-critical model predictive control with discrete-time control
//! barrier functions.
//!
//! The crate bundles three controllers around one in-house SQP solver:
//!
//! * **MPC-CBF** — receding-horizon MPC where safety enters as a discrete
//!   CBF decrease condition `h(x_{k+1}) >= (1 - gamma) h(x_k)` at every
//!   horizon step.
//! * **MPC-DC** — the classic formulation with plain distance constraints
//!   `g(x_k) >= 0`.
//! * **DCLF-DCBF** — a one-step program trading a slack-relaxed Lyapunov
//!   decrease against a hard CBF constraint.
//!
//! Two benchmark plants are included: a 2D double integrator for obstacle
//! avoidance, and a nonlinear lateral vehicle model in curvilinear track
//! coordinates for multi-car racing, identified into a linear prediction
//! model by least squares over a PID-driven lap.

pub mod analysis;
pub mod barriers;
pub mod controllers;
pub mod dynamics;
pub mod ocp;
pub mod racing;
pub mod scenarios;
pub mod solver;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
