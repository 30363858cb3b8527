//! In-house solver for the constrained finite-time optimal control problems.
//!
//! Sequential quadratic programming over the stacked decision vector (all
//! states and inputs). Dynamics enter as equality constraints and are
//! condensed out of each subproblem exactly; the remaining strictly convex
//! QP is solved by a dual active-set method. Globalization uses an l1-penalty
//! line search; inconsistent linearizations fall back to an elastic
//! (slack-relaxed) subproblem that doubles as the feasibility-restoration
//! phase.

pub mod qp;
mod sqp;

pub use sqp::{solve_ocp, solve_ocp_logged};

/// Tolerances and iteration limits for [`solve_ocp`].
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// KKT residual below which a point counts as solved.
    pub optimality_tol: f64,
    /// Largest tolerated constraint violation at a solution.
    pub feasibility_tol: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease coefficient.
    pub armijo_coeff: f64,
    /// Step shrink factor per backtrack.
    pub backtrack_factor: f64,
    pub max_line_search_steps: usize,
    /// Initial l1 penalty weight.
    pub initial_penalty: f64,
    /// Penalty ceiling; hitting it with violation left counts toward
    /// infeasibility.
    pub max_penalty: f64,
    /// Consecutive restoration iterations without relative progress before
    /// the problem is declared infeasible.
    pub restoration_stall_iters: usize,
    /// Minimum relative violation decrease that counts as progress.
    pub restoration_min_decrease: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            optimality_tol: 1e-6,
            feasibility_tol: 1e-8,
            max_iterations: 100,
            armijo_coeff: 1e-4,
            backtrack_factor: 0.5,
            max_line_search_steps: 30,
            initial_penalty: 10.0,
            max_penalty: 1e8,
            restoration_stall_iters: 5,
            restoration_min_decrease: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.optimality_tol <= 0.0 || self.feasibility_tol <= 0.0 {
            return Err(crate::Error::InvalidProblem(
                "solver tolerances must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(crate::Error::InvalidProblem(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(crate::Error::InvalidProblem(
                "backtrack factor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}
