//! Finite-horizon optimal control problem definitions and solution records.

use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::barriers::BarrierFunction;
use crate::dynamics::DiscreteModel;
use crate::{Error, Result};

/// A scalar inequality `c(x_k, x_{k+1}, u_k) >= 0` imposed at one horizon
/// step.
pub trait StageConstraint: Send + Sync {
    fn value(&self, x: &DVector<f64>, x_next: &DVector<f64>, u: &DVector<f64>) -> f64;

    /// Gradients with respect to `(x, x_next, u)`.
    fn gradients(
        &self,
        x: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>);
}

/// Discrete CBF decrease: `h_next(x_{k+1}) - (1 - gamma) h_curr(x_k) >= 0`.
pub struct CbfDecreaseConstraint {
    pub h_curr: Arc<dyn BarrierFunction>,
    pub h_next: Arc<dyn BarrierFunction>,
    pub gamma: f64,
}

impl StageConstraint for CbfDecreaseConstraint {
    fn value(&self, x: &DVector<f64>, x_next: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        self.h_next.value(x_next) - (1.0 - self.gamma) * self.h_curr.value(x)
    }

    fn gradients(
        &self,
        x: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            self.h_curr.gradient(x) * (self.gamma - 1.0),
            self.h_next.gradient(x_next),
            DVector::zeros(u.len()),
        )
    }
}

/// Plain distance constraint at the current step: `g(x_k) >= 0`.
pub struct DistanceConstraint {
    pub g: Arc<dyn BarrierFunction>,
}

impl StageConstraint for DistanceConstraint {
    fn value(&self, x: &DVector<f64>, _x_next: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        self.g.value(x)
    }

    fn gradients(
        &self,
        x: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            self.g.gradient(x),
            DVector::zeros(x_next.len()),
            DVector::zeros(u.len()),
        )
    }
}

/// Slack-relaxed Lyapunov decrease for the one-step DCLF-DCBF program:
/// `u[slack_index] - (V(x_{k+1}) - (1 - alpha) V(x_k)) >= 0`.
pub struct ClfSlackConstraint {
    pub clf: Arc<dyn BarrierFunction>,
    pub alpha: f64,
    pub slack_index: usize,
}

impl StageConstraint for ClfSlackConstraint {
    fn value(&self, x: &DVector<f64>, x_next: &DVector<f64>, u: &DVector<f64>) -> f64 {
        u[self.slack_index] - self.clf.value(x_next) + (1.0 - self.alpha) * self.clf.value(x)
    }

    fn gradients(
        &self,
        x: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let mut gu = DVector::zeros(u.len());
        gu[self.slack_index] = 1.0;
        (
            self.clf.gradient(x) * (1.0 - self.alpha),
            -self.clf.gradient(x_next),
            gu,
        )
    }
}

/// A linear stage constraint `wx' x + wxn' x_next + wu' u + b >= 0`.
pub struct LinearStageConstraint {
    pub wx: DVector<f64>,
    pub wxn: DVector<f64>,
    pub wu: DVector<f64>,
    pub b: f64,
}

impl StageConstraint for LinearStageConstraint {
    fn value(&self, x: &DVector<f64>, x_next: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.wx.dot(x) + self.wxn.dot(x_next) + self.wu.dot(u) + self.b
    }

    fn gradients(
        &self,
        _x: &DVector<f64>,
        _x_next: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (self.wx.clone(), self.wxn.clone(), self.wu.clone())
    }
}

/// One finite-horizon optimization instance.
///
/// Costs are quadratic: stage `(x - x_ref)' Q (x - x_ref) + (u - u_ref)' R
/// (u - u_ref)`, terminal `(x - x_ref)' P (x - x_ref)`. States and inputs are
/// box constrained; the terminal state uses its own box (defaulting to the
/// state box). Scalar stage constraints couple `(x_k, x_{k+1}, u_k)`.
pub struct OcpSpec {
    pub model: Arc<dyn DiscreteModel>,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub xf_lower: DVector<f64>,
    pub xf_upper: DVector<f64>,
    /// `stage_constraints[k]` holds the scalar constraints at step `k`,
    /// `k = 0..horizon-1`.
    pub stage_constraints: Vec<Vec<Arc<dyn StageConstraint>>>,
}

impl OcpSpec {
    /// A regulation problem with no stage constraints and unbounded boxes.
    pub fn regulation(
        model: Arc<dyn DiscreteModel>,
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Self {
        let nx = model.state_dim();
        let nu = model.input_dim();
        Self {
            model,
            horizon,
            x0,
            q,
            r,
            p,
            x_ref: DVector::zeros(nx),
            u_ref: DVector::zeros(nu),
            x_lower: DVector::from_element(nx, f64::NEG_INFINITY),
            x_upper: DVector::from_element(nx, f64::INFINITY),
            u_lower: DVector::from_element(nu, f64::NEG_INFINITY),
            u_upper: DVector::from_element(nu, f64::INFINITY),
            xf_lower: DVector::from_element(nx, f64::NEG_INFINITY),
            xf_upper: DVector::from_element(nx, f64::INFINITY),
            stage_constraints: vec![Vec::new(); horizon],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.state_dim();
        let nu = self.input_dim();
        if self.horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        let dims: [(&str, usize, usize); 8] = [
            ("x0", self.x0.len(), nx),
            ("x_ref", self.x_ref.len(), nx),
            ("u_ref", self.u_ref.len(), nu),
            ("x_lower", self.x_lower.len(), nx),
            ("x_upper", self.x_upper.len(), nx),
            ("u_lower", self.u_lower.len(), nu),
            ("u_upper", self.u_upper.len(), nu),
            ("xf_lower", self.xf_lower.len(), nx),
        ];
        for (name, got, expected) in dims {
            if got != expected {
                return Err(Error::InvalidProblem(format!(
                    "{name} has dimension {got}, expected {expected}"
                )));
            }
        }
        if self.xf_upper.len() != nx {
            return Err(Error::InvalidProblem(format!(
                "xf_upper has dimension {}, expected {nx}",
                self.xf_upper.len()
            )));
        }
        if self.q.shape() != (nx, nx) || self.p.shape() != (nx, nx) || self.r.shape() != (nu, nu) {
            return Err(Error::InvalidProblem(
                "weight matrix dimensions do not match the model".into(),
            ));
        }
        for (name, lo, hi) in [
            ("state", &self.x_lower, &self.x_upper),
            ("input", &self.u_lower, &self.u_upper),
            ("terminal", &self.xf_lower, &self.xf_upper),
        ] {
            for i in 0..lo.len() {
                if lo[i] > hi[i] {
                    return Err(Error::InvalidProblem(format!(
                        "{name} bounds are crossed at component {i}: {} > {}",
                        lo[i], hi[i]
                    )));
                }
            }
        }
        if self.stage_constraints.len() != self.horizon {
            return Err(Error::InvalidProblem(format!(
                "stage constraint list has length {}, expected horizon {}",
                self.stage_constraints.len(),
                self.horizon
            )));
        }
        check_symmetric_psd("Q", &self.q)?;
        check_symmetric_psd("P", &self.p)?;
        check_symmetric_pd("R", &self.r)?;
        Ok(())
    }

    /// Total objective over a trajectory, including the constant first-stage
    /// state term.
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut j = 0.0;
        for k in 0..self.horizon {
            let ex = &states[k] - &self.x_ref;
            let eu = &inputs[k] - &self.u_ref;
            j += (&self.q * &ex).dot(&ex) + (&self.r * &eu).dot(&eu);
        }
        let ef = &states[self.horizon] - &self.x_ref;
        j + (&self.p * &ef).dot(&ef)
    }

    /// State box at interior step `k` (`1..horizon-1`) or terminal box at
    /// `k = horizon`.
    pub fn state_bounds_at(&self, k: usize) -> (&DVector<f64>, &DVector<f64>) {
        if k == self.horizon {
            (&self.xf_lower, &self.xf_upper)
        } else {
            (&self.x_lower, &self.x_upper)
        }
    }

    /// Worst violation across dynamics defects, boxes and stage constraints.
    pub fn max_violation(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.horizon {
            if let Ok(pred) = self.model.step(&states[k], &inputs[k]) {
                worst = worst.max((&states[k + 1] - pred).abs().max());
            } else {
                return f64::INFINITY;
            }
            for c in &self.stage_constraints[k] {
                worst = worst.max(-c.value(&states[k], &states[k + 1], &inputs[k]));
            }
            for i in 0..inputs[k].len() {
                worst = worst.max(self.u_lower[i] - inputs[k][i]);
                worst = worst.max(inputs[k][i] - self.u_upper[i]);
            }
        }
        for k in 1..=self.horizon {
            let (lo, hi) = self.state_bounds_at(k);
            for i in 0..states[k].len() {
                worst = worst.max(lo[i] - states[k][i]);
                worst = worst.max(states[k][i] - hi[i]);
            }
        }
        worst
    }
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidProblem(format!("{name} is not symmetric")));
    }
    let eigs = m.clone().symmetric_eigenvalues();
    let min = eigs.min();
    if min < -1e-9 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidProblem(format!(
            "{name} must be positive semidefinite, smallest eigenvalue {min}"
        )));
    }
    Ok(())
}

fn check_symmetric_pd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidProblem(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidProblem(format!(
            "{name} must be positive definite"
        )));
    }
    Ok(())
}

/// Terminal status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Solved,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Solved => write!(f, "solved"),
            SolveStatus::Infeasible => write!(f, "infeas."),
            SolveStatus::MaxIter => write!(f, "max_iter"),
            SolveStatus::NumericalFailure => write!(f, "numerical_failure"),
        }
    }
}

/// Multiplier estimates attached to a solution, laid out against the spec's
/// constraint structure.
#[derive(Debug, Clone, Default)]
pub struct Multipliers {
    /// Costates for the dynamics defects `x_{k+1} - f(x_k, u_k)`, length
    /// `horizon`.
    pub dynamics: Vec<DVector<f64>>,
    /// Stage constraint multipliers, `stage[k][j] >= 0`.
    pub stage: Vec<Vec<f64>>,
    /// Box multipliers for states `k = 1..=horizon` (index 0 is step 1).
    pub x_lower: Vec<DVector<f64>>,
    pub x_upper: Vec<DVector<f64>>,
    /// Box multipliers for inputs `k = 0..horizon-1`.
    pub u_lower: Vec<DVector<f64>>,
    pub u_upper: Vec<DVector<f64>>,
}

/// Solver output for one finite-horizon problem.
#[derive(Clone)]
pub struct OcpSolution {
    pub status: SolveStatus,
    /// Open-loop states `x_{t..t+N|t}`, length `horizon + 1`.
    pub states: Vec<DVector<f64>>,
    /// Optimal input sequence `u_{t..t+N-1|t}`, length `horizon`.
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub solve_time: Duration,
    pub multipliers: Multipliers,
}

/// KKT residual of a candidate solution, evaluated directly from the spec.
///
/// Sums the infinity norms of Lagrangian stationarity, constraint violation
/// and complementarity. Independent of the solver's internal representation:
/// everything is rebuilt from the spec's model, costs and constraints.
pub fn kkt_residual(spec: &OcpSpec, candidate: &OcpSolution) -> Result<f64> {
    if candidate.states.len() != spec.horizon + 1 || candidate.inputs.len() != spec.horizon {
        return Err(Error::InvalidProblem(format!(
            "candidate has {} states / {} inputs for horizon {}",
            candidate.states.len(),
            candidate.inputs.len(),
            spec.horizon
        )));
    }
    let parts = kkt_parts(spec, &candidate.states, &candidate.inputs, &candidate.multipliers)?;
    Ok(parts.total())
}

/// The three components of the KKT residual.
#[derive(Debug, Clone, Copy)]
pub struct KktParts {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktParts {
    pub fn total(&self) -> f64 {
        self.stationarity + self.feasibility + self.complementarity
    }
}

pub(crate) fn kkt_parts(
    spec: &OcpSpec,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    mult: &Multipliers,
) -> Result<KktParts> {
    let n = spec.horizon;
    let nx = spec.state_dim();
    let nu = spec.input_dim();

    // Lagrangian gradient rows for every state (k = 1..=N) and input.
    let mut stationarity: f64 = 0.0;
    let mut complementarity: f64 = 0.0;

    // Precompute constraint gradients and Jacobians.
    let mut a_jac = Vec::with_capacity(n);
    let mut b_jac = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = spec.model.jacobians(&states[k], &inputs[k])?;
        a_jac.push(a);
        b_jac.push(b);
    }

    for k in 1..=n {
        let weight = if k == n { &spec.p } else { &spec.q };
        let mut row = weight * (&states[k] - &spec.x_ref) * 2.0;
        // Defect r_{k-1} = x_k - f(x_{k-1}, u_{k-1}) contributes +sigma_{k-1}.
        row += &mult.dynamics[k - 1];
        // Defect r_k = x_{k+1} - f(x_k, u_k) contributes -A_k' sigma_k.
        if k < n {
            row -= a_jac[k].transpose() * &mult.dynamics[k];
        }
        // Stage constraints where x_k is the "current" state.
        if k < n {
            for (j, c) in spec.stage_constraints[k].iter().enumerate() {
                let (gx, _, _) = c.gradients(&states[k], &states[k + 1], &inputs[k]);
                row -= gx * mult.stage[k][j];
            }
        }
        // Stage constraints where x_k is the "next" state.
        for (j, c) in spec.stage_constraints[k - 1].iter().enumerate() {
            let (_, gxn, _) = c.gradients(&states[k - 1], &states[k], &inputs[k - 1]);
            row -= gxn * mult.stage[k - 1][j];
        }
        row -= &mult.x_lower[k - 1];
        row += &mult.x_upper[k - 1];
        stationarity = stationarity.max(row.abs().max());

        let (lo, hi) = spec.state_bounds_at(k);
        for i in 0..nx {
            if lo[i].is_finite() {
                complementarity =
                    complementarity.max((mult.x_lower[k - 1][i] * (states[k][i] - lo[i])).abs());
            }
            if hi[i].is_finite() {
                complementarity =
                    complementarity.max((mult.x_upper[k - 1][i] * (hi[i] - states[k][i])).abs());
            }
        }
    }

    for k in 0..n {
        let mut row = &spec.r * (&inputs[k] - &spec.u_ref) * 2.0;
        row -= b_jac[k].transpose() * &mult.dynamics[k];
        for (j, c) in spec.stage_constraints[k].iter().enumerate() {
            let (_, _, gu) = c.gradients(&states[k], &states[k + 1], &inputs[k]);
            row -= gu * mult.stage[k][j];
        }
        row -= &mult.u_lower[k];
        row += &mult.u_upper[k];
        stationarity = stationarity.max(row.abs().max());

        for i in 0..nu {
            if spec.u_lower[i].is_finite() {
                complementarity =
                    complementarity.max((mult.u_lower[k][i] * (inputs[k][i] - spec.u_lower[i])).abs());
            }
            if spec.u_upper[i].is_finite() {
                complementarity =
                    complementarity.max((mult.u_upper[k][i] * (spec.u_upper[i] - inputs[k][i])).abs());
            }
        }
        for (j, c) in spec.stage_constraints[k].iter().enumerate() {
            let v = c.value(&states[k], &states[k + 1], &inputs[k]);
            complementarity = complementarity.max((mult.stage[k][j] * v).abs());
            // Dual feasibility folded into the stationarity measure.
            stationarity = stationarity.max(-mult.stage[k][j]);
        }
    }

    let feasibility = spec.max_violation(states, inputs).max(0.0);
    Ok(KktParts {
        stationarity,
        feasibility,
        complementarity,
    })
}
