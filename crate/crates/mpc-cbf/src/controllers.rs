//! The three controllers as OCP factories plus the closed-loop driver.

use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::barriers::{BarrierFunction, CbfCondition, HorizonBarrier};
use crate::dynamics::DiscreteModel;
use crate::ocp::{
    CbfDecreaseConstraint, ClfSlackConstraint, DistanceConstraint, OcpSolution, OcpSpec,
    SolveStatus, StageConstraint,
};
use crate::solver::{solve_ocp, SolverConfig};
use crate::{Error, Result};

/// MPC with discrete CBF decrease constraints at every horizon step.
pub struct MpcCbfConfig {
    pub model: Arc<dyn DiscreteModel>,
    pub horizon: usize,
    pub gamma: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    /// Terminal box; defaults to the state box when `None`.
    pub xf_lower: Option<DVector<f64>>,
    pub xf_upper: Option<DVector<f64>>,
    pub barriers: Vec<Arc<dyn HorizonBarrier>>,
}

/// MPC with plain distance constraints `g(x_k) >= 0` at every horizon step.
pub struct MpcDcConfig {
    pub model: Arc<dyn DiscreteModel>,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub xf_lower: Option<DVector<f64>>,
    pub xf_upper: Option<DVector<f64>>,
    pub distance_constraints: Vec<Arc<dyn HorizonBarrier>>,
}

/// One-step program trading a slack-relaxed CLF decrease against a hard CBF
/// constraint.
pub struct DclfDcbfConfig {
    pub model: Arc<dyn DiscreteModel>,
    /// Input weight `H`.
    pub input_weight: DMatrix<f64>,
    /// Slack weight `l`.
    pub slack_weight: f64,
    /// CLF decrease rate in `(0, 1]`.
    pub alpha: f64,
    /// CBF decrease rate in `(0, 1]`.
    pub gamma: f64,
    pub clf: Arc<dyn BarrierFunction>,
    pub barrier: Arc<dyn BarrierFunction>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
}

fn base_spec(
    model: &Arc<dyn DiscreteModel>,
    horizon: usize,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
    x_bounds: (&DVector<f64>, &DVector<f64>),
    u_bounds: (&DVector<f64>, &DVector<f64>),
    xf_bounds: (Option<&DVector<f64>>, Option<&DVector<f64>>),
    x_t: DVector<f64>,
) -> OcpSpec {
    let mut spec = OcpSpec::regulation(model.clone(), horizon, q.clone(), r.clone(), p.clone(), x_t);
    spec.x_ref = x_ref.clone();
    spec.u_ref = u_ref.clone();
    spec.x_lower = x_bounds.0.clone();
    spec.x_upper = x_bounds.1.clone();
    spec.u_lower = u_bounds.0.clone();
    spec.u_upper = u_bounds.1.clone();
    spec.xf_lower = xf_bounds.0.cloned().unwrap_or_else(|| x_bounds.0.clone());
    spec.xf_upper = xf_bounds.1.cloned().unwrap_or_else(|| x_bounds.1.clone());
    spec
}

/// Assemble the finite-horizon problem for MPC-CBF at state `x_t`: one CBF
/// decrease constraint per barrier per step `k = 0..N-1`.
pub fn build_mpc_cbf(config: &MpcCbfConfig, x_t: &DVector<f64>) -> Result<OcpSpec> {
    CbfCondition::new(config.gamma)?;
    let mut spec = base_spec(
        &config.model,
        config.horizon,
        &config.q,
        &config.r,
        &config.p,
        &config.x_ref,
        &config.u_ref,
        (&config.x_lower, &config.x_upper),
        (&config.u_lower, &config.u_upper),
        (config.xf_lower.as_ref(), config.xf_upper.as_ref()),
        x_t.clone(),
    );
    for k in 0..config.horizon {
        let mut list: Vec<Arc<dyn StageConstraint>> = Vec::new();
        for b in &config.barriers {
            list.push(Arc::new(CbfDecreaseConstraint {
                h_curr: b.barrier_at(k),
                h_next: b.barrier_at(k + 1),
                gamma: config.gamma,
            }));
        }
        spec.stage_constraints[k] = list;
    }
    spec.validate()?;
    Ok(spec)
}

/// Assemble the finite-horizon problem for MPC-DC at state `x_t`: distance
/// constraints on the current state at steps `k = 0..N-1`.
pub fn build_mpc_dc(config: &MpcDcConfig, x_t: &DVector<f64>) -> Result<OcpSpec> {
    let mut spec = base_spec(
        &config.model,
        config.horizon,
        &config.q,
        &config.r,
        &config.p,
        &config.x_ref,
        &config.u_ref,
        (&config.x_lower, &config.x_upper),
        (&config.u_lower, &config.u_upper),
        (config.xf_lower.as_ref(), config.xf_upper.as_ref()),
        x_t.clone(),
    );
    for k in 0..config.horizon {
        let mut list: Vec<Arc<dyn StageConstraint>> = Vec::new();
        for g in &config.distance_constraints {
            list.push(Arc::new(DistanceConstraint { g: g.barrier_at(k) }));
        }
        spec.stage_constraints[k] = list;
    }
    spec.validate()?;
    Ok(spec)
}

/// Wraps a model with one extra input component that the dynamics ignore;
/// carries the DCLF-DCBF slack through the OCP machinery.
struct SlackInputModel {
    inner: Arc<dyn DiscreteModel>,
}

impl DiscreteModel for SlackInputModel {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim() + 1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.inner.input_dim();
        self.inner.step(x, &u.rows(0, m).into_owned())
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.inner.input_dim();
        let (a, b) = self.inner.jacobians(x, &u.rows(0, m).into_owned())?;
        let mut b_aug = DMatrix::zeros(b.nrows(), m + 1);
        b_aug.view_mut((0, 0), (b.nrows(), m)).copy_from(&b);
        Ok((a, b_aug))
    }
}

/// Result of one DCLF-DCBF step.
pub struct DclfDcbfStep {
    /// The plant input `u*` (slack stripped).
    pub input: DVector<f64>,
    /// The CLF slack `delta*`.
    pub slack: f64,
    pub solution: OcpSolution,
}

/// Solve the one-step DCLF-DCBF program at `x_k`:
/// `min u' H u + l delta^2` subject to the slack-relaxed CLF decrease, the
/// hard CBF decrease, input bounds and `delta >= 0`.
pub fn solve_dclf_dcbf(
    config: &DclfDcbfConfig,
    x_k: &DVector<f64>,
    solver: &SolverConfig,
) -> Result<DclfDcbfStep> {
    if config.slack_weight <= 0.0 {
        return Err(Error::InvalidProblem(format!(
            "slack weight must be positive, got {}",
            config.slack_weight
        )));
    }
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(Error::InvalidProblem(format!(
            "clf rate alpha must lie in (0, 1], got {}",
            config.alpha
        )));
    }
    CbfCondition::new(config.gamma)?;

    let m = config.model.input_dim();
    let nx = config.model.state_dim();
    let aug: Arc<dyn DiscreteModel> = Arc::new(SlackInputModel {
        inner: config.model.clone(),
    });

    let mut r = DMatrix::zeros(m + 1, m + 1);
    r.view_mut((0, 0), (m, m)).copy_from(&config.input_weight);
    r[(m, m)] = config.slack_weight;

    let mut spec = OcpSpec::regulation(
        aug,
        1,
        DMatrix::zeros(nx, nx),
        r,
        DMatrix::zeros(nx, nx),
        x_k.clone(),
    );
    let mut u_lower = DVector::from_element(m + 1, f64::NEG_INFINITY);
    let mut u_upper = DVector::from_element(m + 1, f64::INFINITY);
    for i in 0..m {
        u_lower[i] = config.u_lower[i];
        u_upper[i] = config.u_upper[i];
    }
    u_lower[m] = 0.0; // delta >= 0
    spec.u_lower = u_lower;
    spec.u_upper = u_upper;
    spec.stage_constraints[0] = vec![
        Arc::new(ClfSlackConstraint {
            clf: config.clf.clone(),
            alpha: config.alpha,
            slack_index: m,
        }),
        Arc::new(CbfDecreaseConstraint {
            h_curr: config.barrier.clone(),
            h_next: config.barrier.clone(),
            gamma: config.gamma,
        }),
    ];

    let solution = solve_ocp(&spec, solver, None)?;
    Ok(DclfDcbfStep {
        input: solution.inputs[0].rows(0, m).into_owned(),
        slack: solution.inputs[0][m],
        solution,
    })
}

/// Any of the three controllers, ready to drive a closed loop.
pub enum Controller {
    MpcCbf(MpcCbfConfig),
    MpcDc(MpcDcConfig),
    DclfDcbf(DclfDcbfConfig),
}

impl Controller {
    /// Barriers to monitor along the closed loop (step-0 snapshots).
    pub fn monitored_barriers(&self) -> Vec<Arc<dyn BarrierFunction>> {
        match self {
            Controller::MpcCbf(c) => c.barriers.iter().map(|b| b.barrier_at(0)).collect(),
            Controller::MpcDc(c) => c
                .distance_constraints
                .iter()
                .map(|b| b.barrier_at(0))
                .collect(),
            Controller::DclfDcbf(c) => vec![c.barrier.clone()],
        }
    }

    /// Solve one step; returns the full solution and the plant input to apply.
    fn solve_step(
        &self,
        x: &DVector<f64>,
        warm: Option<&[DVector<f64>]>,
        solver: &SolverConfig,
    ) -> Result<(OcpSolution, DVector<f64>)> {
        match self {
            Controller::MpcCbf(c) => {
                let spec = build_mpc_cbf(c, x)?;
                let sol = solve_ocp(&spec, solver, warm)?;
                let u = sol.inputs[0].clone();
                Ok((sol, u))
            }
            Controller::MpcDc(c) => {
                let spec = build_mpc_dc(c, x)?;
                let sol = solve_ocp(&spec, solver, warm)?;
                let u = sol.inputs[0].clone();
                Ok((sol, u))
            }
            Controller::DclfDcbf(c) => {
                let step = solve_dclf_dcbf(c, x, solver)?;
                Ok((step.solution, step.input))
            }
        }
    }
}

/// Why a closed-loop run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ReachedGoal,
    TimeLimit,
    SolverInfeasible { step: usize, status: SolveStatus },
}

/// Per-step solver statistics kept alongside the trajectory.
#[derive(Clone)]
pub struct SolveRecord {
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: Duration,
    /// The full open-loop solution at this step.
    pub open_loop: OcpSolution,
}

/// Closed-loop trajectory and bookkeeping.
///
/// States obey the plant exactly: each entry is the plant's own step output,
/// not the controller's prediction.
pub struct ClosedLoopResult {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Monitored barrier values at every recorded state.
    pub h_values: Vec<Vec<f64>>,
    pub solves: Vec<SolveRecord>,
    pub termination: Termination,
}

impl ClosedLoopResult {
    pub fn reached_goal(&self) -> bool {
        self.termination == Termination::ReachedGoal
    }

    /// Smallest monitored barrier value over the whole trajectory.
    pub fn min_h(&self) -> f64 {
        self.h_values
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Options for [`run_closed_loop`].
#[derive(Debug, Clone)]
pub struct ClosedLoopOptions {
    pub max_steps: usize,
    /// Position tolerance around the goal [m].
    pub goal_tol: f64,
    pub solver: SolverConfig,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self {
            max_steps: 100,
            goal_tol: 0.1,
            solver: SolverConfig::default(),
        }
    }
}

/// Receding-horizon execution: solve at the measured state, apply the first
/// input, advance the plant, warm-start the next solve with the shifted
/// solution.
pub fn run_closed_loop(
    controller: &Controller,
    plant: &dyn DiscreteModel,
    x0: &DVector<f64>,
    goal: &DVector<f64>,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopResult> {
    if opts.max_steps == 0 {
        return Err(Error::InvalidProblem("max_steps must be at least 1".into()));
    }
    let barriers = controller.monitored_barriers();
    let eval_h = |x: &DVector<f64>| -> Vec<f64> { barriers.iter().map(|b| b.value(x)).collect() };
    let at_goal = |x: &DVector<f64>| -> bool {
        let dx = x[0] - goal[0];
        let dy = x[1] - goal[1];
        (dx * dx + dy * dy).sqrt() <= opts.goal_tol
    };

    let mut states = vec![x0.clone()];
    let mut inputs = Vec::new();
    let mut h_values = vec![eval_h(x0)];
    let mut solves: Vec<SolveRecord> = Vec::new();
    let mut warm: Option<Vec<DVector<f64>>> = None;

    for step in 0..opts.max_steps {
        let x = states.last().unwrap().clone();
        if at_goal(&x) {
            return Ok(ClosedLoopResult {
                states,
                inputs,
                h_values,
                solves,
                termination: Termination::ReachedGoal,
            });
        }
        let (sol, u_apply) = controller.solve_step(&x, warm.as_deref(), &opts.solver)?;
        solves.push(SolveRecord {
            status: sol.status,
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            open_loop: sol.clone(),
        });
        if sol.status != SolveStatus::Solved {
            return Ok(ClosedLoopResult {
                states,
                inputs,
                h_values,
                solves,
                termination: Termination::SolverInfeasible {
                    step,
                    status: sol.status,
                },
            });
        }
        let next = plant.step(&x, &u_apply)?;
        h_values.push(eval_h(&next));
        states.push(next);
        inputs.push(u_apply);

        // Shift: drop the applied input, repeat the last.
        let mut shifted: Vec<DVector<f64>> = sol.inputs[1..].to_vec();
        if let Some(last) = sol.inputs.last() {
            shifted.push(last.clone());
        }
        warm = Some(shifted);
    }

    Ok(ClosedLoopResult {
        states,
        inputs,
        h_values,
        solves,
        termination: Termination::TimeLimit,
    })
}
