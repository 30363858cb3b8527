//! Canonical benchmark scenarios and embedded reference values.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::analysis::{compute_benchmark, BenchmarkRecord};
use crate::barriers::{CircularObstacleCbf, StaticBarrier};
use crate::controllers::{
    run_closed_loop, ClosedLoopOptions, ClosedLoopResult, Controller, DclfDcbfConfig,
    MpcCbfConfig, MpcDcConfig,
};
use crate::dynamics::DoubleIntegratorModel;
use crate::solver::SolverConfig;
use crate::Result;

/// The 2D double-integrator obstacle-avoidance scenario: drive from
/// `(-5, -5)` at rest to the origin past one circular obstacle.
#[derive(Debug, Clone)]
pub struct IntegratorScenario {
    pub dt: f64,
    pub x0: DVector<f64>,
    pub goal: DVector<f64>,
    pub obstacle: CircularObstacleCbf,
    pub q_weight: f64,
    pub r_weight: f64,
    pub p_weight: f64,
    pub state_bound: f64,
    pub input_bound: f64,
    pub goal_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorScenario {
    fn default() -> Self {
        Self {
            dt: 0.2,
            x0: DVector::from_row_slice(&[-5.0, -5.0, 0.0, 0.0]),
            goal: DVector::zeros(4),
            obstacle: CircularObstacleCbf {
                x_obs: -2.0,
                y_obs: -2.25,
                r_obs: 1.5,
            },
            q_weight: 10.0,
            r_weight: 1.0,
            p_weight: 100.0,
            state_bound: 5.0,
            input_bound: 1.0,
            goal_tol: 0.1,
            max_steps: 100,
        }
    }
}

impl IntegratorScenario {
    pub fn model(&self) -> Result<DoubleIntegratorModel> {
        DoubleIntegratorModel::new(self.dt)
    }

    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * self.q_weight
    }

    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.r_weight
    }

    pub fn p(&self) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * self.p_weight
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(4, -self.state_bound),
            DVector::from_element(4, self.state_bound),
            DVector::from_element(2, -self.input_bound),
            DVector::from_element(2, self.input_bound),
        )
    }

    pub fn mpc_cbf(&self, horizon: usize, gamma: f64) -> Result<Controller> {
        let (xl, xu, ul, uu) = self.bounds();
        Ok(Controller::MpcCbf(MpcCbfConfig {
            model: Arc::new(self.model()?),
            horizon,
            gamma,
            q: self.q(),
            r: self.r(),
            p: self.p(),
            x_ref: self.goal.clone(),
            u_ref: DVector::zeros(2),
            x_lower: xl,
            x_upper: xu,
            u_lower: ul,
            u_upper: uu,
            xf_lower: None,
            xf_upper: None,
            barriers: vec![Arc::new(StaticBarrier::new(self.obstacle))],
        }))
    }

    pub fn mpc_dc(&self, horizon: usize) -> Result<Controller> {
        let (xl, xu, ul, uu) = self.bounds();
        Ok(Controller::MpcDc(MpcDcConfig {
            model: Arc::new(self.model()?),
            horizon,
            q: self.q(),
            r: self.r(),
            p: self.p(),
            x_ref: self.goal.clone(),
            u_ref: DVector::zeros(2),
            x_lower: xl,
            x_upper: xu,
            u_lower: ul,
            u_upper: uu,
            xf_lower: None,
            xf_upper: None,
            distance_constraints: vec![Arc::new(StaticBarrier::new(self.obstacle))],
        }))
    }

    /// DCLF-DCBF with `V(x) = x' P x`, `H = R`, configurable slack weight and
    /// CLF rate.
    pub fn dclf_dcbf(&self, gamma: f64, alpha: f64, slack_weight: f64) -> Result<Controller> {
        let (_, _, ul, uu) = self.bounds();
        Ok(Controller::DclfDcbf(DclfDcbfConfig {
            model: Arc::new(self.model()?),
            input_weight: self.r(),
            slack_weight,
            alpha,
            gamma,
            clf: Arc::new(QuadraticClf { p: self.p() }),
            barrier: Arc::new(self.obstacle),
            u_lower: ul,
            u_upper: uu,
        }))
    }

    pub fn run(&self, controller: &Controller, solver: &SolverConfig) -> Result<ClosedLoopResult> {
        let plant = self.model()?;
        run_closed_loop(
            controller,
            &plant,
            &self.x0,
            &self.goal,
            &ClosedLoopOptions {
                max_steps: self.max_steps,
                goal_tol: self.goal_tol,
                solver: solver.clone(),
            },
        )
    }
}

/// `V(x) = x' P x` used as the control Lyapunov function.
pub struct QuadraticClf {
    pub p: DMatrix<f64>,
}

impl crate::barriers::BarrierFunction for QuadraticClf {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (&self.p * x).dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x * 2.0
    }
}

/// One cell of the benchmark matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchCell {
    MpcCbf { n: usize, gamma: f64 },
    MpcDc { n: usize },
}

/// The benchmark matrix: MPC-CBF at `N = 5` over five decay rates, MPC-DC
/// over four horizons.
pub fn benchmark_matrix() -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for gamma in [0.1, 0.2, 0.3, 0.4, 0.5] {
        cells.push(BenchCell::MpcCbf { n: 5, gamma });
    }
    for n in [5, 7, 15, 30] {
        cells.push(BenchCell::MpcDc { n });
    }
    cells
}

/// Published reference row the benchmark is compared against.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub controller: &'static str,
    pub n: usize,
    pub gamma: Option<f64>,
    pub solved: bool,
    pub min_distance: Option<f64>,
    pub cost_integral: Option<f64>,
}

/// Reference values for the benchmark matrix.
pub fn reference_table() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow { controller: "mpc_cbf", n: 5, gamma: Some(0.1), solved: true, min_distance: Some(1.483), cost_integral: Some(7.620) },
        ReferenceRow { controller: "mpc_cbf", n: 5, gamma: Some(0.2), solved: true, min_distance: Some(0.791), cost_integral: Some(7.464) },
        ReferenceRow { controller: "mpc_cbf", n: 5, gamma: Some(0.3), solved: true, min_distance: Some(0.441), cost_integral: Some(8.314) },
        ReferenceRow { controller: "mpc_cbf", n: 5, gamma: Some(0.4), solved: true, min_distance: Some(0.288), cost_integral: Some(8.292) },
        ReferenceRow { controller: "mpc_cbf", n: 5, gamma: Some(0.5), solved: true, min_distance: Some(0.110), cost_integral: Some(8.813) },
        ReferenceRow { controller: "mpc_dc", n: 5, gamma: None, solved: false, min_distance: None, cost_integral: None },
        ReferenceRow { controller: "mpc_dc", n: 7, gamma: None, solved: true, min_distance: Some(0.000), cost_integral: Some(9.102) },
        ReferenceRow { controller: "mpc_dc", n: 15, gamma: None, solved: true, min_distance: Some(0.000), cost_integral: Some(8.537) },
        ReferenceRow { controller: "mpc_dc", n: 30, gamma: None, solved: true, min_distance: Some(0.000), cost_integral: Some(8.528) },
    ]
}

/// Comparison tolerances for the benchmark report.
#[derive(Debug, Clone, Copy)]
pub struct BenchTolerances {
    /// Min-distance absolute floor [m].
    pub min_dist_abs: f64,
    /// Min-distance relative allowance.
    pub min_dist_rel: f64,
    /// Cost-integral relative allowance.
    pub cost_rel: f64,
    /// Ceiling for the "reaches the boundary" rows [m].
    pub dc_min_dist_max: f64,
}

impl Default for BenchTolerances {
    fn default() -> Self {
        Self {
            min_dist_abs: 0.15,
            min_dist_rel: 0.25,
            cost_rel: 0.20,
            dc_min_dist_max: 0.05,
        }
    }
}

/// Outcome of one benchmark row against its reference.
#[derive(Debug, Clone)]
pub struct RowCheck {
    pub record: BenchmarkRecord,
    pub reference: ReferenceRow,
    pub pass: bool,
    pub notes: String,
}

/// Run one benchmark cell.
pub fn run_bench_cell(
    scenario: &IntegratorScenario,
    solver: &SolverConfig,
    cell: BenchCell,
) -> Result<(BenchmarkRecord, ClosedLoopResult)> {
    let (controller, name, n, gamma) = match cell {
        BenchCell::MpcCbf { n, gamma } => (scenario.mpc_cbf(n, gamma)?, "mpc_cbf", n, Some(gamma)),
        BenchCell::MpcDc { n } => (scenario.mpc_dc(n)?, "mpc_dc", n, None),
    };
    let result = scenario.run(&controller, solver)?;
    let record = compute_benchmark(&result, &scenario.obstacle, scenario.dt, name, n, gamma);
    Ok((record, result))
}

/// Run the whole benchmark matrix.
pub fn run_benchmark(
    scenario: &IntegratorScenario,
    solver: &SolverConfig,
) -> Result<Vec<(BenchmarkRecord, ClosedLoopResult)>> {
    benchmark_matrix()
        .into_iter()
        .map(|cell| run_bench_cell(scenario, solver, cell))
        .collect()
}

/// Judge benchmark records against the embedded reference values.
pub fn compare_to_reference(
    records: &[BenchmarkRecord],
    tol: &BenchTolerances,
) -> Vec<RowCheck> {
    let refs = reference_table();
    let mut checks = Vec::new();
    for reference in refs {
        let Some(record) = records.iter().find(|r| {
            r.controller == reference.controller
                && r.n == reference.n
                && match (r.gamma, reference.gamma) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (None, None) => true,
                    _ => false,
                }
        }) else {
            continue;
        };
        let mut pass = true;
        let mut notes = Vec::new();
        if reference.solved {
            if record.status != "solved" {
                pass = false;
                notes.push(format!("expected solved, got {}", record.status));
            }
            if let Some(ref_dist) = reference.min_distance {
                if ref_dist <= tol.dc_min_dist_max {
                    if !(record.min_distance <= tol.dc_min_dist_max) {
                        pass = false;
                        notes.push(format!(
                            "min distance {:.3} above ceiling {:.3}",
                            record.min_distance, tol.dc_min_dist_max
                        ));
                    }
                } else {
                    let allowance = tol.min_dist_abs.max(tol.min_dist_rel * ref_dist);
                    if !((record.min_distance - ref_dist).abs() <= allowance) {
                        pass = false;
                        notes.push(format!(
                            "min distance {:.3} outside {:.3} +/- {:.3}",
                            record.min_distance, ref_dist, allowance
                        ));
                    }
                }
            }
            if let Some(ref_cost) = reference.cost_integral {
                if !((record.cost_integral - ref_cost).abs() <= tol.cost_rel * ref_cost) {
                    pass = false;
                    notes.push(format!(
                        "cost {:.3} outside {:.0}% of {:.3}",
                        record.cost_integral,
                        tol.cost_rel * 100.0,
                        ref_cost
                    ));
                }
            }
        } else if record.status == "solved" {
            pass = false;
            notes.push("expected infeasible, got solved".to_string());
        }
        checks.push(RowCheck {
            record: record.clone(),
            reference,
            pass,
            notes: notes.join("; "),
        });
    }
    checks
}
