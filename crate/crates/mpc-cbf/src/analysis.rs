//! Reachable-set and CBF-superlevel-set grids, plus benchmark metrics.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::barriers::{BarrierFunction, CircularObstacleCbf};
use crate::controllers::{ClosedLoopResult, Termination};
use crate::dynamics::DiscreteModel;
use crate::{Error, Result};

/// A rectangular grid over two state dimensions, the rest held fixed.
#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Which two state components are gridded.
    pub dims: (usize, usize),
    pub lower: (f64, f64),
    pub upper: (f64, f64),
    pub cells: (usize, usize),
    /// Template state supplying the non-gridded components.
    pub fixed: DVector<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells.0 < 2 || self.cells.1 < 2 {
            return Err(Error::InvalidProblem(format!(
                "grid needs at least 2 cells per dimension, got {:?}",
                self.cells
            )));
        }
        for v in [self.lower.0, self.lower.1, self.upper.0, self.upper.1] {
            if !v.is_finite() {
                return Err(Error::InvalidProblem("grid bounds must be finite".into()));
            }
        }
        if self.lower.0 >= self.upper.0 || self.lower.1 >= self.upper.1 {
            return Err(Error::InvalidProblem("grid bounds must be increasing".into()));
        }
        if self.dims.0 == self.dims.1 || self.dims.0 >= self.fixed.len() || self.dims.1 >= self.fixed.len()
        {
            return Err(Error::InvalidProblem(format!(
                "grid dims {:?} invalid for state dimension {}",
                self.dims,
                self.fixed.len()
            )));
        }
        Ok(())
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = (self.upper.0 - self.lower.0) / self.cells.0 as f64;
        let dy = (self.upper.1 - self.lower.1) / self.cells.1 as f64;
        (
            self.lower.0 + (i as f64 + 0.5) * dx,
            self.lower.1 + (j as f64 + 0.5) * dy,
        )
    }

    /// Full state at a cell center.
    pub fn state_at(&self, i: usize, j: usize) -> DVector<f64> {
        let (x, y) = self.cell_center(i, j);
        let mut state = self.fixed.clone();
        state[self.dims.0] = x;
        state[self.dims.1] = y;
        state
    }

    /// Cell containing a state's gridded components, if inside the bounds.
    pub fn cell_of(&self, state: &DVector<f64>) -> Option<(usize, usize)> {
        let x = state[self.dims.0];
        let y = state[self.dims.1];
        if x < self.lower.0 || x >= self.upper.0 || y < self.lower.1 || y >= self.upper.1 {
            return None;
        }
        let dx = (self.upper.0 - self.lower.0) / self.cells.0 as f64;
        let dy = (self.upper.1 - self.lower.1) / self.cells.1 as f64;
        let i = (((x - self.lower.0) / dx) as usize).min(self.cells.0 - 1);
        let j = (((y - self.lower.1) / dy) as usize).min(self.cells.1 - 1);
        Some((i, j))
    }
}

/// What a membership grid represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetLabel {
    Reachable,
    CbfSuperlevel,
    SafeSet,
    Intersection,
}

impl std::fmt::Display for SetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SetLabel::Reachable => write!(f, "reachable"),
            SetLabel::CbfSuperlevel => write!(f, "cbf_superlevel"),
            SetLabel::SafeSet => write!(f, "safe_set"),
            SetLabel::Intersection => write!(f, "intersection"),
        }
    }
}

/// Boolean membership over a [`GridSpec`].
#[derive(Debug, Clone)]
pub struct SetGrid {
    pub spec: GridSpec,
    /// Row-major over `(i, j)`: index `i * cells.1 + j`.
    pub members: Vec<bool>,
    pub label: SetLabel,
}

impl SetGrid {
    fn empty(spec: &GridSpec, label: SetLabel) -> Self {
        Self {
            spec: spec.clone(),
            members: vec![false; spec.cells.0 * spec.cells.1],
            label,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.members[i * self.spec.cells.1 + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.members[i * self.spec.cells.1 + j] = value;
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|m| **m).count()
    }

    /// Cells marked here but not in `other`.
    pub fn difference_count(&self, other: &SetGrid) -> usize {
        self.members
            .iter()
            .zip(&other.members)
            .filter(|(a, b)| **a && !**b)
            .count()
    }

    pub fn is_subset_of(&self, other: &SetGrid) -> bool {
        self.difference_count(other) == 0
    }
}

/// How input sequences are drawn for reachable-set sampling.
#[derive(Debug, Clone, Copy)]
pub enum InputSampling {
    /// Every combination of a per-dimension uniform grid over the input box.
    Exhaustive { per_dim: usize },
    /// Uniform random input sequences.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Forward-sample admissible input sequences of length `k` from `x_t`,
/// marking the cells of the step-`k` states whose whole trajectory stays in
/// the state box. `k = 0` marks only the cell of `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn reachable_set_grid(
    model: &dyn DiscreteModel,
    x_t: &DVector<f64>,
    k: usize,
    x_lower: &DVector<f64>,
    x_upper: &DVector<f64>,
    u_lower: &DVector<f64>,
    u_upper: &DVector<f64>,
    grid: &GridSpec,
    sampling: InputSampling,
) -> Result<SetGrid> {
    grid.validate()?;
    let mut out = SetGrid::empty(grid, SetLabel::Reachable);
    if k == 0 {
        if let Some((i, j)) = grid.cell_of(x_t) {
            out.set(i, j, true);
        }
        return Ok(out);
    }
    let nu = model.input_dim();
    let in_box = |x: &DVector<f64>| -> bool {
        (0..x.len()).all(|i| x[i] >= x_lower[i] && x[i] <= x_upper[i])
    };

    let mut mark = |inputs: &[DVector<f64>]| -> Result<()> {
        let mut x = x_t.clone();
        for u in inputs {
            x = model.step(&x, u)?;
            if !in_box(&x) {
                return Ok(());
            }
        }
        if let Some((i, j)) = grid.cell_of(&x) {
            out.set(i, j, true);
        }
        Ok(())
    };

    match sampling {
        InputSampling::Exhaustive { per_dim } => {
            if per_dim < 2 {
                return Err(Error::InvalidProblem(
                    "exhaustive sampling needs at least 2 points per dimension".into(),
                ));
            }
            let total_dims = nu * k;
            let total = (per_dim as f64).powi(total_dims as i32);
            if total > 2e7 {
                return Err(Error::InvalidProblem(format!(
                    "exhaustive enumeration of {total:.1e} sequences is too large"
                )));
            }
            let mut index = vec![0usize; total_dims];
            let mut inputs = vec![DVector::zeros(nu); k];
            loop {
                for step in 0..k {
                    for d in 0..nu {
                        let frac = index[step * nu + d] as f64 / (per_dim - 1) as f64;
                        inputs[step][d] = u_lower[d] + frac * (u_upper[d] - u_lower[d]);
                    }
                }
                mark(&inputs)?;
                // Odometer increment.
                let mut pos = 0;
                loop {
                    if pos == total_dims {
                        return Ok(out);
                    }
                    index[pos] += 1;
                    if index[pos] < per_dim {
                        break;
                    }
                    index[pos] = 0;
                    pos += 1;
                }
            }
        }
        InputSampling::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut inputs = vec![DVector::zeros(nu); k];
            for _ in 0..samples {
                for u in inputs.iter_mut() {
                    for d in 0..nu {
                        u[d] = rng.random_range(u_lower[d]..=u_upper[d]);
                    }
                }
                mark(&inputs)?;
            }
            Ok(out)
        }
    }
}

/// Mark cells whose representative state satisfies
/// `h(x) >= (1 - gamma) h(x_prev)`.
pub fn cbf_superlevel_grid(
    h: &dyn BarrierFunction,
    gamma: f64,
    x_prev: &DVector<f64>,
    grid: &GridSpec,
) -> Result<SetGrid> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidProblem(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    grid.validate()?;
    let threshold = (1.0 - gamma) * h.value(x_prev);
    let mut out = SetGrid::empty(grid, SetLabel::CbfSuperlevel);
    for i in 0..grid.cells.0 {
        for j in 0..grid.cells.1 {
            let state = grid.state_at(i, j);
            out.set(i, j, h.value(&state) >= threshold);
        }
    }
    Ok(out)
}

/// The safe-set grid `{h >= 0}`.
pub fn safe_set_grid(h: &dyn BarrierFunction, grid: &GridSpec) -> Result<SetGrid> {
    grid.validate()?;
    let mut out = SetGrid::empty(grid, SetLabel::SafeSet);
    for i in 0..grid.cells.0 {
        for j in 0..grid.cells.1 {
            let state = grid.state_at(i, j);
            out.set(i, j, h.value(&state) >= 0.0);
        }
    }
    Ok(out)
}

/// One row of the controller benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkRecord {
    pub controller: String,
    pub n: usize,
    pub gamma: Option<f64>,
    pub status: String,
    pub mean_solve_time: f64,
    pub std_solve_time: f64,
    /// Min over closed-loop states of distance-to-center minus radius.
    pub min_distance: f64,
    /// `sum_k u_k' u_k * dt`.
    pub cost_integral: f64,
}

/// Distill a closed-loop run into benchmark metrics. Infeasible runs report
/// NaN metrics, mirroring how such rows are tabulated.
pub fn compute_benchmark(
    result: &ClosedLoopResult,
    obstacle: &CircularObstacleCbf,
    dt: f64,
    controller: &str,
    n: usize,
    gamma: Option<f64>,
) -> BenchmarkRecord {
    let infeasible = matches!(result.termination, Termination::SolverInfeasible { .. });
    let times: Vec<f64> = result
        .solves
        .iter()
        .map(|s| s.solve_time.as_secs_f64())
        .collect();
    let (mean, std) = mean_std(&times);
    if infeasible || result.states.is_empty() {
        return BenchmarkRecord {
            controller: controller.to_string(),
            n,
            gamma,
            status: "infeas.".to_string(),
            mean_solve_time: f64::NAN,
            std_solve_time: f64::NAN,
            min_distance: f64::NAN,
            cost_integral: f64::NAN,
        };
    }
    let min_distance = result
        .states
        .iter()
        .map(|x| obstacle.distance(x))
        .fold(f64::INFINITY, f64::min);
    let cost_integral = result.inputs.iter().map(|u| u.norm_squared() * dt).sum();
    BenchmarkRecord {
        controller: controller.to_string(),
        n,
        gamma,
        status: "solved".to_string(),
        mean_solve_time: mean,
        std_solve_time: std,
        min_distance,
        cost_integral,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DoubleIntegratorModel;
    use approx::assert_abs_diff_eq;

    fn grid_4d() -> GridSpec {
        GridSpec {
            dims: (0, 1),
            lower: (-6.0, -6.0),
            upper: (1.0, 1.0),
            cells: (70, 70),
            fixed: DVector::zeros(4),
        }
    }

    fn wide_bounds() -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(4, -5.0),
            DVector::from_element(4, 5.0),
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
        )
    }

    #[test]
    fn k_zero_marks_exactly_one_cell() {
        let model = DoubleIntegratorModel::new(0.2).unwrap();
        let (xl, xu, ul, uu) = wide_bounds();
        let x_t = DVector::from_row_slice(&[-5.0, -5.0, 0.0, 0.0]);
        let g = reachable_set_grid(
            &model,
            &x_t,
            0,
            &xl,
            &xu,
            &ul,
            &uu,
            &grid_4d(),
            InputSampling::Exhaustive { per_dim: 3 },
        )
        .unwrap();
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn one_step_positions_stay_in_drift_box() {
        // After one step from rest, positions sit within dt^2/2 of the start.
        let model = DoubleIntegratorModel::new(0.2).unwrap();
        let (xl, xu, ul, uu) = wide_bounds();
        let x_t = DVector::from_row_slice(&[-2.0, -2.0, 0.5, -0.25]);
        let g = reachable_set_grid(
            &model,
            &x_t,
            1,
            &xl,
            &xu,
            &ul,
            &uu,
            &GridSpec {
                cells: (140, 140),
                ..grid_4d()
            },
            InputSampling::Exhaustive { per_dim: 21 },
        )
        .unwrap();
        assert!(g.count() >= 1);
        let drift = (
            x_t[0] + 0.2 * x_t[2],
            x_t[1] + 0.2 * x_t[3],
        );
        let slack = 0.5 * 0.2 * 0.2 + 0.06; // input reach + one cell
        for i in 0..g.spec.cells.0 {
            for j in 0..g.spec.cells.1 {
                if g.at(i, j) {
                    let (cx, cy) = g.spec.cell_center(i, j);
                    assert!((cx - drift.0).abs() <= slack, "cx {cx} drift {}", drift.0);
                    assert!((cy - drift.1).abs() <= slack);
                }
            }
        }
    }

    #[test]
    fn sampled_run_is_subset_of_exhaustive() {
        let model = DoubleIntegratorModel::new(0.2).unwrap();
        let (xl, xu, ul, uu) = wide_bounds();
        let x_t = DVector::from_row_slice(&[-3.0, -3.0, 0.4, 0.4]);
        let grid = GridSpec {
            cells: (40, 40),
            ..grid_4d()
        };
        let exhaustive = reachable_set_grid(
            &model,
            &x_t,
            2,
            &xl,
            &xu,
            &ul,
            &uu,
            &grid,
            InputSampling::Exhaustive { per_dim: 9 },
        )
        .unwrap();
        let sampled = reachable_set_grid(
            &model,
            &x_t,
            2,
            &xl,
            &xu,
            &ul,
            &uu,
            &grid,
            InputSampling::MonteCarlo {
                samples: 500,
                seed: 7,
            },
        )
        .unwrap();
        // Monte-Carlo corners can land in cells the coarse grid enumeration
        // missed; check against a denser enumeration instead.
        let dense = reachable_set_grid(
            &model,
            &x_t,
            2,
            &xl,
            &xu,
            &ul,
            &uu,
            &grid,
            InputSampling::Exhaustive { per_dim: 41 },
        )
        .unwrap();
        assert!(exhaustive.is_subset_of(&dense));
        assert!(sampled.is_subset_of(&dense));
    }

    #[test]
    fn superlevel_grid_gamma_one_equals_safe_set() {
        let h = CircularObstacleCbf::new(-2.0, -2.25, 1.5).unwrap();
        let grid = grid_4d();
        let x_prev = DVector::from_row_slice(&[-4.0, -4.0, 0.0, 0.0]);
        let level = cbf_superlevel_grid(&h, 1.0, &x_prev, &grid).unwrap();
        let safe = safe_set_grid(&h, &grid).unwrap();
        assert_eq!(level.members, safe.members);
    }

    #[test]
    fn superlevel_grids_nest_in_gamma() {
        let h = CircularObstacleCbf::new(-2.0, -2.25, 1.5).unwrap();
        let grid = grid_4d();
        let x_prev = DVector::from_row_slice(&[-3.4, -3.4, 0.0, 0.0]);
        assert!(h.value(&x_prev) > 0.0);
        let g01 = cbf_superlevel_grid(&h, 0.1, &x_prev, &grid).unwrap();
        let g05 = cbf_superlevel_grid(&h, 0.5, &x_prev, &grid).unwrap();
        let safe = safe_set_grid(&h, &grid).unwrap();
        assert!(g01.is_subset_of(&g05));
        assert!(g05.is_subset_of(&safe));
        // Strict on this obstacle: the 0.5 set has more cells.
        assert!(g05.count() > g01.count());
    }

    #[test]
    fn anchor_on_boundary_collapses_to_safe_set() {
        let h = CircularObstacleCbf::new(-2.0, -2.25, 1.5).unwrap();
        let grid = grid_4d();
        let x_prev = DVector::from_row_slice(&[-0.5, -2.25, 0.0, 0.0]);
        assert_abs_diff_eq!(h.value(&x_prev), 0.0, epsilon = 1e-12);
        for gamma in [0.1, 0.5, 1.0] {
            let g = cbf_superlevel_grid(&h, gamma, &x_prev, &grid).unwrap();
            let safe = safe_set_grid(&h, &grid).unwrap();
            assert_eq!(g.members, safe.members);
        }
    }

    #[test]
    fn benchmark_arithmetic() {
        use crate::controllers::{ClosedLoopResult, Termination};
        let states = vec![
            DVector::from_row_slice(&[-5.0, -5.0, 0.0, 0.0]),
            DVector::from_row_slice(&[-0.5, -2.25, 0.0, 0.0]),
        ];
        let inputs = vec![
            DVector::from_row_slice(&[1.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0]),
        ];
        let result = ClosedLoopResult {
            states,
            inputs,
            h_values: vec![vec![0.0]; 2],
            solves: Vec::new(),
            termination: Termination::TimeLimit,
        };
        let obs = CircularObstacleCbf::new(-2.0, -2.25, 1.5).unwrap();
        let rec = compute_benchmark(&result, &obs, 0.2, "mpc_cbf", 5, Some(0.1));
        assert_abs_diff_eq!(rec.cost_integral, 0.4, epsilon = 1e-12);
        // Second state touches the boundary: min distance 0.
        assert_abs_diff_eq!(rec.min_distance, 0.0, epsilon = 1e-12);
    }
}
