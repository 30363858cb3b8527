//! Control barrier functions and the discrete-time decrease condition.
//!
//! A barrier `h` defines the safe set `C = {x : h(x) >= 0}`. Keeping
//! `h(x_{k+1}) >= (1 - gamma) h(x_k)` along a trajectory renders `C`
//! forward invariant for `0 < gamma <= 1`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::{Error, Result};

/// A differentiable scalar function of the state.
///
/// Barriers expose both the value and the analytic gradient; the SQP solver
/// consumes first-order information. Control Lyapunov functions share the
/// same shape and reuse this trait.
pub trait BarrierFunction: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// A barrier that may vary along the prediction horizon.
///
/// Static obstacles return the same function at every step; moving obstacles
/// return a per-step snapshot.
pub trait HorizonBarrier: Send + Sync {
    fn barrier_at(&self, k: usize) -> Arc<dyn BarrierFunction>;
}

/// Adapter pinning one static barrier across the whole horizon.
pub struct StaticBarrier(Arc<dyn BarrierFunction>);

impl StaticBarrier {
    pub fn new(b: impl BarrierFunction + 'static) -> Self {
        Self(Arc::new(b))
    }

    pub fn from_arc(b: Arc<dyn BarrierFunction>) -> Self {
        Self(b)
    }
}

impl HorizonBarrier for StaticBarrier {
    fn barrier_at(&self, _k: usize) -> Arc<dyn BarrierFunction> {
        self.0.clone()
    }
}

/// Quadratic barrier for a circular obstacle:
/// `h = (px - x_obs)^2 + (py - y_obs)^2 - r_obs^2`.
///
/// Positions are the first two state components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularObstacleCbf {
    pub x_obs: f64,
    pub y_obs: f64,
    pub r_obs: f64,
}

impl CircularObstacleCbf {
    pub fn new(x_obs: f64, y_obs: f64, r_obs: f64) -> Result<Self> {
        if r_obs <= 0.0 {
            return Err(Error::InvalidProblem(format!(
                "obstacle radius must be positive, got {r_obs}"
            )));
        }
        Ok(Self { x_obs, y_obs, r_obs })
    }

    /// Euclidean distance from the state's position to the obstacle edge.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let dx = x[0] - self.x_obs;
        let dy = x[1] - self.y_obs;
        (dx * dx + dy * dy).sqrt() - self.r_obs
    }
}

impl BarrierFunction for CircularObstacleCbf {
    fn value(&self, x: &DVector<f64>) -> f64 {
        eval_circular_h(self, x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[0] = 2.0 * (x[0] - self.x_obs);
        g[1] = 2.0 * (x[1] - self.y_obs);
        g
    }
}

/// Evaluate the circular-obstacle barrier at a state.
pub fn eval_circular_h(cbf: &CircularObstacleCbf, x: &DVector<f64>) -> f64 {
    let dx = x[0] - cbf.x_obs;
    let dy = x[1] - cbf.y_obs;
    dx * dx + dy * dy - cbf.r_obs * cbf.r_obs
}

/// Quartic inter-car barrier in curvilinear coordinates between cars of
/// rectangular footprint `2 l1 x 2 l2`.
///
/// The opponent pose over the horizon comes from a per-step provider,
/// typically constant-velocity extrapolation of the opponent's current
/// `(s, e_y, speed)`.
pub struct RectangularCarCbf {
    /// Half-length of the car [m].
    pub l1: f64,
    /// Half-width of the car [m].
    pub l2: f64,
    /// Opponent pose `(s^i, e_y^i)` at horizon step `k`.
    pub pose_provider: Box<dyn Fn(usize) -> (f64, f64) + Send + Sync>,
    /// Loop length for shortest signed `s` differences on closed tracks.
    pub wrap_length: Option<f64>,
}

impl RectangularCarCbf {
    pub fn new(
        l1: f64,
        l2: f64,
        pose_provider: impl Fn(usize) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Self> {
        if l1 <= 0.0 || l2 <= 0.0 {
            return Err(Error::InvalidProblem(format!(
                "car half extents must be positive, got l1 = {l1}, l2 = {l2}"
            )));
        }
        Ok(Self {
            l1,
            l2,
            pose_provider: Box::new(pose_provider),
            wrap_length: None,
        })
    }

    pub fn with_wrap(mut self, track_length: f64) -> Self {
        self.wrap_length = Some(track_length);
        self
    }
}

impl HorizonBarrier for RectangularCarCbf {
    fn barrier_at(&self, k: usize) -> Arc<dyn BarrierFunction> {
        let (s_opp, ey_opp) = (self.pose_provider)(k);
        Arc::new(QuarticCarBarrier {
            l1: self.l1,
            l2: self.l2,
            s_opp,
            ey_opp,
            wrap_length: self.wrap_length,
        })
    }
}

/// One horizon-step snapshot of the quartic inter-car barrier, evaluated on
/// the vehicle state layout `[vx, vy, phi, e_phi, s, e_y]`.
#[derive(Debug, Clone, Copy)]
pub struct QuarticCarBarrier {
    pub l1: f64,
    pub l2: f64,
    pub s_opp: f64,
    pub ey_opp: f64,
    pub wrap_length: Option<f64>,
}

/// Index of `s` in the vehicle state vector.
const S_IDX: usize = 4;
/// Index of `e_y` in the vehicle state vector.
const EY_IDX: usize = 5;

impl QuarticCarBarrier {
    fn deltas(&self, x: &DVector<f64>) -> (f64, f64) {
        let mut ds = x[S_IDX] - self.s_opp;
        if let Some(l) = self.wrap_length {
            ds = wrap_signed(ds, l);
        }
        (ds, x[EY_IDX] - self.ey_opp)
    }
}

impl BarrierFunction for QuarticCarBarrier {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let (ds, de) = self.deltas(x);
        quartic_h(self.l1, self.l2, ds, de)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (ds, de) = self.deltas(x);
        let mut g = DVector::zeros(x.len());
        g[S_IDX] = 4.0 * ds.powi(3) / (2.0 * self.l1).powi(4);
        g[EY_IDX] = 4.0 * de.powi(3) / (2.0 * self.l2).powi(4);
        g
    }
}

fn quartic_h(l1: f64, l2: f64, ds: f64, de: f64) -> f64 {
    (ds / (2.0 * l1)).powi(4) + (de / (2.0 * l2)).powi(4) - 1.0
}

/// Evaluate the quartic inter-car barrier between an ego pose `(s, e_y)` and
/// an opponent pose `(s^i, e_y^i)`.
pub fn eval_quartic_h(cbf: &RectangularCarCbf, ego: (f64, f64), opp: (f64, f64)) -> f64 {
    let mut ds = ego.0 - opp.0;
    if let Some(l) = cbf.wrap_length {
        ds = wrap_signed(ds, l);
    }
    quartic_h(cbf.l1, cbf.l2, ds, ego.1 - opp.1)
}

/// Shortest signed distance on a loop of length `l`, in `(-l/2, l/2]`.
pub fn wrap_signed(d: f64, l: f64) -> f64 {
    let w = d - l * (d / l).round();
    if w <= -0.5 * l {
        w + l
    } else {
        w
    }
}

/// The discrete CBF decrease condition `h_next >= (1 - gamma) h_curr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbfCondition {
    gamma: f64,
}

impl CbfCondition {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidProblem(format!(
                "cbf rate gamma must lie in (0, 1], got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Residual of the decrease condition: `h_next - (1 - gamma) h_curr`.
///
/// Nonnegative iff the condition holds; algebraically identical to
/// `delta_h + gamma * h_curr`.
pub fn cbf_constraint_residual(cond: &CbfCondition, h_curr: f64, h_next: f64) -> f64 {
    h_next - (1.0 - cond.gamma) * h_curr
}

/// Residual of a plain distance constraint: `g(x)`, satisfied iff `>= 0`.
pub fn distance_constraint_residual(g: &dyn BarrierFunction, x: &DVector<f64>) -> f64 {
    g.value(x)
}

/// Central finite-difference gradient, used to validate analytic gradients.
pub fn finite_difference_gradient(
    f: &dyn BarrierFunction,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f.value(&xp);
        xp[i] = x[i] - step;
        let fm = f.value(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn obstacle() -> CircularObstacleCbf {
        CircularObstacleCbf::new(-2.0, -2.25, 1.5).unwrap()
    }

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn circular_h_at_center_is_minus_r_squared() {
        let h = eval_circular_h(&obstacle(), &dvec(&[-2.0, -2.25, 0.0, 0.0]));
        assert_abs_diff_eq!(h, -2.25, epsilon = 1e-15);
    }

    #[test]
    fn circular_h_on_boundary_is_zero() {
        let h = eval_circular_h(&obstacle(), &dvec(&[-0.5, -2.25, 0.0, 0.0]));
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn circular_h_at_start_point() {
        let h = eval_circular_h(&obstacle(), &dvec(&[-5.0, -5.0, 0.0, 0.0]));
        assert_abs_diff_eq!(h, 14.3125, epsilon = 1e-12);
    }

    #[test]
    fn quartic_h_trivial_points() {
        let cbf = RectangularCarCbf::new(0.2, 0.1, |_| (0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(eval_quartic_h(&cbf, (1.0, 0.5), (1.0, 0.5)), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval_quartic_h(&cbf, (0.4, 0.0), (0.0, 0.0)), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eval_quartic_h(&cbf, (0.4, 0.2), (0.0, 0.0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_arithmetic() {
        let cond = CbfCondition::new(0.5).unwrap();
        assert_abs_diff_eq!(cbf_constraint_residual(&cond, 4.0, 3.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cbf_constraint_residual(&cond, 4.0, 1.0), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_one_reduces_to_h_next() {
        let cond = CbfCondition::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let h_curr = rng.random_range(-10.0..10.0);
            let h_next = rng.random_range(-10.0..10.0);
            assert_eq!(cbf_constraint_residual(&cond, h_curr, h_next), h_next);
        }
    }

    #[test]
    fn residual_monotone_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let h_curr = rng.random_range(0.0..10.0);
            let h_next = rng.random_range(-10.0..10.0);
            let g1 = rng.random_range(0.01..1.0);
            let g2 = rng.random_range(g1..1.0);
            let r1 = cbf_constraint_residual(&CbfCondition::new(g1).unwrap(), h_curr, h_next);
            let r2 = cbf_constraint_residual(&CbfCondition::new(g2).unwrap(), h_curr, h_next);
            assert!(r2 >= r1);
        }
    }

    #[test]
    fn residual_membership_implication() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let gamma = rng.random_range(0.01..=1.0);
            let h_curr = rng.random_range(0.0..10.0);
            let h_next = rng.random_range(-10.0..10.0);
            let r = cbf_constraint_residual(&CbfCondition::new(gamma).unwrap(), h_curr, h_next);
            if r >= 0.0 {
                assert!(h_next >= 0.0);
            }
        }
    }

    #[test]
    fn distance_residual_matches_h() {
        let obs = obstacle();
        let x = dvec(&[-5.0, -5.0, 0.0, 0.0]);
        assert_abs_diff_eq!(distance_constraint_residual(&obs, &x), 14.3125, epsilon = 1e-12);
        let center = dvec(&[-2.0, -2.25, 0.0, 0.0]);
        assert_abs_diff_eq!(distance_constraint_residual(&obs, &center), -2.25, epsilon = 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = obstacle();
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-5.0..5.0));
            let ga = obs.gradient(&x);
            let gf = finite_difference_gradient(&obs, &x, 1e-6);
            let scale = ga.norm().max(1.0);
            assert!((ga - gf).norm() / scale <= 1e-6);
        }
        let quartic = QuarticCarBarrier {
            l1: 0.2,
            l2: 0.1,
            s_opp: 1.0,
            ey_opp: 0.05,
            wrap_length: None,
        };
        for _ in 0..50 {
            let mut x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            x[4] = rng.random_range(0.0..2.0);
            let ga = quartic.gradient(&x);
            let gf = finite_difference_gradient(&quartic, &x, 1e-5);
            let scale = ga.norm().max(1.0);
            assert!((ga - gf).norm() / scale <= 1e-6);
        }
    }

    #[test]
    fn wrap_is_shortest_signed_distance() {
        let l = 10.0;
        assert_abs_diff_eq!(wrap_signed(0.3, l), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_signed(9.7, l), -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_signed(-9.7, l), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_signed(5.0, l), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_signed(-5.0, l), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_signed(15.0, l), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(CircularObstacleCbf::new(0.0, 0.0, 0.0).is_err());
        assert!(CbfCondition::new(0.0).is_err());
        assert!(CbfCondition::new(1.5).is_err());
        assert!(RectangularCarCbf::new(0.0, 0.1, |_| (0.0, 0.0)).is_err());
    }
}
