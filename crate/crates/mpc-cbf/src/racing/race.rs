//! Competitive racing: PID-driven identification, then an MPC-CBF ego car
//! overtaking constant-speed opponents on a closed track.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::track::Track;
use crate::barriers::{wrap_signed, RectangularCarCbf};
use crate::controllers::{build_mpc_cbf, MpcCbfConfig, SolveRecord};
use crate::dynamics::{
    fit_linear_model, one_step_rms, pid_tracking_control, vehicle_step, LinearModel, PidGains,
    VehicleParams, VehicleState,
};
use crate::ocp::SolveStatus;
use crate::solver::{solve_ocp, SolverConfig};
use crate::{Error, Result};

/// An opponent holding constant speed and constant lateral offset.
#[derive(Debug, Clone, Copy)]
pub struct OpponentCar {
    pub speed: f64,
    /// Constant lateral offset from the centerline [m].
    pub e_y: f64,
    /// Initial arc-length position [m].
    pub s0: f64,
    /// Half-length of the car [m].
    pub l1: f64,
    /// Half-width of the car [m].
    pub l2: f64,
}

/// Stage cost of the racing MPC: track the centerline at a target speed.
#[derive(Debug, Clone, Copy)]
pub struct RacingCost {
    pub target_speed: f64,
}

impl RacingCost {
    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&[10.0, 0.0, 0.0, 0.0, 0.0, 10.0]))
    }

    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }

    pub fn x_ref(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.target_speed, 0.0, 0.0, 0.0, 0.0, 0.0])
    }
}

/// Full racing scenario description.
#[derive(Clone)]
pub struct RaceConfig {
    pub track: Track,
    pub vehicle: VehicleParams,
    pub pid: PidGains,
    /// Laps of PID data used for the regression fit.
    pub id_laps: usize,
    /// Extra held-out laps for residual validation.
    pub holdout_laps: usize,
    /// Deterministic input dither during identification; closed-loop PID
    /// data is otherwise exactly collinear with the state and unidentifiable.
    pub id_dither: (f64, f64),
    pub id_seed: u64,
    pub horizon: usize,
    pub gamma: f64,
    pub cost: RacingCost,
    pub accel_bound: f64,
    pub steer_bound: f64,
    /// Box on the predicted longitudinal speed.
    pub vx_bounds: (f64, f64),
    /// Ego footprint `(l1, l2)`.
    pub ego_shape: (f64, f64),
    /// Extra footprint padding applied only inside the controller's CBF,
    /// absorbing plant/model mismatch; monitoring uses the true shape.
    pub cbf_padding: f64,
    pub ego_v0: f64,
    pub opponents: Vec<OpponentCar>,
    pub laps: usize,
    pub ctrl_rate: f64,
    pub sim_rate: f64,
    pub solver: SolverConfig,
}

impl Default for RaceConfig {
    fn default() -> Self {
        // Opponent start offsets are large enough that the ego does not lap
        // anyone within a two-lap race.
        let opponents = vec![
            OpponentCar {
                speed: 0.2,
                e_y: 0.1,
                s0: 5.0,
                l1: 0.2,
                l2: 0.1,
            },
            OpponentCar {
                speed: 0.2,
                e_y: -0.1,
                s0: 6.5,
                l1: 0.2,
                l2: 0.1,
            },
        ];
        Self {
            track: Track::default_loop(),
            vehicle: VehicleParams::default(),
            pid: PidGains::default(),
            id_laps: 3,
            holdout_laps: 1,
            id_dither: (0.05, 0.03),
            id_seed: 17,
            horizon: 12,
            gamma: 0.3,
            cost: RacingCost { target_speed: 0.6 },
            accel_bound: 1.0,
            steer_bound: 0.5,
            vx_bounds: (0.05, 2.0),
            ego_shape: (0.2, 0.1),
            cbf_padding: 0.02,
            ego_v0: 0.2,
            opponents,
            laps: 2,
            ctrl_rate: 10.0,
            sim_rate: 1000.0,
            solver: SolverConfig::default(),
        }
    }
}

impl RaceConfig {
    pub fn dt_ctrl(&self) -> f64 {
        1.0 / self.ctrl_rate
    }

    pub fn dt_sim(&self) -> f64 {
        1.0 / self.sim_rate
    }

    /// Plant substeps per control period.
    pub fn substeps(&self) -> Result<usize> {
        let ratio = self.sim_rate / self.ctrl_rate;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidProblem(format!(
                "sim rate {} must be an integer multiple of control rate {}",
                self.sim_rate, self.ctrl_rate
            )));
        }
        Ok(ratio.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.substeps()?;
        if self.laps == 0 || self.id_laps == 0 || self.holdout_laps == 0 {
            return Err(Error::InvalidProblem("lap counts must be at least 1".into()));
        }
        if self.ego_v0 <= 0.0 {
            return Err(Error::InvalidProblem(format!(
                "ego initial speed must be positive, got {}",
                self.ego_v0
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidProblem(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        for (i, opp) in self.opponents.iter().enumerate() {
            if opp.e_y.abs() > self.track.half_width() {
                return Err(Error::InvalidProblem(format!(
                    "opponent {i} offset {} exceeds half width {}",
                    opp.e_y,
                    self.track.half_width()
                )));
            }
            if opp.l1 <= 0.0 || opp.l2 <= 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "opponent {i} has nonpositive footprint"
                )));
            }
        }
        Ok(())
    }
}

/// PID-driven trajectory sampled at the control rate.
pub struct PidLapData {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Drive `laps` PID laps and record `(x_k, u_k)` pairs at the control rate.
/// The applied input is held over each control period while the plant steps
/// at the simulation rate.
pub fn run_pid_laps(config: &RaceConfig, laps: usize) -> Result<PidLapData> {
    let substeps = config.substeps()?;
    let mut vehicle = config.vehicle.clone();
    vehicle.dt_sim = config.dt_sim();
    let target = config.laps_length(laps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.id_seed);

    let mut state = VehicleState {
        vx: config.ego_v0,
        vy: 0.0,
        phi: 0.0,
        e_phi: 0.0,
        s: 0.0,
        e_y: 0.0,
    };
    let mut states = vec![state.to_vector()];
    let mut inputs = Vec::new();
    let step_cap = (target / (0.05 * config.dt_ctrl())).ceil() as usize;

    while state.s < target {
        if inputs.len() > step_cap {
            return Err(Error::SingularState(
                "identification run failed to make progress".into(),
            ));
        }
        let mut u = pid_tracking_control(&config.pid, &state, config.cost.target_speed);
        u[0] += config.id_dither.0 * rng.random_range(-1.0..1.0);
        u[1] += config.id_dither.1 * rng.random_range(-1.0..1.0);
        u[0] = u[0].clamp(-config.accel_bound, config.accel_bound);
        u[1] = u[1].clamp(-config.steer_bound, config.steer_bound);
        for _ in 0..substeps {
            let kappa = config.track.curvature_at(state.s);
            state = vehicle_step(&vehicle, &state, &u, kappa)?;
        }
        states.push(state.to_vector());
        inputs.push(u);
    }
    Ok(PidLapData { states, inputs })
}

impl RaceConfig {
    fn laps_length(&self, laps: usize) -> f64 {
        laps as f64 * self.track.length()
    }
}

/// Identification quality summary.
#[derive(Debug, Clone)]
pub struct IdReport {
    pub train_rms: f64,
    pub holdout_rms: f64,
    pub spectral_radius: f64,
    pub train_transitions: usize,
    pub holdout_transitions: usize,
}

/// PID laps, train/holdout split, least-squares fit.
pub fn identify(config: &RaceConfig) -> Result<(LinearModel, IdReport)> {
    let data = run_pid_laps(config, config.id_laps + config.holdout_laps)?;
    let split_s = config.laps_length(config.id_laps);
    let split = data
        .states
        .iter()
        .position(|x| x[4] >= split_s)
        .unwrap_or(data.states.len() - 1)
        .max(1);

    let train_states = &data.states[..=split];
    let train_inputs = &data.inputs[..split];
    let model = fit_linear_model(train_states, train_inputs)?;

    let holdout_states = &data.states[split..];
    let holdout_inputs = &data.inputs[split..];
    let holdout_rms = one_step_rms(&model, holdout_states, holdout_inputs)?;
    let report = IdReport {
        train_rms: model.fit_residual,
        holdout_rms,
        spectral_radius: model.spectral_radius(),
        train_transitions: train_inputs.len(),
        holdout_transitions: holdout_inputs.len(),
    };
    Ok((model, report))
}

/// One recorded control step of the race.
pub struct RaceStep {
    pub t: f64,
    pub state: VehicleState,
    pub input: DVector<f64>,
    /// Barrier values against each opponent at this control step.
    pub h: Vec<f64>,
    pub solve: SolveRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaceTermination {
    Completed,
    SolverFailure { step: usize, status: SolveStatus },
    PlantFailure { step: usize },
}

/// A sign change of the wrapped relative progress `s - s^i`.
#[derive(Debug, Clone, Copy)]
pub struct OvertakeEvent {
    pub time: f64,
    pub opponent: usize,
    /// Sign of `e_y - e_y^i` at the closest approach before the crossing.
    pub side: f64,
    /// True when the ego moves ahead, false when the opponent repasses.
    pub ego_passes: bool,
}

pub struct RaceResult {
    pub steps: Vec<RaceStep>,
    /// Plant trace at the simulation rate, including the initial state.
    pub substep_states: Vec<VehicleState>,
    /// Barrier values per opponent at every substep.
    pub substep_h: Vec<Vec<f64>>,
    pub overtakes: Vec<OvertakeEvent>,
    pub termination: RaceTermination,
    /// First time the ego footprint touched the track boundary, if any.
    pub bound_violation: Option<(f64, f64)>,
    pub identification: IdReport,
    pub model: LinearModel,
    pub dt_ctrl: f64,
    pub dt_sim: f64,
    pub track_length: f64,
}

impl RaceResult {
    pub fn ego_overtakes(&self) -> impl Iterator<Item = &OvertakeEvent> {
        self.overtakes.iter().filter(|e| e.ego_passes)
    }

    /// Smallest barrier value over all substeps and opponents.
    pub fn min_h(&self) -> f64 {
        self.substep_h
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean longitudinal speed over substeps with `s` in `[s_from, s_to)`.
    pub fn mean_speed_over(&self, s_from: f64, s_to: f64) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for st in &self.substep_states {
            if st.s >= s_from && st.s < s_to {
                sum += st.vx;
                count += 1;
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    }
}

/// Tracks behind/ahead transitions of one opponent with hysteresis, ignoring
/// the wrap jump that occurs half a lap away.
struct PassTracker {
    ahead: bool,
    min_abs_rho: f64,
    e_diff_at_min: f64,
}

impl PassTracker {
    fn new(rho0: f64) -> Self {
        Self {
            ahead: rho0 > 0.0,
            min_abs_rho: rho0.abs(),
            e_diff_at_min: 0.0,
        }
    }

    fn update(
        &mut self,
        rho: f64,
        e_diff: f64,
        time: f64,
        opponent: usize,
        half_window: f64,
        events: &mut Vec<OvertakeEvent>,
    ) {
        if rho.abs() < self.min_abs_rho {
            self.min_abs_rho = rho.abs();
            self.e_diff_at_min = e_diff;
        }
        let hysteresis = 0.02;
        if rho.abs() > half_window {
            // Half a lap away: the wrapped difference flips sign out here,
            // which is not a pass. Re-arm quietly.
            let was = self.ahead;
            self.ahead = rho > 0.0;
            if was != self.ahead {
                self.min_abs_rho = rho.abs();
                self.e_diff_at_min = e_diff;
            }
            return;
        }
        if !self.ahead && rho > hysteresis {
            events.push(OvertakeEvent {
                time,
                opponent,
                side: self.e_diff_at_min.signum(),
                ego_passes: true,
            });
            self.ahead = true;
            self.min_abs_rho = rho.abs();
            self.e_diff_at_min = e_diff;
        } else if self.ahead && rho < -hysteresis {
            events.push(OvertakeEvent {
                time,
                opponent,
                side: self.e_diff_at_min.signum(),
                ego_passes: false,
            });
            self.ahead = false;
            self.min_abs_rho = rho.abs();
            self.e_diff_at_min = e_diff;
        }
    }
}

fn quartic_h(l1: f64, l2: f64, ds: f64, de: f64) -> f64 {
    (ds / (2.0 * l1)).powi(4) + (de / (2.0 * l2)).powi(4) - 1.0
}

/// Run the full pipeline: PID laps, regression identification, MPC-CBF race.
pub fn run_race(config: &RaceConfig) -> Result<RaceResult> {
    config.validate()?;
    let substeps = config.substeps()?;
    let dt_ctrl = config.dt_ctrl();
    let dt_sim = config.dt_sim();
    let track_len = config.track.length();
    let target_s = config.laps_length(config.laps);

    let (model, identification) = identify(config)?;
    let model: Arc<LinearModel> = Arc::new(model);

    let mut vehicle = config.vehicle.clone();
    vehicle.dt_sim = dt_sim;

    let (ego_l1, ego_l2) = config.ego_shape;
    let pad = config.cbf_padding;
    let e_y_limit = config.track.half_width() - ego_l2;

    let mut x_lower = DVector::from_element(6, f64::NEG_INFINITY);
    let mut x_upper = DVector::from_element(6, f64::INFINITY);
    x_lower[0] = config.vx_bounds.0;
    x_upper[0] = config.vx_bounds.1;
    x_lower[5] = -(e_y_limit - pad);
    x_upper[5] = e_y_limit - pad;
    let u_lower = DVector::from_row_slice(&[-config.accel_bound, -config.steer_bound]);
    let u_upper = DVector::from_row_slice(&[config.accel_bound, config.steer_bound]);

    let mut ego = VehicleState {
        vx: config.ego_v0,
        vy: 0.0,
        phi: 0.0,
        e_phi: 0.0,
        s: 0.0,
        e_y: 0.0,
    };
    let mut opp_s: Vec<f64> = config.opponents.iter().map(|o| o.s0).collect();

    let monitor_h = |ego: &VehicleState, opp_s: &[f64]| -> Vec<f64> {
        config
            .opponents
            .iter()
            .zip(opp_s)
            .map(|(o, &s_i)| {
                quartic_h(
                    o.l1.max(ego_l1),
                    o.l2.max(ego_l2),
                    wrap_signed(ego.s - s_i, track_len),
                    ego.e_y - o.e_y,
                )
            })
            .collect()
    };

    let mut trackers: Vec<PassTracker> = config
        .opponents
        .iter()
        .map(|o| PassTracker::new(wrap_signed(ego.s - o.s0, track_len)))
        .collect();

    let mut steps: Vec<RaceStep> = Vec::new();
    let mut substep_states = vec![ego];
    let mut substep_h = vec![monitor_h(&ego, &opp_s)];
    let mut overtakes = Vec::new();
    let mut bound_violation: Option<(f64, f64)> = None;
    let mut warm: Option<Vec<DVector<f64>>> = None;
    let mut termination = RaceTermination::Completed;

    let step_cap = ((target_s / (config.vx_bounds.0.max(0.01) * dt_ctrl)) * 4.0) as usize;
    let mut step = 0usize;
    while ego.s < target_s {
        if step > step_cap {
            termination = RaceTermination::PlantFailure { step };
            break;
        }
        let t = step as f64 * dt_ctrl;

        // Per-opponent CBF with constant-velocity extrapolation over the
        // horizon; padded footprint inside the controller only.
        let mut barriers: Vec<Arc<dyn crate::barriers::HorizonBarrier>> = Vec::new();
        for (o, &s_now) in config.opponents.iter().zip(&opp_s) {
            let speed = o.speed;
            let e_y_i = o.e_y;
            let cbf = RectangularCarCbf::new(
                o.l1.max(ego_l1) + pad,
                o.l2.max(ego_l2) + pad,
                move |k: usize| (s_now + k as f64 * dt_ctrl * speed, e_y_i),
            )?
            .with_wrap(track_len);
            barriers.push(Arc::new(cbf));
        }
        let mpc = MpcCbfConfig {
            model: model.clone(),
            horizon: config.horizon,
            gamma: config.gamma,
            q: config.cost.q(),
            r: config.cost.r(),
            p: config.cost.q(),
            x_ref: config.cost.x_ref(),
            u_ref: DVector::zeros(2),
            x_lower: x_lower.clone(),
            x_upper: x_upper.clone(),
            u_lower: u_lower.clone(),
            u_upper: u_upper.clone(),
            xf_lower: None,
            xf_upper: None,
            barriers,
        };
        let spec = build_mpc_cbf(&mpc, &ego.to_vector())?;
        let sol = solve_ocp(&spec, &config.solver, warm.as_deref())?;
        let record = SolveRecord {
            status: sol.status,
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            open_loop: sol.clone(),
        };
        let u = sol.inputs[0].clone();
        steps.push(RaceStep {
            t,
            state: ego,
            input: u.clone(),
            h: monitor_h(&ego, &opp_s),
            solve: record,
        });
        if sol.status != SolveStatus::Solved {
            termination = RaceTermination::SolverFailure {
                step,
                status: sol.status,
            };
            break;
        }

        let mut failed = false;
        for _ in 0..substeps {
            let kappa = config.track.curvature_at(ego.s);
            match vehicle_step(&vehicle, &ego, &u, kappa) {
                Ok(next) => ego = next,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
            for (i, o) in config.opponents.iter().enumerate() {
                opp_s[i] += o.speed * dt_sim;
            }
            let h_now = monitor_h(&ego, &opp_s);
            let t_now = t + (substep_states.len() - step * substeps) as f64 * dt_sim;
            for (i, o) in config.opponents.iter().enumerate() {
                let rho = wrap_signed(ego.s - opp_s[i], track_len);
                trackers[i].update(
                    rho,
                    ego.e_y - o.e_y,
                    t_now,
                    i,
                    0.25 * track_len,
                    &mut overtakes,
                );
            }
            if bound_violation.is_none() && ego.e_y.abs() > e_y_limit {
                bound_violation = Some((t_now, ego.e_y));
            }
            substep_states.push(ego);
            substep_h.push(h_now);
        }
        if failed {
            termination = RaceTermination::PlantFailure { step };
            break;
        }

        let mut shifted: Vec<DVector<f64>> = sol.inputs[1..].to_vec();
        if let Some(last) = sol.inputs.last() {
            shifted.push(last.clone());
        }
        warm = Some(shifted);
        step += 1;
    }

    Ok(RaceResult {
        steps,
        substep_states,
        substep_h,
        overtakes,
        termination,
        bound_violation,
        identification,
        model: Arc::try_unwrap(model).unwrap_or_else(|arc| (*arc).clone()),
        dt_ctrl,
        dt_sim,
        track_length: track_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn substep_ratio_is_validated() {
        let mut cfg = RaceConfig::default();
        assert_eq!(cfg.substeps().unwrap(), 100);
        cfg.sim_rate = 25.0;
        cfg.ctrl_rate = 10.0;
        assert!(cfg.substeps().is_err());
    }

    #[test]
    fn opponent_kinematics_advance_exactly() {
        let dt = 1e-3;
        let mut s = 0.3;
        for _ in 0..1000 {
            s += 0.2 * dt;
        }
        assert_abs_diff_eq!(s, 0.3 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn pid_laps_produce_identifiable_data() {
        let mut cfg = RaceConfig::default();
        cfg.id_laps = 1;
        cfg.holdout_laps = 1;
        let (model, report) = identify(&cfg).unwrap();
        assert_eq!(model.a.nrows(), 6);
        assert_eq!(model.b.ncols(), 2);
        assert!(report.train_rms.is_finite());
        assert!(report.train_rms < 0.1, "train rms {}", report.train_rms);
        assert!(report.holdout_rms <= 2.0 * report.train_rms.max(1e-9));
    }

    #[test]
    fn pass_tracker_counts_forward_pass_once() {
        let mut tracker = PassTracker::new(-1.0);
        let mut events = Vec::new();
        let rhos = [-1.0, -0.5, -0.1, -0.01, 0.01, 0.05, 0.5, 1.0];
        for (i, &rho) in rhos.iter().enumerate() {
            tracker.update(rho, -0.2, i as f64, 0, 5.0, &mut events);
        }
        assert_eq!(events.len(), 1);
        assert!(events[0].ego_passes);
        assert_eq!(events[0].side, -1.0);
    }

    #[test]
    fn pass_tracker_ignores_wrap_jump() {
        // rho walks up to the half-lap boundary, wraps to negative, walks on:
        // only the later true crossing counts.
        let mut tracker = PassTracker::new(0.5);
        let mut events = Vec::new();
        let seq = [0.5, 3.0, 6.0, 7.0, -7.0, -4.0, -1.0, -0.05, 0.05, 0.4];
        for (i, &rho) in seq.iter().enumerate() {
            tracker.update(rho, 0.15, i as f64, 1, 0.25 * 14.28, &mut events);
        }
        assert_eq!(events.len(), 1);
        assert!(events[0].ego_passes);
        assert_eq!(events[0].opponent, 1);
    }
}
