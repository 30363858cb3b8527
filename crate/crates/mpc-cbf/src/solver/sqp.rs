//! SQP iteration over the stacked (states, inputs) decision vector.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpStatus};
use super::SolverConfig;
use crate::ocp::{kkt_parts, Multipliers, OcpSolution, OcpSpec, SolveStatus};
use crate::Result;

/// Solve one finite-horizon problem.
///
/// `warm_start`, when given, seeds the input sequence; states are always
/// rolled out through the dynamics from `spec.x0`. Receding-horizon callers
/// pass the shifted previous solution here.
pub fn solve_ocp(
    spec: &OcpSpec,
    config: &SolverConfig,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<OcpSolution> {
    solve_impl(spec, config, warm_start, &mut None)
}

/// As [`solve_ocp`], logging one line per iteration to `log`.
pub fn solve_ocp_logged(
    spec: &OcpSpec,
    config: &SolverConfig,
    warm_start: Option<&[DVector<f64>]>,
    log: &mut dyn Write,
) -> Result<OcpSolution> {
    let mut sink: Option<&mut dyn Write> = Some(log);
    solve_impl(spec, config, warm_start, &mut sink)
}

/// Everything the SQP needs at one iterate.
struct Evaluation {
    a_jac: Vec<DMatrix<f64>>,
    b_jac: Vec<DMatrix<f64>>,
    defects: Vec<DVector<f64>>,
    con_vals: Vec<Vec<f64>>,
    con_grads: Vec<Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>>,
    objective: f64,
    grad_x: Vec<DVector<f64>>,
    grad_u: Vec<DVector<f64>>,
    /// l1 violation: defects + negative stage parts + state box overshoot.
    theta1: f64,
    theta_inf: f64,
}

fn merit_terms(spec: &OcpSpec, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<(f64, f64, f64)> {
    let n = spec.horizon;
    let mut theta1 = 0.0;
    let mut theta_inf: f64 = 0.0;
    for k in 0..n {
        let pred = spec.model.step(&xs[k], &us[k])?;
        let defect = &xs[k + 1] - pred;
        theta1 += defect.abs().sum();
        theta_inf = theta_inf.max(defect.abs().max());
        for c in &spec.stage_constraints[k] {
            let v = c.value(&xs[k], &xs[k + 1], &us[k]);
            theta1 += (-v).max(0.0);
            theta_inf = theta_inf.max(-v);
        }
    }
    for k in 1..=n {
        let (lo, hi) = spec.state_bounds_at(k);
        for i in 0..xs[k].len() {
            let under = (lo[i] - xs[k][i]).max(0.0);
            let over = (xs[k][i] - hi[i]).max(0.0);
            theta1 += under + over;
            theta_inf = theta_inf.max(under).max(over);
        }
    }
    Ok((spec.objective(xs, us), theta1, theta_inf.max(0.0)))
}

fn evaluate(spec: &OcpSpec, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<Evaluation> {
    let n = spec.horizon;
    let mut a_jac = Vec::with_capacity(n);
    let mut b_jac = Vec::with_capacity(n);
    let mut defects = Vec::with_capacity(n);
    let mut con_vals = Vec::with_capacity(n);
    let mut con_grads = Vec::with_capacity(n);
    for k in 0..n {
        let pred = spec.model.step(&xs[k], &us[k])?;
        defects.push(&xs[k + 1] - pred);
        let (a, b) = spec.model.jacobians(&xs[k], &us[k])?;
        a_jac.push(a);
        b_jac.push(b);
        let mut vals = Vec::new();
        let mut grads = Vec::new();
        for c in &spec.stage_constraints[k] {
            vals.push(c.value(&xs[k], &xs[k + 1], &us[k]));
            grads.push(c.gradients(&xs[k], &xs[k + 1], &us[k]));
        }
        con_vals.push(vals);
        con_grads.push(grads);
    }
    let mut grad_x = Vec::with_capacity(n);
    for k in 1..=n {
        let w = if k == n { &spec.p } else { &spec.q };
        grad_x.push(w * (&xs[k] - &spec.x_ref) * 2.0);
    }
    let grad_u: Vec<_> = (0..n).map(|k| &spec.r * (&us[k] - &spec.u_ref) * 2.0).collect();
    let (objective, theta1, theta_inf) = merit_terms(spec, xs, us)?;
    Ok(Evaluation {
        a_jac,
        b_jac,
        defects,
        con_vals,
        con_grads,
        objective,
        grad_x,
        grad_u,
        theta1,
        theta_inf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Stage { step: usize, index: usize },
    StateLower { step: usize, dim: usize },
    StateUpper { step: usize, dim: usize },
    InputLower { step: usize, dim: usize },
    InputUpper { step: usize, dim: usize },
}

struct QpRow {
    coeffs: DVector<f64>,
    rhs: f64,
    kind: RowKind,
    /// Soft rows receive elastic slacks in restoration mode.
    soft: bool,
}

fn solve_impl(
    spec: &OcpSpec,
    config: &SolverConfig,
    warm_start: Option<&[DVector<f64>]>,
    log: &mut Option<&mut dyn Write>,
) -> Result<OcpSolution> {
    spec.validate()?;
    config.validate()?;
    let start = Instant::now();

    let n = spec.horizon;
    let nx = spec.state_dim();
    let nu = spec.input_dim();
    let nv = n * nu;

    // Initial inputs: warm start or zeros, clamped into the input box.
    let mut us: Vec<DVector<f64>> = match warm_start {
        Some(seq) if seq.len() == n => seq.to_vec(),
        Some(seq) => {
            let mut v = seq.to_vec();
            v.resize(n, seq.last().cloned().unwrap_or_else(|| DVector::zeros(nu)));
            v
        }
        None => vec![DVector::zeros(nu); n],
    };
    for u in &mut us {
        for i in 0..nu {
            u[i] = u[i].clamp(spec.u_lower[i], spec.u_upper[i]);
        }
    }

    let finish = |status: SolveStatus,
                  xs: &[DVector<f64>],
                  us: &[DVector<f64>],
                  mult: Multipliers,
                  iterations: usize|
     -> Result<OcpSolution> {
        let parts = kkt_parts(spec, xs, us, &mult)?;
        Ok(OcpSolution {
            status,
            states: xs.to_vec(),
            inputs: us.to_vec(),
            objective: spec.objective(xs, us),
            kkt_residual: parts.total(),
            max_violation: spec.max_violation(xs, us),
            iterations,
            solve_time: start.elapsed(),
            multipliers: mult,
        })
    };

    // Roll states out through the dynamics.
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    xs.push(spec.x0.clone());
    for k in 0..n {
        match spec.model.step(&xs[k], &us[k]) {
            Ok(next) => xs.push(next),
            Err(_) => {
                return finish(
                    SolveStatus::NumericalFailure,
                    &vec![spec.x0.clone(); n + 1],
                    &us,
                    empty_multipliers(spec),
                    0,
                );
            }
        }
    }

    // The initial state must already sit inside the state box; it is fixed,
    // so a violation there can never be repaired.
    for i in 0..nx {
        if spec.x0[i] < spec.x_lower[i] - config.feasibility_tol
            || spec.x0[i] > spec.x_upper[i] + config.feasibility_tol
        {
            return finish(SolveStatus::Infeasible, &xs, &us, empty_multipliers(spec), 0);
        }
    }

    let mut penalty = config.initial_penalty;
    let mut stall_count = 0usize;
    let mut ls_failures = 0usize;
    let mut prev_theta1 = f64::INFINITY;

    for iter in 1..=config.max_iterations {
        let eval = match evaluate(spec, &xs, &us) {
            Ok(e) => e,
            Err(_) => return finish(SolveStatus::NumericalFailure, &xs, &us, empty_multipliers(spec), iter),
        };

        // Sensitivities of the condensed step: dx_k = T_k v + w_k.
        let mut t_mats: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
        let mut w_vecs: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        t_mats.push(DMatrix::zeros(nx, nv));
        w_vecs.push(DVector::zeros(nx));
        for k in 0..n {
            let mut t_next = &eval.a_jac[k] * &t_mats[k];
            t_next
                .view_mut((0, k * nu), (nx, nu))
                .zip_apply(&eval.b_jac[k], |t, b| *t += b);
            t_mats.push(t_next);
            w_vecs.push(&eval.a_jac[k] * &w_vecs[k] - &eval.defects[k]);
        }

        // Reduced Hessian and gradient of the quadratic objective.
        let mut h_red = DMatrix::<f64>::zeros(nv, nv);
        let mut g_red = DVector::<f64>::zeros(nv);
        for k in 1..=n {
            let w = if k == n { &spec.p } else { &spec.q };
            let qt = w * &t_mats[k];
            h_red += t_mats[k].transpose() * &qt * 2.0;
            let e = &xs[k] + &w_vecs[k] - &spec.x_ref;
            g_red += t_mats[k].transpose() * (w * e) * 2.0;
        }
        for k in 0..n {
            let block = &spec.r * 2.0;
            h_red.view_mut((k * nu, k * nu), (nu, nu)).zip_apply(&block, |h, b| *h += b);
            let gu = &spec.r * (&us[k] - &spec.u_ref) * 2.0;
            g_red.rows_mut(k * nu, nu).zip_apply(&gu, |g, v| *g += v);
        }
        // Symmetrize against accumulation drift.
        h_red = (&h_red + h_red.transpose()) * 0.5;

        // Linearized constraint rows in the reduced space.
        let mut rows: Vec<QpRow> = Vec::new();
        let mut constant_infeasible = false;
        for k in 0..n {
            for (j, (gx, gxn, gu)) in eval.con_grads[k].iter().enumerate() {
                let mut coeffs = t_mats[k].transpose() * gx + t_mats[k + 1].transpose() * gxn;
                coeffs.rows_mut(k * nu, nu).zip_apply(gu, |c, g| *c += g);
                let rhs = -eval.con_vals[k][j] - gx.dot(&w_vecs[k]) - gxn.dot(&w_vecs[k + 1]);
                if coeffs.abs().max() <= 1e-12 * (1.0 + rhs.abs()) {
                    if rhs <= config.feasibility_tol {
                        continue; // vacuous
                    }
                    // A violated constraint with no dependence on the
                    // decision variables: structurally unrepairable when it
                    // only reads the fixed initial state.
                    let structural = k == 0 && gxn.amax() == 0.0 && gu.amax() == 0.0;
                    if structural {
                        constant_infeasible = true;
                        continue;
                    }
                }
                rows.push(QpRow {
                    coeffs,
                    rhs,
                    kind: RowKind::Stage { step: k, index: j },
                    soft: true,
                });
            }
        }
        for k in 1..=n {
            let (lo, hi) = spec.state_bounds_at(k);
            for i in 0..nx {
                if lo[i].is_finite() {
                    rows.push(QpRow {
                        coeffs: t_mats[k].row(i).transpose(),
                        rhs: lo[i] - xs[k][i] - w_vecs[k][i],
                        kind: RowKind::StateLower { step: k, dim: i },
                        soft: true,
                    });
                }
                if hi[i].is_finite() {
                    rows.push(QpRow {
                        coeffs: -t_mats[k].row(i).transpose(),
                        rhs: xs[k][i] + w_vecs[k][i] - hi[i],
                        kind: RowKind::StateUpper { step: k, dim: i },
                        soft: true,
                    });
                }
            }
        }
        for k in 0..n {
            for i in 0..nu {
                if spec.u_lower[i].is_finite() {
                    let mut coeffs = DVector::zeros(nv);
                    coeffs[k * nu + i] = 1.0;
                    rows.push(QpRow {
                        coeffs,
                        rhs: spec.u_lower[i] - us[k][i],
                        kind: RowKind::InputLower { step: k, dim: i },
                        soft: false,
                    });
                }
                if spec.u_upper[i].is_finite() {
                    let mut coeffs = DVector::zeros(nv);
                    coeffs[k * nu + i] = -1.0;
                    rows.push(QpRow {
                        coeffs,
                        rhs: us[k][i] - spec.u_upper[i],
                        kind: RowKind::InputUpper { step: k, dim: i },
                        soft: false,
                    });
                }
            }
        }

        if constant_infeasible {
            return finish(SolveStatus::Infeasible, &xs, &us, empty_multipliers(spec), iter);
        }

        // Hard subproblem first; elastic fallback when inconsistent.
        let m_rows = rows.len();
        let mut row_mat = DMatrix::zeros(m_rows, nv);
        let mut rhs_vec = DVector::zeros(m_rows);
        for (i, row) in rows.iter().enumerate() {
            row_mat.row_mut(i).copy_from(&row.coeffs.transpose());
            rhs_vec[i] = row.rhs;
        }
        let mut restoration = false;
        let hard = solve_qp(&h_red, &g_red, &row_mat, &rhs_vec);
        let (v_step, row_multipliers) = match hard.status {
            QpStatus::Optimal => (hard.x, hard.lambda),
            QpStatus::Infeasible => {
                restoration = true;
                let soft_idx: Vec<usize> = (0..m_rows).filter(|&i| rows[i].soft).collect();
                let ns = soft_idx.len();
                let ne = nv + ns;
                let eps = 1e-8 * (1.0 + h_red.diagonal().sum() / nv.max(1) as f64);
                let mut g_el = DMatrix::zeros(ne, ne);
                g_el.view_mut((0, 0), (nv, nv)).copy_from(&h_red);
                for i in 0..ns {
                    g_el[(nv + i, nv + i)] = eps;
                }
                let mut c_el = DVector::zeros(ne);
                c_el.rows_mut(0, nv).copy_from(&g_red);
                for i in 0..ns {
                    c_el[nv + i] = penalty;
                }
                // Relaxed rows, slack nonnegativity, then hard rows.
                let mut el_rows = DMatrix::zeros(m_rows + ns, ne);
                let mut el_rhs = DVector::zeros(m_rows + ns);
                for (slot, &i) in soft_idx.iter().enumerate() {
                    el_rows
                        .view_mut((slot, 0), (1, nv))
                        .copy_from(&rows[i].coeffs.transpose());
                    el_rows[(slot, nv + slot)] = 1.0;
                    el_rhs[slot] = rows[i].rhs;
                }
                for slot in 0..ns {
                    el_rows[(ns + slot, nv + slot)] = 1.0;
                    el_rhs[ns + slot] = 0.0;
                }
                let mut hard_slot = 2 * ns;
                for (i, row) in rows.iter().enumerate() {
                    if row.soft {
                        continue;
                    }
                    el_rows
                        .view_mut((hard_slot, 0), (1, nv))
                        .copy_from(&row.coeffs.transpose());
                    el_rhs[hard_slot] = rhs_vec[i];
                    hard_slot += 1;
                }
                let el_rows = el_rows.rows(0, hard_slot).into_owned();
                let el_rhs = el_rhs.rows(0, hard_slot).into_owned();
                let elastic = solve_qp(&g_el, &c_el, &el_rows, &el_rhs);
                if elastic.status != QpStatus::Optimal {
                    return finish(SolveStatus::NumericalFailure, &xs, &us, empty_multipliers(spec), iter);
                }
                // Map multipliers back onto the original rows.
                let mut lambda = DVector::zeros(m_rows);
                for (slot, &i) in soft_idx.iter().enumerate() {
                    lambda[i] = elastic.lambda[slot];
                }
                let mut hard_slot = 2 * ns;
                for (i, row) in rows.iter().enumerate() {
                    if row.soft {
                        continue;
                    }
                    lambda[i] = elastic.lambda[hard_slot];
                    hard_slot += 1;
                }
                (elastic.x.rows(0, nv).into_owned(), lambda)
            }
            _ => {
                return finish(SolveStatus::NumericalFailure, &xs, &us, empty_multipliers(spec), iter);
            }
        };

        // Recover the full multiplier set; costates come from the state
        // stationarity rows, solved backwards.
        let mult = recover_multipliers(spec, &eval, &rows, &row_multipliers);

        let parts = kkt_parts(spec, &xs, &us, &mult)?;
        let step_inf = v_step.amax();
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "iter {iter} obj {:.16e} viol {:.16e} kkt {:.16e} step {:.16e} penalty {:.3e}{}",
                eval.objective,
                eval.theta_inf,
                parts.total(),
                step_inf,
                penalty,
                if restoration { " restoration" } else { "" }
            )
            .ok();
        }
        if parts.total() <= config.optimality_tol && parts.feasibility <= config.feasibility_tol {
            return finish(SolveStatus::Solved, &xs, &us, mult, iter);
        }

        // Restoration stall detection: violation no longer shrinking while
        // the subproblem stays inconsistent.
        if restoration {
            let min_dec = config.restoration_min_decrease;
            if eval.theta1 > 10.0 * config.feasibility_tol
                && eval.theta1 >= prev_theta1 * (1.0 - min_dec)
            {
                stall_count += 1;
                if stall_count >= config.restoration_stall_iters {
                    return finish(SolveStatus::Infeasible, &xs, &us, mult, iter);
                }
            } else {
                stall_count = 0;
            }
        } else {
            stall_count = 0;
        }
        prev_theta1 = eval.theta1;

        // Full-space step and directional derivative of the merit function.
        let mut dx: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        for k in 0..=n {
            dx.push(&t_mats[k] * &v_step + &w_vecs[k]);
        }
        let mut d_obj = 0.0;
        for k in 1..=n {
            d_obj += eval.grad_x[k - 1].dot(&dx[k]);
        }
        for k in 0..n {
            d_obj += eval.grad_u[k].dot(&v_step.rows(k * nu, nu));
        }

        // Keep the penalty above the multiplier scale (exactness) and large
        // enough to make this step a descent direction for the merit.
        let mut mult_scale: f64 = 0.0;
        for sig in &mult.dynamics {
            mult_scale = mult_scale.max(sig.abs().max());
        }
        for (i, row) in rows.iter().enumerate() {
            if row.soft {
                mult_scale = mult_scale.max(row_multipliers[i]);
            }
        }
        penalty = penalty.max(1.2 * mult_scale + 0.1);
        if eval.theta1 > config.feasibility_tol {
            let quad = (&h_red * &v_step).dot(&v_step);
            let required = (d_obj + 0.5 * quad) / (0.5 * eval.theta1);
            penalty = penalty.max(required).min(config.max_penalty);
        }

        let merit0 = eval.objective + penalty * eval.theta1;
        let descent = d_obj - penalty * eval.theta1;

        // Armijo backtracking on the l1 merit.
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut best: Option<(f64, Vec<DVector<f64>>, Vec<DVector<f64>>)> = None;
        for _ in 0..config.max_line_search_steps {
            let mut xs_t = Vec::with_capacity(n + 1);
            xs_t.push(spec.x0.clone());
            for k in 1..=n {
                xs_t.push(&xs[k] + &dx[k] * alpha);
            }
            let mut us_t = Vec::with_capacity(n);
            for k in 0..n {
                let mut u = &us[k] + v_step.rows(k * nu, nu) * alpha;
                for i in 0..nu {
                    u[i] = u[i].clamp(spec.u_lower[i], spec.u_upper[i]);
                }
                us_t.push(u);
            }
            let Ok((obj_t, theta1_t, _)) = merit_terms(spec, &xs_t, &us_t) else {
                alpha *= config.backtrack_factor;
                continue;
            };
            let merit_t = obj_t + penalty * theta1_t;
            if merit_t <= merit0 + config.armijo_coeff * alpha * descent.min(0.0) {
                xs = xs_t;
                us = us_t;
                accepted = true;
                break;
            }
            if best.as_ref().is_none_or(|(b, _, _)| merit_t < *b) {
                best = Some((merit_t, xs_t, us_t));
            }
            alpha *= config.backtrack_factor;
        }
        if !accepted {
            // Take the best trial if it improves the merit at all.
            if let Some((merit_b, xs_b, us_b)) = best {
                if merit_b < merit0 {
                    xs = xs_b;
                    us = us_b;
                    ls_failures = 0;
                    continue;
                }
            }
            ls_failures += 1;
            if ls_failures >= 2 {
                let status = if eval.theta_inf > 10.0 * config.feasibility_tol {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                return finish(status, &xs, &us, mult, iter);
            }
        } else {
            ls_failures = 0;
        }
    }

    finish(
        SolveStatus::MaxIter,
        &xs,
        &us,
        empty_multipliers(spec),
        config.max_iterations,
    )
}

fn empty_multipliers(spec: &OcpSpec) -> Multipliers {
    let n = spec.horizon;
    let nx = spec.state_dim();
    let nu = spec.input_dim();
    Multipliers {
        dynamics: vec![DVector::zeros(nx); n],
        stage: spec
            .stage_constraints
            .iter()
            .map(|cs| vec![0.0; cs.len()])
            .collect(),
        x_lower: vec![DVector::zeros(nx); n],
        x_upper: vec![DVector::zeros(nx); n],
        u_lower: vec![DVector::zeros(nu); n],
        u_upper: vec![DVector::zeros(nu); n],
    }
}

/// Map QP row multipliers to the spec's constraint layout and recover the
/// dynamics costates from the state stationarity rows.
fn recover_multipliers(
    spec: &OcpSpec,
    eval: &Evaluation,
    rows: &[QpRow],
    lambda: &DVector<f64>,
) -> Multipliers {
    let n = spec.horizon;
    let mut mult = empty_multipliers(spec);
    for (i, row) in rows.iter().enumerate() {
        let l = lambda[i].max(0.0);
        match row.kind {
            RowKind::Stage { step, index } => mult.stage[step][index] = l,
            RowKind::StateLower { step, dim } => mult.x_lower[step - 1][dim] = l,
            RowKind::StateUpper { step, dim } => mult.x_upper[step - 1][dim] = l,
            RowKind::InputLower { step, dim } => mult.u_lower[step][dim] = l,
            RowKind::InputUpper { step, dim } => mult.u_upper[step][dim] = l,
        }
    }
    // Backward costate recursion zeroing each state stationarity row.
    for k in (1..=n).rev() {
        let mut row = eval.grad_x[k - 1].clone();
        if k < n {
            row -= eval.a_jac[k].transpose() * &mult.dynamics[k];
            for (j, (gx, _, _)) in eval.con_grads[k].iter().enumerate() {
                row -= gx * mult.stage[k][j];
            }
        }
        for (j, (_, gxn, _)) in eval.con_grads[k - 1].iter().enumerate() {
            row -= gxn * mult.stage[k - 1][j];
        }
        row -= &mult.x_lower[k - 1];
        row += &mult.x_upper[k - 1];
        mult.dynamics[k - 1] = -row;
    }
    mult
}
