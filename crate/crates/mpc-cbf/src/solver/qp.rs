//! Dense strictly convex quadratic programming by the dual active-set
//! method of Goldfarb and Idnani.
//!
//! Solves `min 1/2 x' G x + c' x  s.t.  A x >= b` with `G` positive
//! definite. The method starts from the unconstrained minimizer and adds
//! violated constraints one at a time, so no feasible starting point is
//! needed, and dual unboundedness yields a definite infeasibility
//! certificate.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// One multiplier per constraint row; zero when inactive.
    pub lambda: DVector<f64>,
    pub iterations: usize,
}

impl QpResult {
    fn failed(status: QpStatus, n: usize, m: usize, iterations: usize) -> Self {
        Self {
            status,
            x: DVector::zeros(n),
            lambda: DVector::zeros(m),
            iterations,
        }
    }
}

/// Solve `min 1/2 x' G x + c' x  s.t.  rows * x >= rhs`.
pub fn solve_qp(g: &DMatrix<f64>, c: &DVector<f64>, rows: &DMatrix<f64>, rhs: &DVector<f64>) -> QpResult {
    let n = g.nrows();
    let m = rows.nrows();
    debug_assert_eq!(g.ncols(), n);
    debug_assert_eq!(c.len(), n);
    debug_assert_eq!(rows.ncols(), n.max(rows.ncols().min(n)));
    debug_assert_eq!(rhs.len(), m);

    let Some(chol) = g.clone().cholesky() else {
        return QpResult::failed(QpStatus::NumericalFailure, n, m, 0);
    };

    // Unconstrained minimizer and J = L^{-T}.
    let mut x = -chol.solve(c);
    let lt = chol.l().transpose();
    let Some(mut j_mat) = lt.solve_upper_triangular(&DMatrix::identity(n, n)) else {
        return QpResult::failed(QpStatus::NumericalFailure, n, m, 0);
    };
    if !x.iter().all(|v| v.is_finite()) {
        return QpResult::failed(QpStatus::NumericalFailure, n, m, 0);
    }

    let mut r_mat = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u_act: Vec<f64> = Vec::new();

    let iter_max = 50 * (n + m) + 200;
    let mut iterations = 0;

    loop {
        // Most violated inactive constraint.
        let mut worst = f64::INFINITY;
        let mut chosen = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = rows.row(i).transpose().dot(&x) - rhs[i];
            let tol = 1e-10 * (1.0 + rhs[i].abs());
            if s < -tol && s < worst {
                worst = s;
                chosen = Some(i);
            }
        }
        let Some(p) = chosen else {
            let mut lambda = DVector::zeros(m);
            for (idx, &row) in active.iter().enumerate() {
                lambda[row] = u_act[idx];
            }
            return QpResult {
                status: QpStatus::Optimal,
                x,
                lambda,
                iterations,
            };
        };

        let np = rows.row(p).transpose();
        let mut s_p = worst;
        let mut u_p = 0.0;

        // Inner loop: take primal/dual steps toward activating p, dropping
        // blocking constraints as their multipliers hit zero.
        loop {
            iterations += 1;
            if iterations > iter_max {
                return QpResult::failed(QpStatus::IterationLimit, n, m, iterations);
            }

            let q = active.len();
            let d = j_mat.transpose() * &np;
            // Primal step direction in the null space of the active normals.
            let mut z = DVector::zeros(n);
            for i in q..n {
                z.axpy(d[i], &j_mat.column(i).into_owned(), 1.0);
            }
            // Dual step direction.
            let mut r = DVector::zeros(q);
            if q > 0 {
                for i in (0..q).rev() {
                    let mut acc = d[i];
                    for k in i + 1..q {
                        acc -= r_mat[(i, k)] * r[k];
                    }
                    r[i] = acc / r_mat[(i, i)];
                }
            }

            let ztn = z.dot(&np);
            let has_primal = ztn > 1e-13 * (1.0 + np.norm_squared());

            let mut t1 = f64::INFINITY;
            let mut k1 = None;
            for jdx in 0..q {
                if r[jdx] > 1e-12 {
                    let ratio = u_act[jdx] / r[jdx];
                    if ratio < t1 {
                        t1 = ratio;
                        k1 = Some(jdx);
                    }
                }
            }

            if !has_primal && k1.is_none() {
                // No primal progress possible and no dual step: the
                // constraint set is inconsistent.
                return QpResult::failed(QpStatus::Infeasible, n, m, iterations);
            }

            let t2 = if has_primal { -s_p / ztn } else { f64::INFINITY };
            let t = t1.min(t2);

            if !has_primal {
                // Pure dual step.
                for jdx in 0..q {
                    u_act[jdx] -= t * r[jdx];
                }
                u_p += t;
                drop_constraint(&mut active, &mut u_act, &mut r_mat, &mut j_mat, k1.unwrap());
                continue;
            }

            x.axpy(t, &z, 1.0);
            for jdx in 0..q {
                u_act[jdx] -= t * r[jdx];
            }
            u_p += t;
            s_p = np.dot(&x) - rhs[p];

            if t2 <= t1 {
                // Full step: activate p.
                let mut d = d;
                for i in ((q + 1)..n).rev() {
                    if d[i] == 0.0 {
                        continue;
                    }
                    let h = d[i - 1].hypot(d[i]);
                    let (cg, sg) = (d[i - 1] / h, d[i] / h);
                    d[i - 1] = h;
                    d[i] = 0.0;
                    rotate_columns(&mut j_mat, i - 1, i, cg, sg);
                }
                if d[q].abs() <= 1e-12 * (1.0 + np.norm()) {
                    return QpResult::failed(QpStatus::NumericalFailure, n, m, iterations);
                }
                for i in 0..=q {
                    r_mat[(i, q)] = d[i];
                }
                active.push(p);
                u_act.push(u_p);
                break;
            } else {
                // Partial step: drop the blocking constraint and retry.
                drop_constraint(&mut active, &mut u_act, &mut r_mat, &mut j_mat, k1.unwrap());
            }
        }
    }
}

/// Apply the rotation `[c s; -s c]` to columns `(i, j)` of `m`.
fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let a = m[(row, i)];
        let b = m[(row, j)];
        m[(row, i)] = c * a + s * b;
        m[(row, j)] = -s * a + c * b;
    }
}

/// Remove active constraint `k`, restoring the triangularity of `R`.
fn drop_constraint(
    active: &mut Vec<usize>,
    u_act: &mut Vec<f64>,
    r_mat: &mut DMatrix<f64>,
    j_mat: &mut DMatrix<f64>,
    k: usize,
) {
    let q = active.len();
    active.remove(k);
    u_act.remove(k);
    // Shift columns of R left over the removed one.
    for col in k..q - 1 {
        for row in 0..q {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..q {
        r_mat[(row, q - 1)] = 0.0;
    }
    // Re-triangularize: kill the subdiagonal introduced by the shift.
    for i in k..q - 1 {
        let a = r_mat[(i, i)];
        let b = r_mat[(i + 1, i)];
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cg, sg) = (a / h, b / h);
        // Rotate rows (i, i+1) of R across the remaining columns.
        for col in i..q - 1 {
            let top = r_mat[(i, col)];
            let bot = r_mat[(i + 1, col)];
            r_mat[(i, col)] = cg * top + sg * bot;
            r_mat[(i + 1, col)] = -sg * top + cg * bot;
        }
        r_mat[(i + 1, i)] = 0.0;
        rotate_columns(j_mat, i, i + 1, cg, sg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn unconstrained_minimum() {
        let res = solve_qp(&dm(1, 1, &[2.0]), &dv(&[-4.0]), &DMatrix::zeros(0, 1), &dv(&[]));
        assert_eq!(res.status, QpStatus::Optimal);
        assert_abs_diff_eq!(res.x[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn active_bound_with_multiplier() {
        // min 1/2 x^2 - 2x s.t. -x >= -1  (x <= 1): optimum x = 1, lambda = 1.
        let res = solve_qp(&dm(1, 1, &[1.0]), &dv(&[-2.0]), &dm(1, 1, &[-1.0]), &dv(&[-1.0]));
        assert_eq!(res.status, QpStatus::Optimal);
        assert_abs_diff_eq!(res.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.lambda[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_halfspace() {
        // min x1^2 + x2^2 s.t. x1 + x2 >= 1.
        let res = solve_qp(
            &dm(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            &dv(&[0.0, 0.0]),
            &dm(1, 2, &[1.0, 1.0]),
            &dv(&[1.0]),
        );
        assert_eq!(res.status, QpStatus::Optimal);
        assert_abs_diff_eq!(res.x[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(res.x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        // x >= 1 and -x >= 0.
        let res = solve_qp(
            &dm(1, 1, &[1.0]),
            &dv(&[0.0]),
            &dm(2, 1, &[1.0, -1.0]),
            &dv(&[1.0, 0.0]),
        );
        assert_eq!(res.status, QpStatus::Infeasible);
    }

    /// Enumerate all active subsets and solve the equality KKT system:
    /// an independent oracle for small problems.
    fn oracle(
        g: &DMatrix<f64>,
        c: &DVector<f64>,
        rows: &DMatrix<f64>,
        rhs: &DVector<f64>,
    ) -> Option<(DVector<f64>, f64)> {
        let n = g.nrows();
        let m = rows.nrows();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0..(1usize << m) {
            let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if subset.len() > n {
                continue;
            }
            let q = subset.len();
            let mut kkt = DMatrix::zeros(n + q, n + q);
            kkt.view_mut((0, 0), (n, n)).copy_from(g);
            for (idx, &i) in subset.iter().enumerate() {
                for col in 0..n {
                    kkt[(n + idx, col)] = rows[(i, col)];
                    kkt[(col, n + idx)] = -rows[(i, col)];
                }
            }
            let mut b = DVector::zeros(n + q);
            for i in 0..n {
                b[i] = -c[i];
            }
            for (idx, &i) in subset.iter().enumerate() {
                b[n + idx] = rhs[i];
            }
            let Some(sol) = kkt.lu().solve(&b) else { continue };
            let x = sol.rows(0, n).into_owned();
            let lam = sol.rows(n, q);
            if lam.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let feasible = (0..m).all(|i| rows.row(i).transpose().dot(&x) >= rhs[i] - 1e-9);
            if !feasible {
                continue;
            }
            let obj = 0.5 * (g * &x).dot(&x) + c.dot(&x);
            if best.as_ref().is_none_or(|(_, bo)| obj < *bo) {
                best = Some((x, obj));
            }
        }
        best
    }

    #[test]
    fn random_instances_match_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut solved = 0;
        let mut infeasible = 0;
        for _ in 0..150 {
            let n = rng.random_range(1..4usize);
            let m = rng.random_range(1..6usize);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(0.1..1.0);
            let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let rows = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let rhs = DVector::from_fn(m, |_, _| rng.random_range(-1.5..1.5));

            let res = solve_qp(&g, &c, &rows, &rhs);
            match oracle(&g, &c, &rows, &rhs) {
                Some((x_star, obj_star)) => {
                    assert_eq!(res.status, QpStatus::Optimal, "oracle found {x_star:?}");
                    let obj = 0.5 * (&g * &res.x).dot(&res.x) + c.dot(&res.x);
                    assert!(
                        (obj - obj_star).abs() <= 1e-7 * (1.0 + obj_star.abs()),
                        "objective mismatch: {obj} vs {obj_star}"
                    );
                    solved += 1;
                }
                None => {
                    assert_eq!(res.status, QpStatus::Infeasible);
                    infeasible += 1;
                }
            }
        }
        // Make sure both branches were exercised.
        assert!(solved > 50, "solved only {solved}");
        assert!(infeasible > 5, "infeasible only {infeasible}");
    }

    #[test]
    fn multipliers_satisfy_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(2..5usize);
            let m = rng.random_range(1..7usize);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(n, n);
            let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let rows = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let rhs = DVector::from_fn(m, |_, _| rng.random_range(-1.0..0.5));
            let res = solve_qp(&g, &c, &rows, &rhs);
            if res.status != QpStatus::Optimal {
                continue;
            }
            // G x + c - rows' lambda = 0.
            let station = &g * &res.x + &c - rows.transpose() * &res.lambda;
            assert!(station.abs().max() < 1e-8, "stationarity {}", station.abs().max());
            for i in 0..m {
                assert!(res.lambda[i] >= -1e-10);
                let slack = rows.row(i).transpose().dot(&res.x) - rhs[i];
                assert!(slack >= -1e-8);
                assert!((res.lambda[i] * slack).abs() < 1e-7);
            }
        }
    }
}
