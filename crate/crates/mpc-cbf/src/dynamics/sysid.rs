//! Least-squares identification of linear time-invariant dynamics.

use nalgebra::{DMatrix, DVector};

use super::DiscreteModel;
use crate::{Error, Result};

/// A linear model `x_{k+1} = A x_k + B u_k` fit from trajectory data.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// RMS one-step prediction error norm on the training data.
    pub fit_residual: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
            return Err(Error::InvalidProblem(format!(
                "inconsistent linear model dimensions: A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self {
            a,
            b,
            fit_residual: 0.0,
        })
    }

    /// Largest eigenvalue magnitude of `A`.
    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

impl DiscreteModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "linear model state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "linear model input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Fit `[A B]` by least squares over observed transitions.
///
/// `states` must hold one more entry than `inputs`; transition `k` maps
/// `(states[k], inputs[k])` to `states[k+1]`. Requires at least `n + m + 1`
/// transitions and a full-rank regressor matrix.
pub fn fit_linear_model(states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<LinearModel> {
    if states.len() != inputs.len() + 1 {
        return Err(Error::InvalidProblem(format!(
            "need one more state than input, got {} states and {} inputs",
            states.len(),
            inputs.len()
        )));
    }
    let k = inputs.len();
    if k == 0 {
        return Err(Error::Identifiability("no transitions supplied".into()));
    }
    let n = states[0].len();
    let m = inputs[0].len();
    if k < n + m + 1 {
        return Err(Error::Identifiability(format!(
            "underdetermined: {k} transitions for {} regressors (need at least {})",
            n + m,
            n + m + 1
        )));
    }

    let mut phi = DMatrix::zeros(k, n + m);
    let mut y = DMatrix::zeros(k, n);
    for t in 0..k {
        if states[t].len() != n || states[t + 1].len() != n {
            return Err(Error::DimensionMismatch {
                what: "identification state",
                expected: n,
                got: states[t].len().min(states[t + 1].len()),
            });
        }
        if inputs[t].len() != m {
            return Err(Error::DimensionMismatch {
                what: "identification input",
                expected: m,
                got: inputs[t].len(),
            });
        }
        for j in 0..n {
            phi[(t, j)] = states[t][j];
            y[(t, j)] = states[t + 1][j];
        }
        for j in 0..m {
            phi[(t, n + j)] = inputs[t][j];
        }
    }

    let svd = phi.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let rank_tol = 1e-10 * sigma_max.max(1.0);
    let deficient: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= rank_tol)
        .map(|(i, _)| i)
        .collect();
    if !deficient.is_empty() {
        let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
        let mut directions = Vec::new();
        for &i in &deficient {
            let row = v_t.row(i);
            let (j, _) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("nonempty row");
            directions.push(if j < n {
                format!("state[{j}]")
            } else {
                format!("input[{}]", j - n)
            });
        }
        return Err(Error::Identifiability(format!(
            "regressor matrix is rank deficient; unexcited directions: {}",
            directions.join(", ")
        )));
    }

    let theta = svd
        .solve(&y, rank_tol)
        .map_err(|e| Error::Identifiability(e.to_string()))?;
    let a = theta.rows(0, n).transpose();
    let b = theta.rows(n, m).transpose();

    let mut model = LinearModel::new(a, b)?;
    model.fit_residual = one_step_rms(&model, states, inputs)?;
    Ok(model)
}

/// RMS of the one-step prediction error norm over a trajectory.
pub fn one_step_rms(
    model: &LinearModel,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<f64> {
    if states.len() != inputs.len() + 1 || inputs.is_empty() {
        return Err(Error::InvalidProblem(
            "need one more state than input and at least one transition".into(),
        ));
    }
    let mut acc = 0.0;
    for t in 0..inputs.len() {
        let pred = model.step(&states[t], &inputs[t])?;
        acc += (&states[t + 1] - pred).norm_squared();
    }
    Ok((acc / inputs.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rollout(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        x0: DVector<f64>,
        inputs: &[DVector<f64>],
    ) -> Vec<DVector<f64>> {
        let mut states = vec![x0];
        for u in inputs {
            let x = states.last().unwrap();
            states.push(a * x + b * u);
        }
        states
    }

    #[test]
    fn recovers_scalar_system_exactly() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<_> = (0..20)
            .map(|_| DVector::from_row_slice(&[rng.random_range(-1.0..1.0f64)]))
            .collect();
        let states = rollout(&a, &b, DVector::from_row_slice(&[0.3]), &inputs);
        let model = fit_linear_model(&states, &inputs).unwrap();
        assert_abs_diff_eq!(model.a[(0, 0)], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(model.b[(0, 0)], 1.0, epsilon = 1e-10);
        assert!(model.fit_residual <= 1e-10);
    }

    #[test]
    fn recovers_multivariate_system() {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.8, 0.05, 0.0, 0.1, 0.7]);
        let b = DMatrix::from_row_slice(3, 2, &[0.1, 0.0, 0.0, 0.2, 0.05, 0.05]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<_> = (0..60)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let states = rollout(&a, &b, DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)), &inputs);
        let model = fit_linear_model(&states, &inputs).unwrap();
        assert!((model.a - a).abs().max() <= 1e-8);
        assert!((model.b - b).abs().max() <= 1e-8);
    }

    #[test]
    fn underdetermined_data_is_rejected() {
        // n + m - 1 = 2 transitions for a scalar system with one input.
        let states = vec![
            DVector::from_row_slice(&[0.1]),
            DVector::from_row_slice(&[0.2]),
        ];
        let inputs = vec![DVector::from_row_slice(&[0.5])];
        let err = fit_linear_model(&states, &inputs).unwrap_err();
        assert!(matches!(err, crate::Error::Identifiability(_)));
    }

    #[test]
    fn rank_deficiency_names_the_dead_direction() {
        // Second input channel held at zero: never excited.
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<_> = (0..20)
            .map(|_| DVector::from_row_slice(&[rng.random_range(-1.0..1.0f64), 0.0]))
            .collect();
        let states = rollout(&a, &b, DVector::from_row_slice(&[0.3]), &inputs);
        let err = fit_linear_model(&states, &inputs).unwrap_err();
        match err {
            crate::Error::Identifiability(msg) => assert!(msg.contains("input[1]"), "{msg}"),
            other => panic!("expected identifiability error, got {other:?}"),
        }
    }
}
