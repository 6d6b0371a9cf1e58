use nalgebra::{DMatrix, DVector};

use super::{Dataset, ModelVec, TaskModel};
use crate::error::{Error, Result};

/// Minimizer of the mean loss over a dataset.
#[derive(Debug, Clone)]
pub struct OptimumReport {
    pub params: ModelVec,
    /// Mean loss at `params`.
    pub loss: f64,
    /// Norm of the mean-loss gradient at `params`.
    pub grad_norm: f64,
    pub iterations: usize,
}

const MAX_NEWTON_STEPS: usize = 200;

/// Damped Newton's method on the mean loss of a linear (convex) task,
/// started from zero and stopped once the gradient norm is at most `tol`.
pub fn minimize_pooled(task: &TaskModel, data: &Dataset, tol: f64) -> Result<OptimumReport> {
    if !task.is_linear() {
        return Err(Error::Contract("pooled optimum requires a convex (linear) task".into()));
    }
    let n = task.num_params();
    let k = data.len() as f64;
    let mut w = ModelVec::zeros(n);
    let mut loss = task.mean_loss(&w, data)?;
    for it in 0..MAX_NEWTON_STEPS {
        let grad = task.gradient(&w, data)?.scaled(1.0 / k);
        let grad_norm = grad.norm();
        if grad_norm <= tol {
            return Ok(OptimumReport {
                params: w,
                loss,
                grad_norm,
                iterations: it,
            });
        }
        let h = DMatrix::from_row_slice(n, n, &task.hessian(&w, data)?) / k;
        let g = DVector::from_column_slice(&grad.0);
        let dir = newton_direction(h, &g);
        let slope = g.dot(&dir);
        let mut t = 1.0;
        loop {
            let mut trial = w.clone();
            trial.axpy(t, &ModelVec(dir.as_slice().to_vec()));
            let trial_loss = task.mean_loss(&trial, data)?;
            // near the optimum loss differences drop below rounding, so
            // a smaller gradient also counts as progress
            let accept = trial_loss <= loss + 1e-4 * t * slope
                || task.gradient(&trial, data)?.norm() / k < grad_norm
                || t < 1e-12;
            if accept {
                w = trial;
                loss = trial_loss;
                break;
            }
            t *= 0.5;
        }
    }
    let grad_norm = task.gradient(&w, data)?.scaled(1.0 / k).norm();
    if grad_norm <= tol {
        Ok(OptimumReport {
            params: w,
            loss,
            grad_norm,
            iterations: MAX_NEWTON_STEPS,
        })
    } else {
        Err(Error::Domain(format!(
            "Newton's method stalled at gradient norm {grad_norm:e} (tolerance {tol:e})"
        )))
    }
}

/// Solves `H d = -g`, adding a growing ridge when `H` is not positive definite.
fn newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let scale = h.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    loop {
        let m = &h + DMatrix::identity(n, n) * ridge;
        if let Some(chol) = m.cholesky() {
            return -chol.solve(g);
        }
        ridge = if ridge == 0.0 { scale * 1e-12 } else { ridge * 10.0 };
    }
}
