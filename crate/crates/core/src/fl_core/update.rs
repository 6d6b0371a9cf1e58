use rand::Rng;

use super::{Dataset, ModelVec, TaskModel};
use crate::error::{Error, Result};

/// One full-gradient step from the global model:
/// `w = g - (λ/K) Σ_k ∇f(g, x_k, y_k)`.
pub fn local_update_full_gd(task: &TaskModel, global: &ModelVec, data: &Dataset, step: f64) -> Result<ModelVec> {
    check_step(step)?;
    let grad = task.gradient(global, data)?;
    Ok(full_gd_from_gradient(global, &grad, data.len(), step))
}

/// `g - (λ/K) * grad_sum` for an already computed gradient sum.
pub(crate) fn full_gd_from_gradient(global: &ModelVec, grad_sum: &ModelVec, samples: usize, step: f64) -> ModelVec {
    let mut w = global.clone();
    w.axpy(-step / samples as f64, grad_sum);
    w
}

/// One single-sample step `w = g - λ ∇f(g, x_k, y_k)` with `k` drawn from
/// `sample_probs` (uniform when `None`). Returns the model and the drawn index.
pub fn local_update_sgd<R: Rng + ?Sized>(
    task: &TaskModel,
    global: &ModelVec,
    data: &Dataset,
    step: f64,
    sample_probs: Option<&[f64]>,
    rng: &mut R,
) -> Result<(ModelVec, usize)> {
    check_step(step)?;
    if data.is_empty() {
        return Err(Error::Data("SGD step on an empty dataset".into()));
    }
    let k = match sample_probs {
        None => rng.random_range(0..data.len()),
        Some(q) => draw_index(q, data.len(), rng)?,
    };
    let grad = task.sample_gradient(global, &data.inputs[k], &data.outputs[k])?;
    let mut w = global.clone();
    w.axpy(-step, &grad);
    Ok((w, k))
}

fn check_step(step: f64) -> Result<()> {
    if !(step.is_finite() && step >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {step}")));
    }
    Ok(())
}

fn draw_index<R: Rng + ?Sized>(q: &[f64], len: usize, rng: &mut R) -> Result<usize> {
    if q.len() != len {
        return Err(Error::Config(format!("{} sample probabilities for {len} samples", q.len())));
    }
    if q.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config("sample probabilities must be non-negative".into()));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("sample probabilities sum to {total}")));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in q.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        last = i;
        acc += p;
        if target < acc {
            return Ok(i);
        }
    }
    Ok(last)
}
