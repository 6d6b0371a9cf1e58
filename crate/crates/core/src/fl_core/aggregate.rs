use super::ModelVec;
use crate::error::{Error, Result};

/// Dataset-size weighted average of the selected users' local models.
pub fn aggregate_global(local_models: &[ModelVec], assoc: &[bool], sizes: &[usize]) -> Result<ModelVec> {
    check_lengths(local_models.len(), assoc.len(), sizes.len())?;
    let terms: Vec<(usize, &ModelVec)> = (0..local_models.len())
        .filter(|&i| assoc[i])
        .map(|i| (sizes[i], &local_models[i]))
        .collect();
    if terms.is_empty() {
        return Err(Error::Contract("aggregation needs at least one selected user".into()));
    }
    weighted_average(&terms)
}

/// Weighted average over received models and, for unselected users whose
/// gate is open, their predicted models.
///
/// Gates of selected users are ignored. An open gate without a prediction is
/// a contract violation.
pub fn aggregate_with_predictions(
    local_models: &[ModelVec],
    predicted: &[Option<ModelVec>],
    assoc: &[bool],
    gates: &[bool],
    sizes: &[usize],
) -> Result<ModelVec> {
    check_lengths(local_models.len(), assoc.len(), sizes.len())?;
    if predicted.len() != assoc.len() || gates.len() != assoc.len() {
        return Err(Error::Contract("predictions and gates must have one entry per user".into()));
    }
    let mut terms = Vec::new();
    for i in 0..assoc.len() {
        if assoc[i] {
            terms.push((sizes[i], &local_models[i]));
        } else if gates[i] {
            let w = predicted[i]
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("gate open for user {i} without a prediction")))?;
            terms.push((sizes[i], w));
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract("aggregation denominator is zero".into()));
    }
    weighted_average(&terms)
}

fn check_lengths(models: usize, assoc: usize, sizes: usize) -> Result<()> {
    if models != assoc || sizes != assoc {
        return Err(Error::Contract(format!(
            "{models} models, {assoc} association entries and {sizes} dataset sizes"
        )));
    }
    Ok(())
}

/// `Σ (K_i / ΣK) w_i`, summed in the order given (ascending user index).
fn weighted_average(terms: &[(usize, &ModelVec)]) -> Result<ModelVec> {
    let len = terms[0].1.len();
    if terms.iter().any(|(_, w)| w.len() != len) {
        return Err(Error::Contract("local models differ in length".into()));
    }
    let total: usize = terms.iter().map(|(k, _)| k).sum();
    if total == 0 {
        return Err(Error::Contract("aggregation denominator is zero".into()));
    }
    let mut g = ModelVec::zeros(len);
    let mut weight_sum = 0.0;
    for (k, w) in terms {
        let weight = *k as f64 / total as f64;
        weight_sum += weight;
        g.axpy(weight, w);
    }
    assert!((weight_sum - 1.0).abs() <= 1e-12, "aggregation weights sum to {weight_sum}");
    Ok(g)
}
