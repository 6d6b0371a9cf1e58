//! Anchor choice and gradient-norm-proportional user association.
//!
//! One user (the anchor) is chosen in the first round among the `gamma_r`
//! users nearest to the base station and transmits in every round. The other
//! users connect with probability proportional to the norm of the change
//! their local update would make to the global model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net_model::rank_by_distance;

/// Per-round selection outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub anchor: usize,
    pub e_norms: Vec<f64>,
    pub probs: Vec<f64>,
    pub assoc: Vec<bool>,
}

/// Anchor user: the largest gradient norm among the `gamma_r` users nearest
/// to the base station. Ties go to the nearer user, then the lower index.
pub fn pick_anchor(distances: &[f64], gradient_norms: &[f64], gamma_r: usize) -> Result<usize> {
    let u = distances.len();
    if gradient_norms.len() != u {
        return Err(Error::Contract(format!(
            "{} gradient norms for {u} users",
            gradient_norms.len()
        )));
    }
    if gamma_r == 0 || gamma_r > u {
        return Err(Error::Config(format!("gamma_r must be in 1..={u}, got {gamma_r}")));
    }
    let candidates = &rank_by_distance(distances)[..gamma_r];
    // candidates are in (distance, index) order, so keeping the first strict
    // maximum implements the tie rule
    let mut best = candidates[0];
    for &i in &candidates[1..] {
        if gradient_norms[i] > gradient_norms[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Connection probability of every user for the given update norms. The
/// anchor always connects; the rest share probability mass in proportion to
/// their norms, or uniformly when all of them are zero.
pub fn connection_probabilities(e_norms: &[f64], anchor: usize) -> Result<Vec<f64>> {
    let u = e_norms.len();
    if anchor >= u {
        return Err(Error::Contract(format!("anchor {anchor} out of range for {u} users")));
    }
    if let Some(bad) = e_norms.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
        return Err(Error::Domain(format!("update norms must be non-negative, got {bad}")));
    }
    let total: f64 = e_norms
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor)
        .map(|(_, n)| n)
        .sum();
    let others = (u - 1) as f64;
    Ok(e_norms
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if i == anchor {
                1.0
            } else if total > 0.0 {
                n / total
            } else {
                1.0 / others
            }
        })
        .collect())
}

/// Samples the association vector: the anchor plus `min(R - 1, U - 1)` other
/// users drawn one at a time without replacement, each draw proportional to
/// the remaining probabilities.
pub fn sample_selection<R: Rng + ?Sized>(
    probs: &[f64],
    anchor: usize,
    num_rbs: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let u = probs.len();
    if num_rbs == 0 {
        return Err(Error::Config("at least one RB is required".into()));
    }
    if anchor >= u {
        return Err(Error::Contract(format!("anchor {anchor} out of range for {u} users")));
    }
    let mut assoc = vec![false; u];
    assoc[anchor] = true;
    let mut weights: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == anchor { 0.0 } else { p.max(0.0) })
        .collect();
    let draws = (num_rbs - 1).min(u - 1);
    for _ in 0..draws {
        let pick = weighted_pick(&weights, &assoc, rng);
        assoc[pick] = true;
        weights[pick] = 0.0;
    }
    Ok(assoc)
}

/// One weighted draw among users not yet taken; uniform over them when the
/// remaining weight is zero. Always consumes exactly one uniform variate.
fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], taken: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = weights.iter().sum();
    let free: Vec<usize> = (0..weights.len()).filter(|&i| !taken[i]).collect();
    if total <= 0.0 {
        let k = ((u * free.len() as f64) as usize).min(free.len() - 1);
        return free[k];
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = free[free.len() - 1];
    for &i in &free {
        if weights[i] <= 0.0 {
            continue;
        }
        last = i;
        acc += weights[i];
        if target < acc {
            return i;
        }
    }
    last
}

/// Uniform selection of `min(R, U)` users without replacement (no anchor).
pub fn sample_uniform<R: Rng + ?Sized>(num_users: usize, num_rbs: usize, rng: &mut R) -> Vec<bool> {
    let mut assoc = vec![false; num_users];
    let weights = vec![1.0; num_users];
    for _ in 0..num_rbs.min(num_users) {
        let mut w = weights.clone();
        for (wi, &a) in w.iter_mut().zip(&assoc) {
            if a {
                *wi = 0.0;
            }
        }
        let pick = weighted_pick(&w, &assoc, rng);
        assoc[pick] = true;
    }
    assoc
}
