//! Self-checks against independent oracles: brute-force RB assignment,
//! central finite differences, and the closed-form bound special cases.

use rand::Rng;
use serde::Serialize;

use crate::bounds::{ungated_bound_terms, gated_bound_terms, gd_bound_terms, BoundCoeffs, UserCoeffs};
use crate::error::Result;
use crate::fl_core::{Dataset, ModelVec, TaskKind, TaskModel};
use crate::harness::data;
use crate::predictor::PredictorNet;
use crate::rb_alloc::{brute_force_assignment, solve_minmax_assignment, AssignmentInstance};
use crate::rng::SimRng;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed discrepancy (0 for exact comparisons that all agree).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random instance with `|selected| <= min(6, R)` and `R <= 5`. Every
/// third instance draws delays from a handful of integers so ties occur.
pub fn random_assignment_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<AssignmentInstance> {
    let num_rbs = rng.random_range(1..=5);
    let selected = rng.random_range(1..=num_rbs.min(6));
    let coarse = rng.random_range(0..3) == 0;
    let delays = (0..selected)
        .map(|_| {
            (0..num_rbs)
                .map(|_| {
                    if coarse {
                        f64::from(rng.random_range(1..=4u8))
                    } else {
                        rng.random_range(1e-3..1.0)
                    }
                })
                .collect()
        })
        .collect();
    AssignmentInstance::new((0..selected).collect(), delays)
}

/// Exact optimal objective (and RB vector) against exhaustive search.
pub fn check_rb_solver(instances: usize, rng: &mut SimRng) -> Result<CheckReport> {
    let mut failures = 0;
    for _ in 0..instances {
        let inst = random_assignment_instance(rng)?;
        let fast = solve_minmax_assignment(&inst)?;
        let slow = brute_force_assignment(&inst)?;
        if fast.objective != slow.objective || fast.rb_of_user != slow.rb_of_user {
            failures += 1;
        }
    }
    Ok(CheckReport {
        name: "rb-solver-exactness".into(),
        cases: instances,
        failures,
        worst: 0.0,
        tolerance: 0.0,
    })
}

const FD_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_direction<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn directional_fd(f: impl Fn(&[f64]) -> Result<f64>, at: &[f64], dir: &[f64]) -> Result<f64> {
    let shifted = |s: f64| at.iter().zip(dir).map(|(a, d)| a + s * d).collect::<Vec<_>>();
    Ok((f(&shifted(FD_STEP))? - f(&shifted(-FD_STEP))?) / (2.0 * FD_STEP))
}

fn fd_report(name: &str, errors: &[f64], tolerance: f64) -> CheckReport {
    CheckReport {
        name: name.into(),
        cases: errors.len(),
        failures: errors.iter().filter(|&&e| !(e < tolerance)).count(),
        worst: errors.iter().copied().fold(0.0, f64::max),
        tolerance,
    }
}

/// Directional derivatives of the summed loss over `data` at random
/// parameter points.
pub fn check_task_gradient(
    name: &str,
    task: &TaskModel,
    data: &Dataset,
    probes: usize,
    tolerance: f64,
    rng: &mut SimRng,
) -> Result<CheckReport> {
    let mut errors = Vec::with_capacity(probes);
    for _ in 0..probes {
        let w = task.init_params(rng);
        let dir = random_direction(w.len(), rng);
        let g = task.gradient(&w, data)?;
        let analytic: f64 = g.0.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let total = |p: &[f64]| Ok(task.mean_loss(&ModelVec(p.to_vec()), data)? * data.len() as f64);
        errors.push(relative_error(analytic, directional_fd(total, &w.0, &dir)?));
    }
    Ok(fd_report(name, &errors, tolerance))
}

/// Directional derivatives of the predictor pair loss at random networks and pairs.
pub fn check_predictor_gradient(probes: usize, tolerance: f64, rng: &mut SimRng) -> Result<CheckReport> {
    let (len, hidden) = (12, 5);
    let mut errors = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut net = PredictorNet::new(len, hidden, 1e-3, 1, rng)?;
        let big: Vec<f64> = net.flat_params().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        net.set_flat_params(&big)?;
        let wa = ModelVec((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
        let wt = ModelVec((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
        let params = net.flat_params();
        let dir = random_direction(params.len(), rng);
        let grad = net.pair_gradient(&wa, &wt)?.flat();
        let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p)?;
            n.pair_loss(&wa, &wt)
        };
        errors.push(relative_error(analytic, directional_fd(loss, &params, &dir)?));
    }
    Ok(fd_report("predictor-gradient", &errors, tolerance))
}

/// Sin-fit MLP and digits logistic regression on freshly generated data,
/// plus the predictor.
pub fn check_gradients(probes: usize, tolerance: f64, rng: &mut SimRng) -> Result<Vec<CheckReport>> {
    let sin = data::generate_sin_dataset(1, 12, rng)?.remove(0);
    let mlp = TaskModel {
        kind: TaskKind::Regression,
        n_in: 1,
        n_out: 1,
        hidden: vec![10],
        bias: true,
        l2: 0.0,
        init_scale: Some(2.0),
    };
    let mut sample_rng = rng.clone();
    let digits = data::synthetic_digits(8, 0.5, &[20], 0, rng, &mut sample_rng)?.users.remove(0);
    let logistic = TaskModel::logistic(64, 10, 1e-2);
    Ok(vec![
        check_task_gradient("sin-fit-gradient", &mlp, &sin, probes, tolerance, rng)?,
        check_task_gradient("digits-gradient", &logistic, &digits, probes, tolerance, rng)?,
        check_predictor_gradient(probes, tolerance, rng)?,
    ])
}

/// Random coefficient set; every user gets the same gate flag.
pub fn random_bound_coeffs<R: Rng + ?Sized>(gated: bool, rng: &mut R) -> BoundCoeffs {
    let n = rng.random_range(2..=8);
    let strong_convexity = rng.random_range(0.01..1.0);
    BoundCoeffs {
        users: (0..n)
            .map(|_| UserCoeffs {
                grad_offset: rng.random_range(0.0..2.0),
                grad_scale: rng.random_range(1.0..3.0),
                pred_offset: rng.random_range(0.0..2.0),
                pred_scale: rng.random_range(0.0..3.0),
                sgd_offset: rng.random_range(0.0..2.0),
                sgd_scale: rng.random_range(0.0..3.0),
                prob: rng.random_range(0.0..=1.0),
                samples: rng.random_range(1..=500),
                gated,
            })
            .collect(),
        smoothness: strong_convexity * rng.random_range(1.0..50.0),
        strong_convexity,
        anchor: rng.random_range(0..n),
    }
}

/// All-closed gates reproduce the no-prediction formula, all-open gates the
/// full-prediction one.
pub fn check_gate_reductions(sets: usize, tolerance: f64, rng: &mut SimRng) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for k in 0..sets {
        let gated = k % 2 == 1;
        let c = random_bound_coeffs(gated, rng);
        let t = gd_bound_terms(&c)?;
        let r = if gated { gated_bound_terms(&c)? } else { ungated_bound_terms(&c)? };
        let d = (t.offset - r.offset).abs().max((t.contraction - r.contraction).abs());
        worst = worst.max(d);
        if !(d <= tolerance) {
            failures += 1;
        }
    }
    Ok(CheckReport {
        name: "gate-reductions".into(),
        cases: sets,
        failures,
        worst,
        tolerance,
    })
}

/// The checks run by `flwire oracle-check`.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::rng::{stream, Stream};
    let mut rng = stream(seed, Stream::Geometry);
    let mut out = vec![check_rb_solver(500, &mut rng)?];
    out.extend(check_gradients(100, 1e-5, &mut rng)?);
    out.push(check_gate_reductions(100, 1e-12, &mut rng)?);
    Ok(out)
}
