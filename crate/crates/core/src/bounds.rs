//! Per-iteration convergence-bound terms.
//!
//! For a strongly convex loss with smoothness `L` and strong convexity
//! `ϑ`, every round contributes an offset and a contraction factor so that
//! the optimality gap obeys `gap_{μ+1} <= offset_μ + contraction_μ * gap_μ`.
//! The terms depend on per-user relations between local and global gradient
//! norms (`|∇F_i|^2 = a + b |∇F|^2`), between prediction deviations and the
//! global gradient (`|∇F̂_i| = a + b |∇F|`), and, for single-sample SGD,
//! between the mean squared sample gradient and the global gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl_core::{Dataset, TaskKind, TaskModel};

/// Coefficients of one user at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserCoeffs {
    /// Offset of the local-gradient relation.
    pub grad_offset: f64,
    /// Scale of the local-gradient relation.
    pub grad_scale: f64,
    /// Offset of the prediction-deviation relation.
    pub pred_offset: f64,
    /// Scale of the prediction-deviation relation.
    pub pred_scale: f64,
    /// Offset of the sample-gradient relation (SGD only).
    pub sgd_offset: f64,
    /// Scale of the sample-gradient relation (SGD only).
    pub sgd_scale: f64,
    /// Connection probability.
    pub prob: f64,
    /// Number of training samples `K_i`.
    pub samples: usize,
    /// Whether the user's predicted model was admitted.
    pub gated: bool,
}

/// Everything needed to evaluate one iteration's bound terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCoeffs {
    pub users: Vec<UserCoeffs>,
    /// Smoothness (gradient Lipschitz) constant `L`.
    pub smoothness: f64,
    /// Strong-convexity constant.
    pub strong_convexity: f64,
    pub anchor: usize,
}

/// Offset and contraction factor of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub offset: f64,
    pub contraction: f64,
}

impl BoundTerms {
    /// The gap shrinks geometrically only when the contraction factor is below one.
    pub fn contracts(&self) -> bool {
        self.contraction < 1.0
    }
}

impl BoundCoeffs {
    pub fn validate(&self) -> Result<()> {
        let (l, c) = (self.smoothness, self.strong_convexity);
        if !(c.is_finite() && c > 0.0 && l.is_finite() && l >= c) {
            return Err(Error::Domain(format!(
                "need smoothness >= strong convexity > 0, got {l} and {c}"
            )));
        }
        if self.anchor >= self.users.len() {
            return Err(Error::Contract(format!("anchor {} out of range", self.anchor)));
        }
        if self.total_samples() == 0 {
            return Err(Error::Contract("no training samples".into()));
        }
        for (i, u) in self.users.iter().enumerate() {
            if !(0.0..=1.0).contains(&u.prob) {
                return Err(Error::Domain(format!("user {i}: probability {} outside [0, 1]", u.prob)));
            }
            if !(u.grad_offset >= 0.0 && u.grad_scale >= 1.0) {
                return Err(Error::Domain(format!(
                    "user {i}: gradient relation needs offset >= 0 and scale >= 1, got {} and {}",
                    u.grad_offset, u.grad_scale
                )));
            }
        }
        Ok(())
    }

    fn total_samples(&self) -> usize {
        self.users.iter().map(|u| u.samples).sum()
    }

    fn ratios(&self) -> (f64, f64, f64) {
        let l = self.smoothness;
        let k = self.total_samples() as f64;
        (1.0 / (2.0 * l * k), self.strong_convexity / l, self.strong_convexity / (l * k))
    }
}

/// Full-gradient terms with per-user gating.
pub fn gd_bound_terms(c: &BoundCoeffs) -> Result<BoundTerms> {
    c.validate()?;
    let (a, base, b) = c.ratios();
    let (mut s1, mut s2) = (0.0, 0.0);
    for u in &c.users {
        let w = u.samples as f64 * (1.0 - u.prob);
        let gate = f64::from(u8::from(u.gated));
        s1 += w * (u.grad_offset - (u.grad_offset + u.pred_offset) * gate);
        s2 += w * (u.grad_scale - (u.grad_scale + u.pred_scale) * gate);
    }
    Ok(BoundTerms {
        offset: a * s1,
        contraction: 1.0 - base + b * s2,
    })
}

/// Full-gradient terms when no prediction is ever admitted.
pub fn ungated_bound_terms(c: &BoundCoeffs) -> Result<BoundTerms> {
    c.validate()?;
    let (a, base, b) = c.ratios();
    let s1: f64 = c.users.iter().map(|u| u.samples as f64 * (1.0 - u.prob) * u.grad_offset).sum();
    let s2: f64 = c.users.iter().map(|u| u.samples as f64 * (1.0 - u.prob) * u.grad_scale).sum();
    Ok(BoundTerms {
        offset: a * s1,
        contraction: 1.0 - base + b * s2,
    })
}

/// Full-gradient terms when every unselected user's prediction is admitted.
pub fn gated_bound_terms(c: &BoundCoeffs) -> Result<BoundTerms> {
    c.validate()?;
    let (a, base, b) = c.ratios();
    let s1: f64 = c.users.iter().map(|u| u.samples as f64 * (1.0 - u.prob) * -u.pred_offset).sum();
    let s2: f64 = c.users.iter().map(|u| u.samples as f64 * (1.0 - u.prob) * -u.pred_scale).sum();
    Ok(BoundTerms {
        offset: a * s1,
        contraction: 1.0 - base + b * s2,
    })
}

/// Single-sample SGD terms with per-user gating. The anchor's sample count
/// enters the contraction factor on its own, unnormalized.
pub fn sgd_bound_terms(c: &BoundCoeffs) -> Result<BoundTerms> {
    c.validate()?;
    let (a, base, b) = c.ratios();
    let (mut s1, mut s2) = (0.0, 0.0);
    for (i, u) in c.users.iter().enumerate() {
        let k = u.samples as f64;
        let gate = f64::from(u8::from(u.gated));
        s1 += k * u.grad_offset;
        s2 += k * u.grad_scale;
        if i != c.anchor {
            s1 -= u.prob * u.sgd_offset;
            s2 -= u.prob * u.sgd_scale;
        }
        s1 -= k * (1.0 - u.prob) * (u.grad_offset + u.pred_offset) * gate;
        s2 -= k * (1.0 - u.prob) * (u.grad_scale + u.pred_scale) * gate;
    }
    s2 -= c.users[c.anchor].samples as f64;
    Ok(BoundTerms {
        offset: a * s1,
        contraction: 1.0 - base + b * s2,
    })
}

/// Iterates `gap_{μ+1} = offset_μ + contraction_μ * gap_μ`; the result
/// starts with `initial_gap` and has one more entry than `terms`.
pub fn bound_recursion(initial_gap: f64, terms: &[BoundTerms]) -> Result<Vec<f64>> {
    if !(initial_gap.is_finite() && initial_gap >= 0.0) {
        return Err(Error::Domain(format!("initial gap must be non-negative, got {initial_gap}")));
    }
    let mut gaps = Vec::with_capacity(terms.len() + 1);
    gaps.push(initial_gap);
    let mut gap = initial_gap;
    for t in terms {
        gap = t.offset + t.contraction * gap;
        gaps.push(gap);
    }
    Ok(gaps)
}

/// Limit of the recursion under constant terms, when it contracts.
pub fn fixed_point(terms: BoundTerms) -> Option<f64> {
    (terms.contraction.abs() < 1.0).then(|| terms.offset / (1.0 - terms.contraction))
}

/// Gradient statistics logged in one round, evaluated at the global model
/// the round started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub round: usize,
    /// `|∇F(g)|^2` of the sample-weighted global loss.
    pub global_grad_sq: f64,
    /// `|∇F_i(g)|^2` per user.
    pub user_grad_sq: Vec<f64>,
    /// `|∇F̂_i(g)|`: deviation of a predicted model from the true local
    /// model, expressed as a gradient (`(w_i - ŵ_i) / λ`); zero when no
    /// prediction was made.
    pub pred_deviation: Vec<f64>,
    /// `Σ_k q_ik |∇f_ik(g)|^2` per user.
    pub sample_grad_sq: Vec<f64>,
    pub probs: Vec<f64>,
    pub gated: Vec<bool>,
    pub samples: Vec<usize>,
    pub anchor: usize,
}

/// Canonical coefficients for one record: all offsets zero and each scale
/// chosen so that the relation holds with equality. The local-gradient
/// scale is clamped to at least one. Returns `None` when the global
/// gradient vanishes.
pub fn estimate_coeffs(record: &GradientRecord, smoothness: f64, strong_convexity: f64) -> Result<Option<BoundCoeffs>> {
    let u = record.user_grad_sq.len();
    if [
        record.pred_deviation.len(),
        record.sample_grad_sq.len(),
        record.probs.len(),
        record.gated.len(),
        record.samples.len(),
    ]
    .iter()
    .any(|&n| n != u)
    {
        return Err(Error::Contract(format!("round {}: per-user vectors differ in length", record.round)));
    }
    let g2 = record.global_grad_sq;
    if !(g2 > 0.0) || !g2.is_finite() {
        return Ok(None);
    }
    let g = g2.sqrt();
    let users = (0..u)
        .map(|i| UserCoeffs {
            grad_offset: 0.0,
            grad_scale: (record.user_grad_sq[i] / g2).max(1.0),
            pred_offset: 0.0,
            pred_scale: record.pred_deviation[i] / g,
            sgd_offset: 0.0,
            sgd_scale: record.sample_grad_sq[i] / g2,
            prob: record.probs[i],
            samples: record.samples[i],
            gated: record.gated[i],
        })
        .collect();
    let coeffs = BoundCoeffs {
        users,
        smoothness,
        strong_convexity,
        anchor: record.anchor,
    };
    coeffs.validate()?;
    Ok(Some(coeffs))
}

/// Smoothness and strong-convexity constants of the mean loss of a linear
/// task on `data`.
///
/// Squared error uses the exact Hessian spectrum. Cross-entropy uses the
/// curvature bound of the head for smoothness and the L2 penalty for strong
/// convexity.
pub fn curvature_constants(task: &TaskModel, data: &Dataset) -> Result<(f64, f64)> {
    let scale = task
        .curvature_scale()
        .ok_or_else(|| Error::Contract("curvature constants need a linear task".into()))?;
    let d = task.n_in + usize::from(task.bias);
    let m = task.input_second_moment(data);
    let top = power_iteration(&m, d)?;
    let (smooth, convex) = match task.kind {
        TaskKind::Regression => {
            let bottom = smallest_eigenvalue(&m, d, top)?;
            (scale * top + task.l2, scale * bottom + task.l2)
        }
        TaskKind::Classification => (scale * top + task.l2, task.l2),
    };
    if !(convex > 0.0) {
        return Err(Error::Domain(format!("loss is not strongly convex (constant {convex})")));
    }
    Ok((smooth, convex))
}

const POWER_MAX_ITERS: usize = 100_000;
const POWER_TOL: f64 = 1e-13;

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
pub fn power_iteration(a: &[f64], n: usize) -> Result<f64> {
    if a.len() != n * n || n == 0 {
        return Err(Error::Contract(format!("matrix of {} entries is not {n}×{n}", a.len())));
    }
    // fixed, non-symmetric start so no eigenvector is orthogonal to it by accident
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    normalize(&mut v);
    let mut value = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = mat_vec(a, &v);
        let next: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        if normalize(&mut w) == 0.0 {
            return Ok(0.0);
        }
        let done = (next - value).abs() <= POWER_TOL * next.abs().max(1e-300);
        v = w;
        value = next;
        if done {
            break;
        }
    }
    Ok(value)
}

/// Smallest eigenvalue of a symmetric PSD matrix with largest eigenvalue `top`,
/// by power iteration on `top·I - A`.
fn smallest_eigenvalue(a: &[f64], n: usize, top: f64) -> Result<f64> {
    let mut shifted: Vec<f64> = a.iter().map(|v| -v).collect();
    for i in 0..n {
        shifted[i * n + i] += top;
    }
    Ok((top - power_iteration(&shifted, n)?).max(0.0))
}

fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    a.chunks_exact(v.len()).map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// One row of a bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub round: usize,
    pub gap: f64,
    pub next_gap: f64,
    /// `None` when the coefficients were undefined for this round.
    pub terms: Option<BoundTerms>,
    pub bound: Option<f64>,
    pub violated: bool,
}

/// Measured gaps checked against the per-round bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub tolerance: f64,
    pub rows: Vec<BoundRow>,
    pub violations: usize,
    pub skipped: usize,
}

/// Checks `gaps[μ+1] <= offset_μ + contraction_μ * gaps[μ] + tolerance` for
/// every round whose terms are defined. `gaps` has one more entry than `terms`.
pub fn check_gap_trace(gaps: &[f64], terms: &[Option<BoundTerms>], tolerance: f64) -> Result<BoundReport> {
    if gaps.len() != terms.len() + 1 {
        return Err(Error::Contract(format!("{} gaps for {} rounds of terms", gaps.len(), terms.len())));
    }
    let mut rows = Vec::with_capacity(terms.len());
    let (mut violations, mut skipped) = (0, 0);
    for (mu, t) in terms.iter().enumerate() {
        let bound = t.map(|t| t.offset + t.contraction * gaps[mu]);
        let violated = bound.is_some_and(|b| gaps[mu + 1] > b + tolerance);
        violations += usize::from(violated);
        skipped += usize::from(t.is_none());
        rows.push(BoundRow {
            round: mu + 1,
            gap: gaps[mu],
            next_gap: gaps[mu + 1],
            terms: *t,
            bound,
            violated,
        });
    }
    Ok(BoundReport {
        tolerance,
        rows,
        violations,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn user(prob: f64, samples: usize, gated: bool) -> UserCoeffs {
        UserCoeffs {
            grad_offset: 0.2,
            grad_scale: 1.5,
            pred_offset: 0.1,
            pred_scale: 0.3,
            sgd_offset: 0.05,
            sgd_scale: 2.0,
            prob,
            samples,
            gated,
        }
    }

    fn coeffs(users: Vec<UserCoeffs>) -> BoundCoeffs {
        BoundCoeffs {
            users,
            smoothness: 2.0,
            strong_convexity: 0.5,
            anchor: 0,
        }
    }

    #[test]
    fn full_participation_leaves_only_the_base_rate() {
        let c = coeffs(vec![user(1.0, 10, false), user(1.0, 30, true)]);
        let t = gd_bound_terms(&c).unwrap();
        assert_eq!(t.offset, 0.0);
        assert_eq!(t.contraction, 1.0 - 0.5 / 2.0);
        assert!(t.contracts());
    }

    #[test]
    fn two_user_instance() {
        // L = 2, ϑ = 0.5, K = 40; user 1 ungated with p = 0.25
        let c = coeffs(vec![user(1.0, 10, false), user(0.25, 30, false)]);
        let t = gd_bound_terms(&c).unwrap();
        assert!((t.offset - 0.2 * 22.5 / 160.0).abs() < 1e-15);
        assert!((t.contraction - (0.75 + 0.5 / 80.0 * 1.5 * 22.5)).abs() < 1e-15);

        let mut g = c.clone();
        g.users[1].gated = true;
        let t = gd_bound_terms(&g).unwrap();
        assert!((t.offset - -0.1 * 22.5 / 160.0).abs() < 1e-15);
        assert!((t.contraction - (0.75 - 0.5 / 80.0 * 0.3 * 22.5)).abs() < 1e-15);

        // anchor term and SGD terms, evaluated by hand
        let t2 = sgd_bound_terms(&g).unwrap();
        let s1 = 10.0 * 0.2 + 30.0 * 0.2 - 0.25 * 0.05 - 22.5 * 0.3;
        let s2 = 10.0 * 1.5 + 30.0 * 1.5 - 0.25 * 2.0 - 10.0 - 22.5 * 1.8;
        assert!((t2.offset - s1 / 160.0).abs() < 1e-15);
        assert!((t2.contraction - (0.75 + 0.5 / 80.0 * s2)).abs() < 1e-14);
    }

    #[test]
    fn sgd_terms_reduce_to_full_gradient_terms() {
        let mut rng = stream(8, Stream::ModelInit);
        for _ in 0..100 {
            let mut c = coeffs(
                (0..5)
                    .map(|i| UserCoeffs {
                        grad_offset: rng.random_range(0.0..1.0),
                        grad_scale: rng.random_range(1.0..4.0),
                        pred_offset: rng.random_range(0.0..1.0),
                        pred_scale: rng.random_range(0.0..1.0),
                        sgd_offset: 0.0,
                        sgd_scale: 0.0,
                        prob: if i == 0 { 1.0 } else { 0.0 },
                        samples: if i == 0 { 0 } else { rng.random_range(1..100) },
                        gated: rng.random_bool(0.5),
                    })
                    .collect(),
            );
            c.anchor = 0;
            let a = gd_bound_terms(&c).unwrap();
            let b = sgd_bound_terms(&c).unwrap();
            assert!((a.offset - b.offset).abs() < 1e-12);
            assert!((a.contraction - b.contraction).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_coefficients_rejected() {
        let mut c = coeffs(vec![user(1.0, 10, false)]);
        c.strong_convexity = 3.0;
        assert!(matches!(gd_bound_terms(&c), Err(Error::Domain(_))));
        let mut c = coeffs(vec![user(1.0, 10, false)]);
        c.users[0].grad_scale = 0.5;
        assert!(matches!(gd_bound_terms(&c), Err(Error::Domain(_))));
    }

    #[test]
    fn recursion_examples() {
        let half = BoundTerms {
            offset: 0.0,
            contraction: 0.5,
        };
        assert_eq!(bound_recursion(1.0, &[half; 3]).unwrap(), vec![1.0, 0.5, 0.25, 0.125]);
        let flat = BoundTerms {
            offset: 0.25,
            contraction: 1.0,
        };
        assert_eq!(bound_recursion(1.0, &[flat; 4]).unwrap(), vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        assert!(fixed_point(flat).is_none());

        let t = BoundTerms {
            offset: 0.3,
            contraction: 0.9,
        };
        let long = bound_recursion(5.0, &vec![t; 2000]).unwrap();
        assert!((long.last().unwrap() - fixed_point(t).unwrap()).abs() < 1e-9);
        assert!(bound_recursion(-1.0, &[t]).is_err());
    }

    #[test]
    fn estimate_examples() {
        let rec = GradientRecord {
            round: 1,
            global_grad_sq: 4.0,
            user_grad_sq: vec![4.0, 4.0, 1.0],
            pred_deviation: vec![0.0, 0.0, 1.0],
            sample_grad_sq: vec![8.0, 8.0, 8.0],
            probs: vec![1.0, 0.5, 0.5],
            gated: vec![false, false, true],
            samples: vec![5, 5, 5],
            anchor: 0,
        };
        let c = estimate_coeffs(&rec, 1.0, 0.1).unwrap().unwrap();
        assert_eq!(c.users[0].grad_scale, 1.0);
        assert_eq!(c.users[2].grad_scale, 1.0);
        assert_eq!(c.users[0].pred_scale, 0.0);
        assert_eq!(c.users[2].pred_scale, 0.5);
        assert_eq!(c.users[1].sgd_scale, 2.0);
        assert!(c.users.iter().all(|u| u.grad_offset == 0.0 && u.pred_offset == 0.0));

        let zero = GradientRecord {
            global_grad_sq: 0.0,
            ..rec
        };
        assert!(estimate_coeffs(&zero, 1.0, 0.1).unwrap().is_none());
    }

    #[test]
    fn power_iteration_matches_eigendecomposition() {
        let mut rng = stream(10, Stream::ModelInit);
        for n in [1, 3, 6] {
            let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bm = DMatrix::from_row_slice(n, n, &b);
            let a = &bm * bm.transpose() + DMatrix::identity(n, n) * 0.1;
            let eig = a.clone().symmetric_eigen().eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            let flat: Vec<f64> = a.transpose().as_slice().to_vec();
            let top = power_iteration(&flat, n).unwrap();
            assert!((top - hi).abs() <= 1e-8 * hi, "{top} vs {hi}");
            let bottom = smallest_eigenvalue(&flat, n, top).unwrap();
            assert!((bottom - lo).abs() <= 1e-7 * hi, "{bottom} vs {lo}");
        }
    }

    #[test]
    fn quadratic_constants_match_hessian_spectrum() {
        let mut rng = stream(11, Stream::TrainData);
        let task = TaskModel::linear_regression(3, 1, true);
        let xs: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys = xs.iter().map(|x| vec![x[0]]).collect();
        let data = Dataset::new(xs, ys).unwrap();
        let h = task.hessian(&crate::fl_core::ModelVec::zeros(4), &data).unwrap();
        let eig = DMatrix::from_row_slice(4, 4, &h).symmetric_eigen().eigenvalues / 30.0;
        let (l, c) = curvature_constants(&task, &data).unwrap();
        assert!((l - eig.max()).abs() < 1e-8 * l);
        assert!((c - eig.min()).abs() < 1e-7 * l);
    }

    #[test]
    fn logistic_constants_bound_the_hessian() {
        let mut rng = stream(12, Stream::TrainData);
        let task = TaskModel::logistic(4, 3, 0.05);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let ys = (0..40)
            .map(|k| {
                let mut y = vec![0.0; 3];
                y[k % 3] = 1.0;
                y
            })
            .collect();
        let data = Dataset::new(xs, ys).unwrap();
        let (l, c) = curvature_constants(&task, &data).unwrap();
        assert_eq!(c, 0.05);
        let n = task.num_params();
        for _ in 0..5 {
            let w = crate::fl_core::ModelVec((0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
            let h = task.hessian(&w, &data).unwrap();
            let eig = DMatrix::from_row_slice(n, n, &h).symmetric_eigen().eigenvalues / 40.0;
            assert!(eig.max() <= l + 1e-12);
            assert!(eig.min() >= c - 1e-12);
        }
        assert!(curvature_constants(&TaskModel::logistic(4, 3, 0.0), &data).is_err());
    }

    #[test]
    fn gap_trace_check() {
        let t = Some(BoundTerms {
            offset: 0.0,
            contraction: 0.5,
        });
        let r = check_gap_trace(&[1.0, 0.5, 0.3, 0.1], &[t, t, None], 1e-9).unwrap();
        assert_eq!(r.violations, 1);
        assert_eq!(r.skipped, 1);
        assert!(r.rows[1].violated && !r.rows[0].violated);
    }
}
