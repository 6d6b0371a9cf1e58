//! Min-max resource block assignment.
//!
//! Given the selected users and the total (uplink + downlink) delay of each
//! user on each RB, find a one-to-one user→RB assignment minimising the
//! largest delay. This is the linear bottleneck assignment problem: the
//! optimum equals one of the matrix entries, and a threshold `t` is feasible
//! iff the bipartite graph of entries `<= t` has a matching saturating every
//! user. We binary search over the sorted distinct entries and test
//! feasibility with augmenting paths.
//!
//! Among all optimal assignments the lexicographically smallest RB sequence
//! (users in ascending order) is returned, so results are reproducible
//! bit for bit. [`brute_force_assignment`] enumerates all injective maps and
//! serves as the test oracle.

use crate::error::{Error, Result};
use crate::net_model::LinkDelays;

/// One round's assignment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentInstance {
    /// Users with `a_i = 1`, ascending.
    pub selected_users: Vec<usize>,
    /// `delay_matrix[k][n]`: total delay of `selected_users[k]` on RB `n`.
    pub delay_matrix: Vec<Vec<f64>>,
}

impl AssignmentInstance {
    pub fn new(selected_users: Vec<usize>, delay_matrix: Vec<Vec<f64>>) -> Result<Self> {
        if selected_users.len() != delay_matrix.len() {
            return Err(Error::Contract(format!(
                "{} users but {} delay rows",
                selected_users.len(),
                delay_matrix.len()
            )));
        }
        let rbs = delay_matrix.first().map_or(0, Vec::len);
        for row in &delay_matrix {
            if row.len() != rbs {
                return Err(Error::Contract("ragged delay matrix".into()));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Contract(format!("delay entries must be positive and finite, got {v}")));
            }
        }
        Ok(AssignmentInstance {
            selected_users,
            delay_matrix,
        })
    }

    /// Instance for the users marked in `assoc`, using uplink + downlink delays.
    pub fn from_delays(assoc: &[bool], delays: &LinkDelays) -> Result<Self> {
        let selected: Vec<usize> = (0..assoc.len()).filter(|&i| assoc[i]).collect();
        let rows = selected
            .iter()
            .map(|&i| (0..delays.num_rbs()).map(|n| delays.total(i, n)).collect())
            .collect();
        Self::new(selected, rows)
    }

    pub fn num_rbs(&self) -> usize {
        self.delay_matrix.first().map_or(0, Vec::len)
    }

    fn check_feasible(&self, num_rbs: usize) -> Result<()> {
        if self.selected_users.len() > num_rbs {
            return Err(Error::Infeasible {
                users: self.selected_users.len(),
                rbs: num_rbs,
            });
        }
        Ok(())
    }
}

/// Result of the RB assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(user, rb)` pairs in ascending user order.
    pub rb_of_user: Vec<(usize, usize)>,
    /// Largest assigned delay, seconds (zero for an empty instance).
    pub objective: f64,
}

impl Assignment {
    /// Per-user allocation vector of length `num_users`.
    pub fn allocation(&self, num_users: usize) -> Vec<Option<usize>> {
        let mut alloc = vec![None; num_users];
        for &(u, n) in &self.rb_of_user {
            alloc[u] = Some(n);
        }
        alloc
    }

    fn from_rows(instance: &AssignmentInstance, rbs: &[usize]) -> Self {
        let objective = rbs
            .iter()
            .enumerate()
            .map(|(k, &n)| instance.delay_matrix[k][n])
            .fold(0.0, f64::max);
        Assignment {
            rb_of_user: instance.selected_users.iter().copied().zip(rbs.iter().copied()).collect(),
            objective,
        }
    }
}

/// Whether every row in `rows` can be matched to a distinct free RB using
/// only entries `<= threshold`.
fn saturating_matching_exists(
    matrix: &[Vec<f64>],
    rows: &[usize],
    free_rbs: &[bool],
    threshold: f64,
) -> bool {
    let rbs = free_rbs.len();
    let mut owner: Vec<Option<usize>> = vec![None; rbs];
    for &row in rows {
        let mut seen = vec![false; rbs];
        if !augment(matrix, row, free_rbs, threshold, &mut owner, &mut seen) {
            return false;
        }
    }
    true
}

fn augment(
    matrix: &[Vec<f64>],
    row: usize,
    free_rbs: &[bool],
    threshold: f64,
    owner: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for n in 0..free_rbs.len() {
        if !free_rbs[n] || seen[n] || matrix[row][n] > threshold {
            continue;
        }
        seen[n] = true;
        let reassigned = match owner[n] {
            None => true,
            Some(other) => augment(matrix, other, free_rbs, threshold, owner, seen),
        };
        if reassigned {
            owner[n] = Some(row);
            return true;
        }
    }
    false
}

/// Exact min-max assignment with lexicographic tie-break.
pub fn solve_minmax_assignment(instance: &AssignmentInstance) -> Result<Assignment> {
    let rbs = instance.num_rbs();
    let users = instance.selected_users.len();
    if users == 0 {
        return Ok(Assignment {
            rb_of_user: Vec::new(),
            objective: 0.0,
        });
    }
    instance.check_feasible(rbs)?;
    let matrix = &instance.delay_matrix;

    let mut values: Vec<f64> = matrix.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let all_rows: Vec<usize> = (0..users).collect();
    let all_free = vec![true; rbs];
    // the largest entry is always feasible since users <= rbs
    let (mut lo, mut hi) = (0, values.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if saturating_matching_exists(matrix, &all_rows, &all_free, values[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let threshold = values[lo];

    // fix users one by one to the smallest RB that keeps the rest matchable
    let mut free = all_free;
    let mut chosen = Vec::with_capacity(users);
    for row in 0..users {
        let rest: Vec<usize> = (row + 1..users).collect();
        let pick = (0..rbs).find(|&n| {
            if !free[n] || matrix[row][n] > threshold {
                return false;
            }
            free[n] = false;
            let ok = saturating_matching_exists(matrix, &rest, &free, threshold);
            free[n] = true;
            ok
        });
        let n = pick.expect("threshold feasibility guarantees an extension");
        free[n] = false;
        chosen.push(n);
    }
    let assignment = Assignment::from_rows(instance, &chosen);
    debug_assert_eq!(assignment.objective, threshold);
    Ok(assignment)
}

/// Largest instance [`brute_force_assignment`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive search over injective user→RB maps; same tie-break as the solver.
pub fn brute_force_assignment(instance: &AssignmentInstance) -> Result<Assignment> {
    let users = instance.selected_users.len();
    if users > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            users,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let rbs = instance.num_rbs();
    if users == 0 {
        return Ok(Assignment {
            rb_of_user: Vec::new(),
            objective: 0.0,
        });
    }
    instance.check_feasible(rbs)?;

    struct Search<'a> {
        matrix: &'a [Vec<f64>],
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        // visits maps in lexicographic order; only a strictly better objective
        // replaces the incumbent, so the first optimum found is kept
        fn visit(&mut self, row: usize, worst: f64) {
            if row == self.matrix.len() {
                if self.best.as_ref().is_none_or(|(b, _)| worst < *b) {
                    self.best = Some((worst, self.current.clone()));
                }
                return;
            }
            for n in 0..self.used.len() {
                if self.used[n] {
                    continue;
                }
                self.used[n] = true;
                self.current.push(n);
                self.visit(row + 1, worst.max(self.matrix[row][n]));
                self.current.pop();
                self.used[n] = false;
            }
        }
    }

    let mut search = Search {
        matrix: &instance.delay_matrix,
        used: vec![false; rbs],
        current: Vec::with_capacity(users),
        best: None,
    };
    search.visit(0, 0.0);
    let (_, rows) = search.best.expect("feasible instance has an assignment");
    Ok(Assignment::from_rows(instance, &rows))
}

/// Uniformly random feasible assignment (the random-allocation baseline).
pub fn random_assignment<R: rand::Rng + ?Sized>(
    instance: &AssignmentInstance,
    rng: &mut R,
) -> Result<Assignment> {
    let rbs = instance.num_rbs();
    if instance.selected_users.is_empty() {
        return Ok(Assignment {
            rb_of_user: Vec::new(),
            objective: 0.0,
        });
    }
    instance.check_feasible(rbs)?;
    let mut order: Vec<usize> = (0..rbs).collect();
    for k in (1..rbs).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    Ok(Assignment::from_rows(instance, &order[..instance.selected_users.len()]))
}
