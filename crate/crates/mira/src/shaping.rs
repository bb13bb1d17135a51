//! Dense progress labels from subgoal completions, shaped rewards, and the
//! tabular potential-based shaping testbed.
//!
//! Progress labels turn a staircase of subgoal completions into a piecewise
//! linear ramp: between consecutive key steps the label interpolates from
//! `j/K` to `(j+1)/K`, and the final subgoal's completion is re-anchored to
//! the true trajectory end so the ramp reaches exactly 1 at termination (gap
//! anchoring). Labels are built from positive traces only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ShapingError {
    #[error("non-monotone subgoal matrix at row {0}")]
    NonMonotone(usize),
    #[error("invalid key steps: {0}")]
    InvalidKeys(String),
    #[error("progress labels require a successful trajectory")]
    NotPositiveTrace,
    #[error("trajectory did not complete all subgoals ({got}/{expected})")]
    IncompleteSubgoals { got: usize, expected: usize },
}

/// A timestep at which the cumulative subgoal count increased, with the new
/// cumulative count. A single key step may advance the count by more than one
/// when several subgoals complete simultaneously.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStep {
    pub t: usize,
    pub count: usize,
}

/// Dense progress labels over state indices 0..=T, non-decreasing in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressLabels(pub Vec<f64>);

impl ProgressLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Timesteps where the cumulative completion count strictly increases.
/// Rows must be monotone componentwise.
pub fn key_steps(z: &[Vec<u8>]) -> Result<Vec<KeyStep>, ShapingError> {
    let mut keys = Vec::new();
    let mut prev_count = 0usize;
    let mut prev_row: Option<&Vec<u8>> = None;
    for (t, row) in z.iter().enumerate() {
        if let Some(prev) = prev_row {
            if prev.len() != row.len() {
                return Err(ShapingError::NonMonotone(t));
            }
            if prev.iter().zip(row).any(|(a, b)| a > b) {
                return Err(ShapingError::NonMonotone(t));
            }
        }
        let count = row.iter().filter(|&&b| b == 1).count();
        if count > prev_count {
            keys.push(KeyStep { t, count });
            prev_count = count;
        }
        prev_row = Some(row);
    }
    Ok(keys)
}

/// Piecewise-linear progress labels over 0..=t_end.
///
/// `keys` are the raw key steps of a positive trace (last count == k_total);
/// the final key is re-anchored to `t_end` so the last ramp ends at exactly 1
/// regardless of when the last predicate fired. A multi-count jump at one key
/// ramps across the whole jump over its single segment.
pub fn interpolate_progress(
    keys: &[KeyStep],
    k_total: usize,
    t_end: usize,
) -> Result<ProgressLabels, ShapingError> {
    if k_total == 0 {
        return Err(ShapingError::InvalidKeys("K must be >= 1".into()));
    }
    if t_end == 0 {
        return Err(ShapingError::InvalidKeys(
            "trajectory end must be >= 1".into(),
        ));
    }
    let last = keys
        .last()
        .ok_or_else(|| ShapingError::InvalidKeys("no key steps".into()))?;
    if last.count != k_total {
        return Err(ShapingError::InvalidKeys(format!(
            "last key count {} != K={k_total}",
            last.count
        )));
    }
    let mut prev_t = 0usize;
    let mut prev_c = 0usize;
    for (i, key) in keys.iter().enumerate() {
        if key.t < 1 {
            return Err(ShapingError::InvalidKeys("key step before t=1".into()));
        }
        if i > 0 && key.t <= prev_t {
            return Err(ShapingError::InvalidKeys(
                "key times must strictly increase".into(),
            ));
        }
        if key.count <= prev_c {
            return Err(ShapingError::InvalidKeys(
                "key counts must strictly increase".into(),
            ));
        }
        prev_t = key.t;
        prev_c = key.count;
    }
    if last.t > t_end {
        return Err(ShapingError::InvalidKeys(format!(
            "last key at t={} beyond trajectory end {t_end}",
            last.t
        )));
    }
    // Anchor points: (0, 0), the intermediate keys, and (t_end, K). The key
    // at which the count reaches K is dropped in favor of the trajectory end.
    let mut anchors: Vec<(usize, usize)> = vec![(0, 0)];
    for key in &keys[..keys.len() - 1] {
        anchors.push((key.t, key.count));
    }
    if anchors.last().unwrap().0 >= t_end {
        return Err(ShapingError::InvalidKeys(
            "penultimate key must precede the trajectory end".into(),
        ));
    }
    anchors.push((t_end, k_total));

    let k = k_total as f64;
    let mut labels = Vec::with_capacity(t_end + 1);
    let mut seg = 0usize;
    for t in 0..=t_end {
        while anchors[seg + 1].0 < t {
            seg += 1;
        }
        let (t0, c0) = anchors[seg];
        let (t1, c1) = anchors[seg + 1];
        let alpha = (t - t0) as f64 / (t1 - t0) as f64;
        labels.push((1.0 - alpha) * (c0 as f64 / k) + alpha * (c1 as f64 / k));
    }
    Ok(ProgressLabels(labels))
}

/// Progress labels for a successful trajectory. Key steps are shifted to
/// state indices (completion registers at the state after the completing
/// action) and the label timeline covers states 0..=len.
pub fn labels_for_trajectory(traj: &Trajectory) -> Result<ProgressLabels, ShapingError> {
    if !traj.is_success() {
        return Err(ShapingError::NotPositiveTrace);
    }
    let z = traj.z_matrix();
    let k_total = z.first().map(|r| r.len()).unwrap_or(0);
    let keys = key_steps(&z)?;
    let completed = keys.last().map(|k| k.count).unwrap_or(0);
    if completed != k_total {
        return Err(ShapingError::IncompleteSubgoals {
            got: completed,
            expected: k_total,
        });
    }
    let state_keys: Vec<KeyStep> = keys
        .iter()
        .map(|k| KeyStep {
            t: k.t + 1,
            count: k.count,
        })
        .collect();
    interpolate_progress(&state_keys, k_total, traj.len())
}

/// Auxiliary shaping reward r' = r + alpha * (P_next - P_t).
pub fn aux_shaped_reward(r: f64, p_t: f64, p_next: f64, alpha: f64) -> f64 {
    r + alpha * (p_next - p_t)
}

/// Classical potential-based shaping r~ = r + gamma * phi(s') - phi(s).
pub fn pbrs_shape(r: f64, phi_s: f64, phi_next: f64, gamma: f64) -> f64 {
    r + gamma * phi_next - phi_s
}

/// Finite goal-conditioned MDP with a per-(goal, state) potential. Dynamics
/// are shared across goals; rewards and potentials are goal-indexed.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_goals: usize,
    /// transition[s][a][s'] = P(s' | s, a); each row sums to 1.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// reward[g][s][a][s'].
    pub reward: Vec<Vec<Vec<Vec<f64>>>>,
    /// potential[g][s].
    pub potential: Vec<Vec<f64>>,
    pub gamma: f64,
}

/// Q table indexed [goal][state][action].
pub type QTable = Vec<Vec<Vec<f64>>>;

impl TabularMdp {
    pub fn zero_q(&self) -> QTable {
        vec![vec![vec![0.0; self.n_actions]; self.n_states]; self.n_goals]
    }

    /// Q initialized to the potential: Q_0(s, a, g) = phi(s, g).
    pub fn potential_q(&self) -> QTable {
        (0..self.n_goals)
            .map(|g| {
                (0..self.n_states)
                    .map(|s| vec![self.potential[g][s]; self.n_actions])
                    .collect()
            })
            .collect()
    }

    /// The same MDP with shaped rewards r + gamma * phi(s') - phi(s).
    pub fn shaped(&self) -> TabularMdp {
        let mut out = self.clone();
        for g in 0..self.n_goals {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    for s2 in 0..self.n_states {
                        out.reward[g][s][a][s2] = pbrs_shape(
                            self.reward[g][s][a][s2],
                            self.potential[g][s],
                            self.potential[g][s2],
                            self.gamma,
                        );
                    }
                }
            }
        }
        out
    }
}

/// Synchronous Bellman optimality backups from the given initialization.
/// Returns all iterates Q_0..Q_iterations.
pub fn value_iteration(mdp: &TabularMdp, init: QTable, iterations: usize) -> Vec<QTable> {
    let mut iterates = Vec::with_capacity(iterations + 1);
    iterates.push(init);
    for _ in 0..iterations {
        let prev = iterates.last().unwrap();
        let mut next = mdp.zero_q();
        for g in 0..mdp.n_goals {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let mut q = 0.0;
                    for s2 in 0..mdp.n_states {
                        let p = mdp.transition[s][a][s2];
                        if p == 0.0 {
                            continue;
                        }
                        let max_next = prev[g][s2]
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        q += p * (mdp.reward[g][s][a][s2] + mdp.gamma * max_next);
                    }
                    next[g][s][a] = q;
                }
            }
        }
        iterates.push(next);
    }
    iterates
}

/// Greedy argmax per (goal, state), lowest index on ties.
pub fn greedy_policy(q: &QTable) -> Vec<Vec<usize>> {
    q.iter()
        .map(|per_state| {
            per_state
                .iter()
                .map(|actions| {
                    actions
                        .iter()
                        .enumerate()
                        .max_by(|(ia, a), (ib, b)| {
                            a.partial_cmp(b)
                                .unwrap()
                                .then(ib.cmp(ia))
                        })
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect()
        })
        .collect()
}
