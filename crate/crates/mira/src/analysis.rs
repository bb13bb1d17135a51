//! Automated failure analysis: prioritized rule-based categorization,
//! state-digest loop detection, first-divergence localization against
//! reference success traces, and objective text summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, PageId};
use crate::trajectory::{Terminal, Trajectory};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("classify_failure called on a successful trajectory {0}")]
    NotAFailure(String),
    #[error("reference trace {0} is not a success")]
    BadReference(String),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum FailureCategory {
    /// Rule A: the agent exited but the final check judged it incorrect.
    WrongTermination,
    /// Rule B: repeated identical trailing actions or a detected state cycle.
    StuckMidway,
    /// Rule C: reached the goal page but never exited, or failed immediately.
    FailAttempt,
    /// Rule D: everything else.
    Others,
}

impl FailureCategory {
    pub fn label(&self) -> &'static str {
        match self {
            FailureCategory::WrongTermination => "wrong_termination",
            FailureCategory::StuckMidway => "stuck_midway",
            FailureCategory::FailAttempt => "fail_attempt",
            FailureCategory::Others => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub task_id: String,
    pub category: FailureCategory,
    /// Loop entry for stuck traces, otherwise first divergence from the
    /// references when available.
    pub decision_step: Option<usize>,
    pub evidence: String,
}

/// Rule thresholds. `last_n` trailing identical actions trigger Rule B, as
/// does a state cycle of period at most `max_period` repeating at least
/// `min_repeats` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerParams {
    pub last_n: usize,
    pub min_repeats: usize,
    pub max_period: usize,
}

impl Default for AnalyzerParams {
    fn default() -> Self {
        AnalyzerParams {
            last_n: 3,
            min_repeats: 3,
            max_period: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopInfo {
    /// Index of the step entering the cycle.
    pub entry: usize,
    pub period: usize,
}

/// Earliest index from which a digest cycle of period <= `max_period`
/// repeats at least `min_repeats` consecutive times. Ties prefer the
/// shortest period.
pub fn detect_loop(digests: &[u64], min_repeats: usize, max_period: usize) -> Option<LoopInfo> {
    if min_repeats < 2 {
        return None;
    }
    for entry in 0..digests.len() {
        for period in 1..=max_period {
            let span = min_repeats * period;
            if entry + span > digests.len() {
                continue;
            }
            let body = &digests[entry..entry + span];
            if body.iter().zip(&body[period..]).all(|(a, b)| a == b) {
                return Some(LoopInfo { entry, period });
            }
        }
    }
    None
}

fn trailing_identical(actions: &[Action], n: usize) -> bool {
    if n < 2 || actions.len() < n {
        return false;
    }
    let last = &actions[actions.len() - 1];
    actions[actions.len() - n..].iter().all(|a| a == last)
}

fn is_noop_first_click(traj: &Trajectory) -> bool {
    // A self-loop click at t=0: the page observed before step 1 equals the
    // page before step 0 even though step 0 was a click.
    match traj.steps.first() {
        Some(first) if matches!(first.action, Action::Click { .. }) => traj
            .steps
            .get(1)
            .map(|second| second.page == first.page)
            .unwrap_or(false),
        _ => false,
    }
}

/// Apply the prioritized hardcoded rules (A > B > C > D) to a failed
/// trajectory. `goal_page` enables the reached-goal-but-never-exited check.
pub fn classify_failure(
    traj: &Trajectory,
    goal_page: Option<PageId>,
    params: &AnalyzerParams,
) -> Result<FailureRecord, AnalysisError> {
    if traj.is_success() {
        return Err(AnalysisError::NotAFailure(traj.task_id.clone()));
    }
    let actions = traj.actions();
    let exited = matches!(traj.terminal, Terminal::Exit { .. });

    // Rule A: wrong termination.
    if exited {
        return Ok(FailureRecord {
            task_id: traj.task_id.clone(),
            category: FailureCategory::WrongTermination,
            decision_step: None,
            evidence: "agent called exit() but the final message was judged incorrect".into(),
        });
    }

    // Rule B: stuck midway.
    let loop_info = detect_loop(&traj.digests(), params.min_repeats, params.max_period);
    if trailing_identical(&actions, params.last_n) {
        return Ok(FailureRecord {
            task_id: traj.task_id.clone(),
            category: FailureCategory::StuckMidway,
            decision_step: loop_info.map(|l| l.entry),
            evidence: format!("identical last {} actions", params.last_n),
        });
    }
    if let Some(info) = loop_info {
        return Ok(FailureRecord {
            task_id: traj.task_id.clone(),
            category: FailureCategory::StuckMidway,
            decision_step: Some(info.entry),
            evidence: format!(
                "state cycle of period {} entered at step {} repeats {} times",
                info.period, info.entry, params.min_repeats
            ),
        });
    }

    // Rule C: failed attempt.
    let reached_goal = goal_page
        .map(|g| traj.steps.iter().any(|s| s.page == g))
        .unwrap_or(false);
    if reached_goal && !exited {
        return Ok(FailureRecord {
            task_id: traj.task_id.clone(),
            category: FailureCategory::FailAttempt,
            decision_step: None,
            evidence: "reached the goal page but didn't attempt to exit()".into(),
        });
    }
    let immediate_exit = traj.len() <= 2 && exited;
    if immediate_exit || is_noop_first_click(traj) {
        return Ok(FailureRecord {
            task_id: traj.task_id.clone(),
            category: FailureCategory::FailAttempt,
            decision_step: Some(0),
            evidence: "failed within the first 2 steps".into(),
        });
    }

    // Rule D: everything else.
    Ok(FailureRecord {
        task_id: traj.task_id.clone(),
        category: FailureCategory::Others,
        decision_step: None,
        evidence: "no specific rule matched".into(),
    })
}

/// Successful reference traces for one task.
#[derive(Debug, Clone, Default)]
pub struct ReferenceTraceSet {
    refs: Vec<Trajectory>,
}

impl ReferenceTraceSet {
    pub fn new(refs: Vec<Trajectory>) -> Result<Self, AnalysisError> {
        if let Some(bad) = refs.iter().find(|r| !r.is_success()) {
            return Err(AnalysisError::BadReference(bad.task_id.clone()));
        }
        Ok(ReferenceTraceSet { refs })
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn traces(&self) -> &[Trajectory] {
        &self.refs
    }
}

fn common_prefix_len(traj: &Trajectory, reference: &Trajectory) -> usize {
    traj.steps
        .iter()
        .zip(&reference.steps)
        .take_while(|(a, b)| a.action == b.action && a.digest == b.digest)
        .count()
}

/// First step at which the trajectory has departed from every reference:
/// the longest common (action, digest) prefix across the reference set.
/// For stuck traces the loop entry overrides when it is earlier. Returns
/// `None` when no references are available.
pub fn divergence_step(
    traj: &Trajectory,
    refs: &ReferenceTraceSet,
    loop_entry: Option<usize>,
) -> Option<usize> {
    if refs.is_empty() {
        return loop_entry;
    }
    let prefix = refs
        .traces()
        .iter()
        .map(|r| common_prefix_len(traj, r))
        .max()
        .unwrap_or(0);
    match loop_entry {
        Some(entry) if entry < prefix => Some(entry),
        _ => Some(prefix),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub count: usize,
    pub ratio: f64,
}

/// Counts and ratios per category, with ratios over all traces (successes
/// included in the denominator). Categories with zero count are omitted.
pub fn failure_distribution(
    records: &[FailureRecord],
    total_traces: usize,
) -> BTreeMap<FailureCategory, CategoryShare> {
    let mut out: BTreeMap<FailureCategory, CategoryShare> = BTreeMap::new();
    for record in records {
        out.entry(record.category)
            .or_insert(CategoryShare {
                count: 0,
                ratio: 0.0,
            })
            .count += 1;
    }
    if total_traces > 0 {
        for share in out.values_mut() {
            share.ratio = share.count as f64 / total_traces as f64;
        }
    }
    out
}

/// Template-based factual summary: milestones achieved, terminal kind, and
/// the benchmark check outcome. States only what the trace shows.
pub fn summarize(traj: &Trajectory, record: Option<&FailureRecord>) -> String {
    let mut lines = Vec::new();
    if traj.is_empty() {
        lines.push(format!("Task {}: no actions taken.", traj.task_id));
    } else {
        let z = traj.final_z();
        let achieved = z.iter().filter(|&&b| b != 0).count();
        lines.push(format!(
            "Task {}: {} actions; milestones achieved: {} of {}.",
            traj.task_id,
            traj.len(),
            achieved,
            z.len()
        ));
    }
    match &traj.terminal {
        Terminal::Exit { message } => {
            lines.push(format!("Terminal: exit(\"{message}\")."));
        }
        Terminal::HorizonExhausted => {
            lines.push("Terminal: horizon exhausted without exit().".into());
        }
    }
    if let Some(record) = record {
        match record.decision_step {
            Some(step) => lines.push(format!(
                "Category: {} (decision step {}): {}.",
                record.category.label(),
                step,
                record.evidence
            )),
            None => lines.push(format!(
                "Category: {}: {}.",
                record.category.label(),
                record.evidence
            )),
        }
    }
    let verdict = if traj.is_success() { "PASSED" } else { "FAILED" };
    lines.push(format!("Final benchmark check: {verdict}"));
    lines.join("\n")
}
