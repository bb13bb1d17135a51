//! Canonical trajectory model shared by training, analysis, and metrics.
//!
//! Trajectories are persisted as JSONL, one trajectory per line, with a fixed
//! schema: `schema_version`, `task_id`, `phase`, `steps[{t, page, action,
//! reward, z, digest}]`, `terminal`, `success`. Round-trips are lossless.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Episode, Instance, Observation, PageId};

pub const SCHEMA_VERSION: u32 = 1;

/// Action-history window hashed into the state digest. A bounded window keeps
/// loop detection robust to irrelevant deep history.
pub const DEFAULT_DIGEST_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Terminal {
    Exit { message: String },
    HorizonExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: u32,
    /// Page observed before the action was taken.
    pub page: PageId,
    pub action: Action,
    pub reward: u8,
    /// Subgoal completion vector after this step's action.
    pub z: Vec<u8>,
    /// Digest of the post-action state.
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub task_id: String,
    pub phase: u32,
    pub steps: Vec<Step>,
    pub terminal: Terminal,
    pub success: u8,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("log I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_success(&self) -> bool {
        self.success == 1
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }

    pub fn digests(&self) -> Vec<u64> {
        self.steps.iter().map(|s| s.digest).collect()
    }

    /// Per-step subgoal rows (post-action), one per step.
    pub fn z_matrix(&self) -> Vec<Vec<u8>> {
        self.steps.iter().map(|s| s.z.clone()).collect()
    }

    /// Completion vector at termination (all zeros for an empty trajectory).
    pub fn final_z(&self) -> Vec<u8> {
        self.steps.last().map(|s| s.z.clone()).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.t as usize != i {
                return Err(TrajectoryError::Invalid(format!(
                    "non-contiguous step index {} at position {i}",
                    step.t
                )));
            }
        }
        if let Some(k) = self.steps.first().map(|s| s.z.len()) {
            if self.steps.iter().any(|s| s.z.len() != k) {
                return Err(TrajectoryError::Invalid(
                    "inconsistent z vector lengths".into(),
                ));
            }
        }
        if self.success == 1 {
            if !matches!(self.terminal, Terminal::Exit { .. }) {
                return Err(TrajectoryError::Invalid(
                    "successful trajectory must terminate via Exit".into(),
                ));
            }
            if self.steps.last().map(|s| s.reward) != Some(1) {
                return Err(TrajectoryError::Invalid(
                    "successful trajectory must end with reward 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// 64-bit FNV-1a over a canonical JSON encoding of (bounded action window,
/// observation). Documented and platform-stable.
pub fn state_digest(history: &[Action], observation: &Observation, window: usize) -> u64 {
    #[derive(Serialize)]
    struct DigestInput<'a> {
        window: &'a [Action],
        observation: &'a Observation,
    }
    let start = history.len().saturating_sub(window);
    let input = DigestInput {
        window: &history[start..],
        observation,
    };
    let bytes = serde_json::to_vec(&input).expect("digest input serializes");
    fnv1a64(&bytes)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Replay a fixed action sequence on an instance and record the trajectory.
pub fn record_path(
    instance: &Instance,
    actions: &[Action],
    phase: u32,
    digest_window: usize,
) -> Result<Trajectory, TrajectoryError> {
    let mut episode = Episode::reset(&instance.graph, &instance.task)
        .map_err(|e| TrajectoryError::Invalid(e.to_string()))?;
    let mut tracker = crate::env::SubgoalTracker::new(&instance.task);
    let mut steps = Vec::with_capacity(actions.len());
    let mut terminal = Terminal::HorizonExhausted;
    let mut success = 0u8;
    for (t, action) in actions.iter().enumerate() {
        let page = episode.current_page();
        let outcome = episode
            .step(action.clone())
            .map_err(|e| TrajectoryError::Invalid(e.to_string()))?;
        tracker.observe(
            &instance.task,
            page,
            action,
            episode.current_page(),
            episode.flags(),
        );
        let digest = state_digest(episode.history(), &outcome.observation, digest_window);
        steps.push(Step {
            t: t as u32,
            page,
            action: action.clone(),
            reward: outcome.reward,
            z: tracker.z().to_vec(),
            digest,
        });
        if outcome.done {
            if let Action::Exit { message } = action {
                terminal = Terminal::Exit {
                    message: message.clone(),
                };
            }
            success = outcome.reward;
            break;
        }
    }
    let traj = Trajectory {
        schema_version: SCHEMA_VERSION,
        task_id: instance.task.task_id.clone(),
        phase,
        steps,
        terminal,
        success,
    };
    traj.validate()?;
    Ok(traj)
}

/// Append one trajectory as a JSONL line.
pub fn append_log(traj: &Trajectory, path: &Path) -> Result<(), TrajectoryError> {
    traj.validate()?;
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(traj).expect("trajectory serializes");
    writeln!(file, "{line}")?;
    Ok(())
}

/// Read a whole JSONL log. Parse failures name the offending line (1-based).
pub fn read_log(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|source| TrajectoryError::Parse { line: i + 1, source })?;
        out.push(traj);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub trajectory: Trajectory,
    pub perplexity: f64,
    pub phase_added: u32,
}

/// Experience replay buffer. Only successful trajectories are admitted.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trajectory: Trajectory, phase_added: u32) -> Result<(), TrajectoryError> {
        if !trajectory.is_success() {
            return Err(TrajectoryError::Invalid(
                "replay buffer admits only successful trajectories".into(),
            ));
        }
        self.entries.push(ReplayEntry {
            trajectory,
            perplexity: f64::NAN,
            phase_added,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ReplayEntry] {
        &mut self.entries
    }
}
