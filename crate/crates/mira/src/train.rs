//! Training loops: potential-critic warm-up from positive traces, the inner
//! shaped-advantage actor/critic loop, and the outer failure-driven
//! curriculum with perplexity-filtered experience replay.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{classify_failure, AnalyzerParams, FailureCategory};
use crate::env::{build_instance, EnvConfig, EnvError, GraphFamily, Instance, PageId};
use crate::models::{
    actor_loss_and_grad, kl_actor_loss_and_grad, perplexity, potential_loss_and_grad,
    trajectory_policy_steps, value_loss_and_grad, ActorSample, Checkpoint, Critic,
    FeatureExtractor, KlActorSample, ModelError, ModelSet, StateView,
};
use crate::shaping::{aux_shaped_reward, labels_for_trajectory, ShapingError};
use crate::trajectory::{
    append_log, record_path, ReplayBuffer, Trajectory, TrajectoryError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("trajectory {0} is not a positive trace")]
    NotPositiveTrace(String),
    #[error("non-finite loss detected in {context}")]
    NumericAbort { context: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters for both loops. Replay filtering is expressed in
/// perplexity space: a trajectory is kept when ppl is within
/// [ppl_min, ppl_max] inclusive, i.e. rank score 1/ppl within [0.5, 0.9].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HParams {
    pub gamma: f64,
    /// Shaping coefficient; 0 disables shaping (sparse baseline).
    pub alpha: f64,
    /// TD/Monte-Carlo mixing weight in the doubly-robust advantage.
    pub lambda: f64,
    /// Log-ratio regression scale.
    pub beta: f64,
    /// Critic update rounds per inner loop (N_c).
    pub critic_iters: usize,
    pub critic_lr: f64,
    pub potential_lr: f64,
    /// Gradient steps for the warm-up potential fit.
    pub warmup_steps: usize,
    pub actor_lr: f64,
    /// Fixed actor step budget per inner loop.
    pub actor_steps: usize,
    pub phases: usize,
    pub rollouts_per_phase: usize,
    /// Number of tasks in each phase's training set.
    pub train_tasks: usize,
    /// Similar tasks resampled per failure.
    pub top_k: usize,
    pub ppl_min: f64,
    pub ppl_max: f64,
    pub temperature: f64,
    /// Hidden width for the critics; None selects the linear variant.
    pub hidden: Option<usize>,
    /// Action window for state digests and feature encoding.
    pub digest_window: usize,
    pub seed: u64,
    /// Train and apply the learned potential (disable for the ablation).
    pub use_potential_critic: bool,
    /// Use the importance-weighted KL objective instead of log-ratio
    /// regression (ablation).
    pub kl_actor: bool,
    /// Stop the outer loop once a phase reaches this success rate.
    pub stop_success_rate: Option<f64>,
    /// Warm-up exclusion: traces with a longer identical-action run.
    pub max_identical_run: usize,
    /// Warm-up exclusion: traces at or above this length.
    pub max_warmup_len: usize,
}

impl Default for HParams {
    fn default() -> Self {
        HParams {
            gamma: 0.9,
            alpha: 0.3,
            lambda: 0.5,
            beta: 1.0,
            critic_iters: 5,
            critic_lr: 1e-2,
            potential_lr: 0.5,
            warmup_steps: 300,
            actor_lr: 0.5,
            actor_steps: 10,
            phases: 8,
            rollouts_per_phase: 8,
            train_tasks: 4,
            top_k: 2,
            ppl_min: 1.0 / 0.9,
            ppl_max: 1.0 / 0.5,
            temperature: 1.0,
            hidden: None,
            digest_window: crate::trajectory::DEFAULT_DIGEST_WINDOW,
            seed: 0,
            use_potential_critic: true,
            kl_actor: false,
            stop_success_rate: None,
            max_identical_run: 5,
            max_warmup_len: 15,
        }
    }
}

impl HParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::Config("gamma must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config("lambda must be in [0, 1]".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::Config("alpha must be >= 0".into()));
        }
        if self.beta <= 0.0 {
            return Err(TrainError::Config("beta must be > 0".into()));
        }
        if self.ppl_min > self.ppl_max {
            return Err(TrainError::Config(
                "ppl lower bound must not exceed upper bound".into(),
            ));
        }
        if self.train_tasks == 0 || self.rollouts_per_phase == 0 {
            return Err(TrainError::Config(
                "train_tasks and rollouts_per_phase must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Inclusive replay filter: a trajectory is kept when its perplexity lies in
/// [ppl_min, ppl_max], i.e. its rank score 1/ppl lies in [0.5, 0.9] at the
/// default bounds.
pub fn replay_filter_keep(hp: &HParams, ppl: f64) -> bool {
    ppl >= hp.ppl_min && ppl <= hp.ppl_max
}

/// A trajectory together with the goal page needed for feature encoding.
#[derive(Debug, Clone)]
pub struct TaggedTrace {
    pub trajectory: Trajectory,
    pub goal_page: PageId,
}

/// Discounted returns G_t = sum_{u >= t} gamma^(u-t) r'_u.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    returns
}

/// Doubly-robust advantage mixing the 1-step TD error with the Monte-Carlo
/// residual: lambda (r' + gamma V' - V) + (1 - lambda) (G - V).
pub fn advantage(r: f64, v: f64, v_next: f64, g: f64, gamma: f64, lambda: f64) -> f64 {
    lambda * (r + gamma * v_next - v) + (1.0 - lambda) * (g - v)
}

/// Feature vectors for states s_0..s_T of a recorded trajectory (T+1 rows).
/// The terminal row reuses the final step's page with the full action window
/// and the final completion vector.
pub fn state_features(
    extractor: &FeatureExtractor,
    trace: &TaggedTrace,
) -> Vec<Vec<f64>> {
    let traj = &trace.trajectory;
    let actions = traj.actions();
    let k = traj.steps.first().map(|s| s.z.len()).unwrap_or(extractor.k);
    let empty_flags = std::collections::BTreeSet::new();
    let mut rows = Vec::with_capacity(traj.len() + 1);
    for (t, step) in traj.steps.iter().enumerate() {
        let z_prev = if t == 0 {
            vec![0u8; k]
        } else {
            traj.steps[t - 1].z.clone()
        };
        rows.push(extractor.features(&StateView {
            page: step.page,
            recent_actions: &actions[..t],
            flags: &empty_flags,
            z: &z_prev,
            goal_page: trace.goal_page,
        }));
    }
    let final_z = traj.final_z();
    let last_page = traj
        .steps
        .last()
        .map(|s| s.page)
        .unwrap_or(trace.goal_page);
    rows.push(extractor.features(&StateView {
        page: last_page,
        recent_actions: &actions,
        flags: &empty_flags,
        z: &final_z,
        goal_page: trace.goal_page,
    }));
    rows
}

fn longest_identical_run(traj: &Trajectory) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for step in &traj.steps {
        if Some(&step.action) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(&step.action);
        }
        best = best.max(run);
    }
    best
}

/// Fit the potential critic on progress labels from positive traces only.
/// Traces with an identical-action run longer than `max_identical_run` or
/// with length >= `max_warmup_len` are excluded from supervision.
pub fn warmup_potential(
    traces: &[TaggedTrace],
    extractor: &FeatureExtractor,
    hp: &HParams,
) -> Result<Critic, TrainError> {
    let mut batch: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut usable = 0;
    for trace in traces {
        if !trace.trajectory.is_success() {
            return Err(TrainError::NotPositiveTrace(
                trace.trajectory.task_id.clone(),
            ));
        }
        if longest_identical_run(&trace.trajectory) > hp.max_identical_run
            || trace.trajectory.len() >= hp.max_warmup_len
        {
            continue;
        }
        let labels = labels_for_trajectory(&trace.trajectory)?;
        let rows = state_features(extractor, trace);
        debug_assert_eq!(labels.0.len(), rows.len());
        batch.extend(rows.into_iter().zip(labels.0.iter().copied()));
        usable += 1;
    }
    if usable == 0 {
        return Err(TrainError::Config(
            "no usable positive traces for potential warm-up".into(),
        ));
    }
    let mut critic = Critic::zeros(extractor.dim(), hp.hidden);
    for step in 0..hp.warmup_steps {
        let (loss, grad) = potential_loss_and_grad(&critic, &batch);
        if !loss.is_finite() {
            return Err(TrainError::NumericAbort {
                context: format!("potential warm-up step {step}"),
            });
        }
        for (p, g) in critic.params.iter_mut().zip(&grad) {
            *p -= hp.potential_lr * g;
        }
    }
    Ok(critic)
}

/// Roll out the current policy on one instance. The episode terminates on
/// Exit or at the horizon; the returned trajectory is re-recorded through the
/// canonical replay path.
pub fn rollout(
    instance: &Instance,
    models: &ModelSet,
    extractor: &FeatureExtractor,
    hp: &HParams,
    phase: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, TrainError> {
    let mut episode = crate::env::Episode::reset(&instance.graph, &instance.task)?;
    let mut tracker = crate::env::SubgoalTracker::new(&instance.task);
    let empty_flags = std::collections::BTreeSet::new();
    let mut actions = Vec::new();
    while !episode.is_done() {
        let history = episode.history().to_vec();
        let x = extractor.features(&StateView {
            page: episode.current_page(),
            recent_actions: &history,
            flags: &empty_flags,
            z: tracker.z(),
            goal_page: instance.task.goal.page,
        });
        let idx = models.policy.sample(&x, rng);
        let action = extractor.action_space.action(idx).clone();
        let page = episode.current_page();
        episode.step(action.clone())?;
        tracker.observe(
            &instance.task,
            page,
            &action,
            episode.current_page(),
            episode.flags(),
        );
        actions.push(action);
    }
    Ok(record_path(instance, &actions, phase, hp.digest_window)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerStats {
    pub value_loss: f64,
    pub potential_loss: Option<f64>,
    pub actor_loss: f64,
}

/// One inner-loop epoch: Phase A trains both critics for `critic_iters`
/// rounds, Phase B computes shaped rewards and returns, Phase C regresses
/// the actor on shaped advantages. Fully deterministic (no sampling).
pub fn inner_loop(
    data: &[TaggedTrace],
    models: &mut ModelSet,
    extractor: &FeatureExtractor,
    hp: &HParams,
) -> Result<InnerStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("inner loop requires training data".into()));
    }
    let features: Vec<Vec<Vec<f64>>> =
        data.iter().map(|t| state_features(extractor, t)).collect();

    // Phase A: critic updates.
    let mut value_batch: Vec<(Vec<f64>, f64)> = Vec::new();
    for (trace, rows) in data.iter().zip(&features) {
        let label = trace.trajectory.success as f64;
        value_batch.extend(rows.iter().map(|x| (x.clone(), label)));
    }
    let mut potential_batch: Vec<(Vec<f64>, f64)> = Vec::new();
    if hp.use_potential_critic {
        for (trace, rows) in data.iter().zip(&features) {
            if !trace.trajectory.is_success() {
                continue;
            }
            // Successes whose subgoal record is incomplete carry no usable
            // progress signal; skip them rather than aborting the phase.
            if let Ok(labels) = labels_for_trajectory(&trace.trajectory) {
                potential_batch
                    .extend(rows.iter().cloned().zip(labels.0.iter().copied()));
            }
        }
    }
    let mut stats = InnerStats::default();
    for iter in 0..hp.critic_iters {
        let (loss, grad) = value_loss_and_grad(&models.value, &value_batch);
        if !loss.is_finite() {
            return Err(TrainError::NumericAbort {
                context: format!("value critic batch at iteration {iter}"),
            });
        }
        stats.value_loss = loss;
        for (p, g) in models.value.params.iter_mut().zip(&grad) {
            *p -= hp.critic_lr * g;
        }
        if !potential_batch.is_empty() {
            let (loss, grad) = potential_loss_and_grad(&models.potential, &potential_batch);
            if !loss.is_finite() {
                return Err(TrainError::NumericAbort {
                    context: format!("potential critic batch at iteration {iter}"),
                });
            }
            stats.potential_loss = Some(loss);
            for (p, g) in models.potential.params.iter_mut().zip(&grad) {
                *p -= hp.potential_lr * g;
            }
        }
    }

    // Phase B: shaped rewards and returns; Phase C inputs collected per step.
    let mut actor_batch: Vec<ActorSample> = Vec::new();
    let mut kl_batch: Vec<KlActorSample> = Vec::new();
    for (trace, rows) in data.iter().zip(&features) {
        let traj = &trace.trajectory;
        let potentials: Vec<f64> = if hp.use_potential_critic {
            rows.iter().map(|x| models.potential.forward(x)).collect()
        } else {
            vec![0.0; rows.len()]
        };
        let shaped: Vec<f64> = traj
            .steps
            .iter()
            .enumerate()
            .map(|(t, step)| {
                aux_shaped_reward(step.reward as f64, potentials[t], potentials[t + 1], hp.alpha)
            })
            .collect();
        let returns = compute_returns(&shaped, hp.gamma);
        let values: Vec<f64> = rows.iter().map(|x| models.value.forward(x)).collect();
        for (t, step) in traj.steps.iter().enumerate() {
            let a = advantage(
                shaped[t],
                values[t],
                values[t + 1],
                returns[t],
                hp.gamma,
                hp.lambda,
            );
            let Some(action) = extractor.action_space.index_of(&step.action) else {
                continue;
            };
            if hp.kl_actor {
                kl_batch.push(KlActorSample {
                    features: rows[t].clone(),
                    action,
                    advantage: a,
                });
            } else {
                actor_batch.push(ActorSample {
                    ref_logprob: models.reference.logprob(&rows[t], action),
                    features: rows[t].clone(),
                    action,
                    advantage: a,
                });
            }
        }
    }

    // Phase C: actor regression steps.
    for step in 0..hp.actor_steps {
        let (loss, grad) = if hp.kl_actor {
            kl_actor_loss_and_grad(&models.policy, &kl_batch, hp.beta)
        } else {
            actor_loss_and_grad(&models.policy, &actor_batch, hp.beta)
        };
        if !loss.is_finite() {
            return Err(TrainError::NumericAbort {
                context: format!("actor batch at step {step}"),
            });
        }
        stats.actor_loss = loss;
        for (w, g) in models.policy.weights.iter_mut().zip(&grad) {
            *w -= hp.actor_lr * g;
        }
    }
    Ok(stats)
}

/// One failed task, reduced to the features the resampler matches on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSeed {
    pub task_id: String,
    pub family: GraphFamily,
    pub subgoal_kinds: Vec<String>,
    pub category: FailureCategory,
}

impl FailureSeed {
    pub fn from_instance(instance: &Instance, category: FailureCategory) -> Self {
        FailureSeed {
            task_id: instance.task.task_id.clone(),
            family: instance.task.family,
            subgoal_kinds: instance
                .task
                .subgoals
                .iter()
                .map(|s| s.predicate.kind().to_string())
                .collect(),
            category,
        }
    }
}

fn overlap_score(failure: &FailureSeed, instance: &Instance) -> usize {
    let mut score = 0;
    if instance.task.family == failure.family {
        score += 10;
    }
    for sg in &instance.task.subgoals {
        if failure.subgoal_kinds.iter().any(|k| k == sg.predicate.kind()) {
            score += 1;
        }
    }
    score
}

/// Refresh the training set from failures: rank the pool by feature overlap
/// (family, subgoal templates) and take `top_k` per failure, duplicates
/// allowed. Families with fewer than 2 pool candidates get a synthesized
/// sibling (same family, fresh seed). An empty failure set falls back to a
/// uniform pool sample of `top_k` tasks.
pub fn resample_similar(
    failures: &[FailureSeed],
    pool: &[Instance],
    config: &EnvConfig,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Instance>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::Config("task pool is empty".into()));
    }
    if failures.is_empty() {
        return Ok((0..top_k)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect());
    }
    let mut out = Vec::new();
    for failure in failures {
        let mut ranked: Vec<(usize, usize)> = pool
            .iter()
            .enumerate()
            .map(|(i, inst)| (overlap_score(failure, inst), i))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in ranked.iter().take(top_k) {
            out.push(pool[i].clone());
        }
        let family_count = pool
            .iter()
            .filter(|i| i.task.family == failure.family)
            .count();
        if family_count < 2 {
            let synth_config = EnvConfig {
                family: failure.family,
                seed: rng.gen(),
                ..config.clone()
            };
            out.push(build_instance(&synth_config, rng.gen())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: u32,
    pub rollouts: usize,
    pub success_rate: f64,
    pub failure_counts: BTreeMap<String, usize>,
    pub buffer_size: usize,
    pub ppl_pass_rate: f64,
    /// False when the potential critic is disabled or alpha = 0, i.e. the
    /// auxiliary shaping term is identically zero.
    pub shaping_enabled: bool,
}

#[derive(Debug)]
pub struct OuterResult {
    pub summaries: Vec<PhaseSummary>,
    pub models: ModelSet,
    pub extractor: FeatureExtractor,
}

fn fnv1a64_str(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in text.as_bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable hash over the serialized (config, hparams) pair, stamped into
/// checkpoints.
pub fn setup_hash(config: &EnvConfig, hp: &HParams) -> u64 {
    let blob = serde_json::to_string(&(config, hp)).expect("config serializes");
    fnv1a64_str(&blob)
}

fn episode_seed(hp: &HParams, phase: u32, task_id: &str, rollout_idx: usize) -> u64 {
    fnv1a64_str(&format!("{}|{phase}|{task_id}|{rollout_idx}", hp.seed))
}

/// Algorithm-2-style outer curriculum. Per phase: snapshot the reference
/// policy, roll out on the current training set, judge, classify failures,
/// update replay and the failure set, filter replay by perplexity, train one
/// inner epoch on rollouts plus filtered replay, then refresh the training
/// set by similarity resampling. An all-failure phase with an empty replay
/// buffer proceeds on rollout data alone.
pub fn outer_loop(
    config: &EnvConfig,
    pool: &[Instance],
    hp: &HParams,
    run_dir: Option<&Path>,
) -> Result<OuterResult, TrainError> {
    hp.validate()?;
    if pool.is_empty() {
        return Err(TrainError::Config("task pool is empty".into()));
    }
    let extractor = FeatureExtractor::from_config(config, hp.digest_window);
    let mut models = ModelSet::new(extractor.dim(), extractor.action_space.len(), hp.hidden);
    models.policy.temperature = hp.temperature;

    let mut registry: BTreeMap<String, Instance> = pool
        .iter()
        .map(|i| (i.task.task_id.clone(), i.clone()))
        .collect();
    let mut i_train: Vec<Instance> = (0..hp.train_tasks)
        .map(|i| pool[i % pool.len()].clone())
        .collect();

    // Warm up the potential critic on the training set's golden paths.
    if hp.use_potential_critic {
        let golden: Vec<TaggedTrace> = i_train
            .iter()
            .map(|inst| {
                Ok(TaggedTrace {
                    trajectory: record_path(inst, &inst.golden_path, 0, hp.digest_window)?,
                    goal_page: inst.task.goal.page,
                })
            })
            .collect::<Result<_, TrainError>>()?;
        models.potential = warmup_potential(&golden, &extractor, hp)?;
    }

    let mut replay = ReplayBuffer::new();
    let mut summaries = Vec::new();
    let hash = setup_hash(config, hp);

    for phase in 0..hp.phases as u32 {
        models.snapshot_reference();

        // Rollouts; per-episode seeds derive from (seed, phase, task, index)
        // so results are invariant to scheduling order.
        let mut rollouts: Vec<TaggedTrace> = Vec::new();
        for inst in &i_train {
            for j in 0..hp.rollouts_per_phase {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(
                    hp,
                    phase,
                    &inst.task.task_id,
                    j,
                ));
                let traj = rollout(inst, &models, &extractor, hp, phase, &mut rng)?;
                rollouts.push(TaggedTrace {
                    trajectory: traj,
                    goal_page: inst.task.goal.page,
                });
            }
        }

        // Judge and split.
        let total = rollouts.len();
        let successes = rollouts
            .iter()
            .filter(|t| t.trajectory.is_success())
            .count();
        let success_rate = successes as f64 / total as f64;
        let mut failure_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut failure_seeds: Vec<FailureSeed> = Vec::new();
        for trace in &rollouts {
            if trace.trajectory.is_success() {
                replay.push(trace.trajectory.clone(), phase)?;
            } else {
                let record = classify_failure(
                    &trace.trajectory,
                    Some(trace.goal_page),
                    &AnalyzerParams::default(),
                )
                .expect("failed rollout classifies");
                *failure_counts
                    .entry(record.category.label().to_string())
                    .or_insert(0) += 1;
                if let Some(inst) = registry.get(&trace.trajectory.task_id) {
                    failure_seeds.push(FailureSeed::from_instance(inst, record.category));
                }
            }
        }

        // Refresh replay perplexities under the current policy and filter.
        for entry in replay.entries_mut() {
            let goal = registry
                .get(&entry.trajectory.task_id)
                .map(|i| i.task.goal.page)
                .unwrap_or(PageId(0));
            let steps = trajectory_policy_steps(&extractor, &entry.trajectory, goal);
            entry.perplexity = perplexity(&models.policy, &steps);
        }
        let filtered: Vec<TaggedTrace> = replay
            .entries()
            .iter()
            .filter(|e| replay_filter_keep(hp, e.perplexity))
            .map(|e| TaggedTrace {
                goal_page: registry
                    .get(&e.trajectory.task_id)
                    .map(|i| i.task.goal.page)
                    .unwrap_or(PageId(0)),
                trajectory: e.trajectory.clone(),
            })
            .collect();
        let ppl_pass_rate = if replay.is_empty() {
            0.0
        } else {
            filtered.len() as f64 / replay.len() as f64
        };

        // D_train = this phase's rollouts plus the filtered replay.
        let mut d_train = rollouts;
        d_train.extend(filtered);
        inner_loop(&d_train, &mut models, &extractor, hp)?;

        let summary = PhaseSummary {
            phase,
            rollouts: total,
            success_rate,
            failure_counts,
            buffer_size: replay.len(),
            ppl_pass_rate,
            shaping_enabled: hp.use_potential_critic && hp.alpha > 0.0,
        };
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            Checkpoint {
                config_hash: hash,
                models: models.clone(),
            }
            .save(&dir.join(format!("checkpoint_{phase}.json")))?;
            let log = dir.join(format!("trajectories_{phase}.jsonl"));
            for trace in &d_train {
                append_log(&trace.trajectory, &log)?;
            }
            std::fs::write(
                dir.join(format!("summary_{phase}.json")),
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
        }
        summaries.push(summary);

        if let Some(threshold) = hp.stop_success_rate {
            if success_rate >= threshold {
                break;
            }
        }

        // Failure-driven refresh of the next phase's training set.
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(hp, phase, "resample", 0));
        let mut next =
            resample_similar(&failure_seeds, pool, config, hp.top_k.max(1), &mut rng)?;
        next.truncate(hp.train_tasks.max(1));
        while next.len() < hp.train_tasks {
            next.push(pool[rng.gen_range(0..pool.len())].clone());
        }
        for inst in &next {
            registry
                .entry(inst.task.task_id.clone())
                .or_insert_with(|| inst.clone());
        }
        i_train = next;
    }

    Ok(OuterResult {
        summaries,
        models,
        extractor,
    })
}
