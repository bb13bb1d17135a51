//! Small parametric models: linear-softmax policy and logistic critics (with
//! an optional one-hidden-layer tanh variant), with closed-form losses and
//! analytic gradients.
//!
//! The feature vector concatenates a page one-hot, the last-W action one-hots,
//! flag bits, the subgoal progress vector z, and a goal-page one-hot, so the
//! policy is conditioned on its own milestone progress.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, ElementId, EnvConfig, FlagId, PageId};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint config hash {found:#x} does not match expected {expected:#x}")]
    ConfigHash { expected: u64, found: u64 },
}

/// Discrete action vocabulary shared by the policy and the environment
/// adapter. `Exit` matches regardless of message; sampling emits a canonical
/// message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    actions: Vec<Action>,
}

impl ActionSpace {
    pub fn from_config(config: &EnvConfig) -> Self {
        let n_elements = config.branching.max(2);
        let mut actions = Vec::new();
        for e in 0..n_elements {
            actions.push(Action::Click {
                element: ElementId(e),
            });
        }
        actions.push(Action::SetFlag { flag: FlagId(0) });
        actions.push(Action::Back);
        actions.push(Action::Scroll);
        actions.push(Action::Wait);
        actions.push(Action::Exit {
            message: crate::env::EXIT_MESSAGE.into(),
        });
        ActionSpace { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, index: usize) -> &Action {
        &self.actions[index]
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        if action.is_exit() {
            return self.actions.iter().position(|a| a.is_exit());
        }
        self.actions.iter().position(|a| a == action)
    }
}

/// One state as seen by the models, prior to feature encoding.
#[derive(Debug, Clone)]
pub struct StateView<'a> {
    pub page: PageId,
    pub recent_actions: &'a [Action],
    pub flags: &'a BTreeSet<FlagId>,
    pub z: &'a [u8],
    pub goal_page: PageId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub n_pages: usize,
    pub n_flags: usize,
    pub k: usize,
    pub window: usize,
    pub action_space: ActionSpace,
}

impl FeatureExtractor {
    pub fn from_config(config: &EnvConfig, window: usize) -> Self {
        FeatureExtractor {
            n_pages: config.pages as usize,
            n_flags: 1,
            k: config.subgoals as usize,
            window,
            action_space: ActionSpace::from_config(config),
        }
    }

    pub fn dim(&self) -> usize {
        // page one-hot + W action one-hots + flags + z + goal one-hot.
        self.n_pages
            + self.window * self.action_space.len()
            + self.n_flags
            + self.k
            + self.n_pages
    }

    pub fn features(&self, view: &StateView) -> Vec<f64> {
        let n_actions = self.action_space.len();
        let mut x = vec![0.0; self.dim()];
        if (view.page.0 as usize) < self.n_pages {
            x[view.page.0 as usize] = 1.0;
        }
        let base = self.n_pages;
        let start = view.recent_actions.len().saturating_sub(self.window);
        let recent = &view.recent_actions[start..];
        for (slot, action) in recent.iter().rev().enumerate() {
            if let Some(idx) = self.action_space.index_of(action) {
                x[base + slot * n_actions + idx] = 1.0;
            }
        }
        let base = base + self.window * n_actions;
        for flag in view.flags {
            if (flag.0 as usize) < self.n_flags {
                x[base + flag.0 as usize] = 1.0;
            }
        }
        let base = base + self.n_flags;
        for (i, &bit) in view.z.iter().take(self.k).enumerate() {
            x[base + i] = bit as f64;
        }
        let base = base + self.k;
        if (view.goal_page.0 as usize) < self.n_pages {
            x[base + view.goal_page.0 as usize] = 1.0;
        }
        x
    }
}

/// Linear-softmax policy over the action vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Row-major (n_features x n_actions).
    pub weights: Vec<f64>,
    pub n_features: usize,
    pub n_actions: usize,
    /// Sampling temperature; <= 0 selects greedily.
    pub temperature: f64,
}

impl Policy {
    pub fn zeros(n_features: usize, n_actions: usize) -> Self {
        Policy {
            weights: vec![0.0; n_features * n_actions],
            n_features,
            n_actions,
            temperature: 1.0,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_features);
        let mut logits = vec![0.0; self.n_actions];
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &self.weights[f * self.n_actions..(f + 1) * self.n_actions];
            for (a, &w) in row.iter().enumerate() {
                logits[a] += xf * w;
            }
        }
        logits
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(x))
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.log_probs(x).iter().map(|lp| lp.exp()).collect()
    }

    /// log pi(a | s) under the untempered softmax.
    pub fn logprob(&self, x: &[f64], action: usize) -> f64 {
        self.log_probs(x)[action]
    }

    /// Sample an action index; temperature 0 is greedy argmax with
    /// lowest-index tie-breaking.
    pub fn sample<R: Rng>(&self, x: &[f64], rng: &mut R) -> usize {
        let logits = self.logits(x);
        if self.temperature <= 0.0 {
            return argmax(&logits);
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / self.temperature).collect();
        let lps = log_softmax(&scaled);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (a, lp) in lps.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                return a;
            }
        }
        lps.len() - 1
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// Logistic critic: sigmoid(w.x + b), or sigmoid over a single tanh hidden
/// layer when `hidden` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub params: Vec<f64>,
    pub n_features: usize,
    pub hidden: Option<usize>,
}

const PROB_EPS: f64 = 1e-7;

impl Critic {
    pub fn zeros(n_features: usize, hidden: Option<usize>) -> Self {
        let n_params = match hidden {
            None => n_features + 1,
            Some(m) => m * n_features + m + m + 1,
        };
        Critic {
            params: vec![0.0; n_params],
            n_features,
            hidden,
        }
    }

    pub fn random_init<R: Rng>(n_features: usize, hidden: Option<usize>, rng: &mut R) -> Self {
        let mut critic = Critic::zeros(n_features, hidden);
        for p in &mut critic.params {
            *p = rng.gen_range(-0.1..0.1);
        }
        critic
    }

    /// Output in (0, 1).
    pub fn forward(&self, x: &[f64]) -> f64 {
        sigmoid(self.pre_activation(x).0)
    }

    /// (final pre-sigmoid activation, hidden activations if any).
    fn pre_activation(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.hidden {
            None => {
                let (w, b) = self.params.split_at(self.n_features);
                let z = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[0];
                (z, Vec::new())
            }
            Some(m) => {
                let f = self.n_features;
                let w1 = &self.params[..m * f];
                let b1 = &self.params[m * f..m * f + m];
                let w2 = &self.params[m * f + m..m * f + 2 * m];
                let b2 = self.params[m * f + 2 * m];
                let mut h = vec![0.0; m];
                for i in 0..m {
                    let pre = w1[i * f..(i + 1) * f]
                        .iter()
                        .zip(x)
                        .map(|(wi, xi)| wi * xi)
                        .sum::<f64>()
                        + b1[i];
                    h[i] = pre.tanh();
                }
                let z = w2.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>() + b2;
                (z, h)
            }
        }
    }

    /// Accumulate d(output pre-sigmoid)/d(params) scaled by `scale` into grad,
    /// reusing the hidden activations from `pre_activation`.
    fn accumulate_grad(&self, x: &[f64], hidden_act: &[f64], scale: f64, grad: &mut [f64]) {
        match self.hidden {
            None => {
                for (f, &xf) in x.iter().enumerate() {
                    grad[f] += scale * xf;
                }
                grad[self.n_features] += scale;
            }
            Some(m) => {
                let f = self.n_features;
                let w2 = &self.params[m * f + m..m * f + 2 * m];
                for i in 0..m {
                    let hi = hidden_act[i];
                    // dz/dw2_i = h_i; dz/dh_i = w2_i; dh_i/dpre_i = 1 - h_i^2.
                    grad[m * f + m + i] += scale * hi;
                    let back = scale * w2[i] * (1.0 - hi * hi);
                    for (j, &xj) in x.iter().enumerate() {
                        grad[i * f + j] += back * xj;
                    }
                    grad[m * f + i] += back;
                }
                grad[m * f + 2 * m] += scale;
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy loss and analytic gradient for the value critic.
/// Outputs are clamped away from {0, 1} by 1e-7 before the logs.
pub fn value_loss_and_grad(critic: &Critic, batch: &[(Vec<f64>, f64)]) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; critic.params.len()];
    for (x, y) in batch {
        let (z, h) = critic.pre_activation(x);
        let v = sigmoid(z);
        let vc = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss += -(y * vc.ln() + (1.0 - y) * (1.0 - vc).ln());
        // In the unclamped interior dL/dz = v - y; a clamped output is
        // locally flat in the loss, so its gradient contribution is zero.
        if v > PROB_EPS && v < 1.0 - PROB_EPS {
            critic.accumulate_grad(x, &h, (v - y) / n, &mut grad);
        }
    }
    (loss / n, grad)
}

/// Mean squared error loss and analytic gradient for the potential critic.
pub fn potential_loss_and_grad(critic: &Critic, batch: &[(Vec<f64>, f64)]) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; critic.params.len()];
    for (x, target) in batch {
        let (z, h) = critic.pre_activation(x);
        let p = sigmoid(z);
        let diff = p - target;
        loss += diff * diff;
        critic.accumulate_grad(x, &h, 2.0 * diff * p * (1.0 - p) / n, &mut grad);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone)]
pub struct ActorSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub advantage: f64,
    pub ref_logprob: f64,
}

/// Log-ratio regression actor loss:
/// mean (beta * (log pi_theta - log pi_ref) - A)^2, with its analytic
/// gradient -2 beta E[(A - beta log-ratio) grad log pi_theta].
pub fn actor_loss_and_grad(policy: &Policy, batch: &[ActorSample], beta: f64) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.weights.len()];
    for sample in batch {
        let lps = policy.log_probs(&sample.features);
        let probs: Vec<f64> = lps.iter().map(|lp| lp.exp()).collect();
        let residual = beta * (lps[sample.action] - sample.ref_logprob) - sample.advantage;
        loss += residual * residual;
        let scale = 2.0 * residual * beta / n;
        accumulate_logprob_grad(policy, &sample.features, sample.action, &probs, scale, &mut grad);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone)]
pub struct KlActorSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub advantage: f64,
}

/// KL-ablation actor objective: importance-weighted negative log-likelihood
/// -mean exp(A / beta) log pi_theta(a | s), for actions sampled from pi_ref.
pub fn kl_actor_loss_and_grad(
    policy: &Policy,
    batch: &[KlActorSample],
    beta: f64,
) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.weights.len()];
    for sample in batch {
        let lps = policy.log_probs(&sample.features);
        let probs: Vec<f64> = lps.iter().map(|lp| lp.exp()).collect();
        let weight = (sample.advantage / beta).exp();
        loss += -weight * lps[sample.action];
        accumulate_logprob_grad(
            policy,
            &sample.features,
            sample.action,
            &probs,
            -weight / n,
            &mut grad,
        );
    }
    (loss / n, grad)
}

/// grad_theta log pi(a|s) for a linear softmax:
/// d/d theta[f][a'] = x_f (1{a'=a} - pi(a'|s)).
fn accumulate_logprob_grad(
    policy: &Policy,
    x: &[f64],
    action: usize,
    probs: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    for (f, &xf) in x.iter().enumerate() {
        if xf == 0.0 {
            continue;
        }
        let row = &mut grad[f * policy.n_actions..(f + 1) * policy.n_actions];
        for (a, g) in row.iter_mut().enumerate() {
            let indicator = if a == action { 1.0 } else { 0.0 };
            *g += scale * xf * (indicator - probs[a]);
        }
    }
}

/// Action-level perplexity exp(-(1/T) sum_t log pi(a_t | s_t)) over a
/// trajectory's (features, action) pairs. The rank score used by the replay
/// filter is 1/perplexity.
pub fn perplexity(policy: &Policy, steps: &[(Vec<f64>, usize)]) -> f64 {
    if steps.is_empty() {
        return 1.0;
    }
    let mean_lp = steps
        .iter()
        .map(|(x, a)| policy.logprob(x, *a))
        .sum::<f64>()
        / steps.len() as f64;
    (-mean_lp).exp()
}

/// Policy, critics, and the frozen per-phase reference snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub policy: Policy,
    pub value: Critic,
    pub potential: Critic,
    pub reference: Policy,
}

impl ModelSet {
    pub fn new(n_features: usize, n_actions: usize, hidden: Option<usize>) -> Self {
        let policy = Policy::zeros(n_features, n_actions);
        ModelSet {
            reference: policy.clone(),
            policy,
            value: Critic::zeros(n_features, hidden),
            potential: Critic::zeros(n_features, hidden),
        }
    }

    pub fn snapshot_reference(&mut self) {
        self.reference = self.policy.clone();
    }
}

/// Model checkpoint: a JSON document with a header (dims, config hash) and
/// flat weight arrays. Reload is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub models: ModelSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Checkpoint, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        if let Some(expected) = expected_hash {
            if checkpoint.config_hash != expected {
                return Err(ModelError::ConfigHash {
                    expected,
                    found: checkpoint.config_hash,
                });
            }
        }
        Ok(checkpoint)
    }
}

/// Feature/action extraction for every step of a recorded trajectory, for
/// perplexity and actor batches. Step t's state view uses the pre-action
/// page, the action window before t, and z after step t-1.
pub fn trajectory_policy_steps(
    extractor: &FeatureExtractor,
    traj: &Trajectory,
    goal_page: PageId,
) -> Vec<(Vec<f64>, usize)> {
    let actions = traj.actions();
    let k = traj.steps.first().map(|s| s.z.len()).unwrap_or(extractor.k);
    let mut out = Vec::with_capacity(traj.len());
    let empty_flags = BTreeSet::new();
    for (t, step) in traj.steps.iter().enumerate() {
        let z_prev = if t == 0 {
            vec![0u8; k]
        } else {
            traj.steps[t - 1].z.clone()
        };
        let view = StateView {
            page: step.page,
            recent_actions: &actions[..t],
            flags: &empty_flags,
            z: &z_prev,
            goal_page,
        };
        let x = extractor.features(&view);
        if let Some(a) = extractor.action_space.index_of(&step.action) {
            out.push((x, a));
        }
    }
    out
}
