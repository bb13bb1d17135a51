//! Milestone-guided reward shaping for goal-conditioned navigation agents.
//!
//! The crate is organized around a synthetic page-graph environment with
//! sparse terminal rewards ([`env`]), a canonical trajectory model with JSONL
//! persistence ([`trajectory`]), dense progress labels and potential-based
//! shaping ([`shaping`]), small parametric policy/critic models with analytic
//! gradients ([`models`]), the inner/outer training loops ([`train`]), a
//! rule-based failure analyzer ([`analysis`]), and evaluation metric kernels
//! ([`metrics`]). The `mira` binary ties these together behind `train`,
//! `rollout`, `analyze`, `eval`, and `report` subcommands.

pub mod analysis;
pub mod config;
pub mod env;
pub mod metrics;
pub mod models;
pub mod shaping;
pub mod train;
pub mod trajectory;
