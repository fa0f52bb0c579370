//! Agent/task-pool co-evolution.
//!
//! A step-level policy is trained with GRPO on a pool of executable tasks.
//! Rollouts are mined for forgetting, boundary and rare-pattern signals;
//! each signal conditions a round of re-exploration whose interactions are
//! abstracted into candidate tasks, validated by execution, and appended to
//! the pool. The whole loop runs against a deterministic tool-chain
//! environment so every stage has an exact oracle.
//!
//! Module map:
//!
//! - [`model`]: shared domain types and the trajectory log encoding
//! - [`signals`]: forgetting / boundary / rare detectors
//! - [`env`]: seeded tool-dependency environment
//! - [`grpo`]: tabular softmax policy, clipped objective and its gradient
//! - [`explorer`]: exploration contexts, guidance prompts, backends
//! - [`synthesis`]: triplet aggregation, abstraction, validation, pool growth
//! - [`taskpool`]: the evolving task set
//! - [`metrics`]: SR@k, energy distance, similarity histograms
//! - [`orchestrator`]: config loading, the closed loop, reports

pub mod env;
pub mod error;
pub mod explorer;
pub mod grpo;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod prompts;
pub mod seed;
pub mod signals;
pub mod synthesis;
pub mod taskpool;

pub use error::{Error, Result};
