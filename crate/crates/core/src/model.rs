//! Shared domain types and the canonical line encoding used by the run log,
//! the pool snapshots and the trajectory log.
//!
//! Every record is a single JSON object per line. Struct field order is the
//! key order, so encodings are deterministic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_type!(
    /// Identifies a task in the pool (or a held-out evaluation task).
    TaskId
);
id_type!(TrajId);
id_type!(
    /// Groups the steps of one exploration run.
    RolloutId
);
id_type!(
    /// Names a goal predicate of a generated environment.
    GoalId
);

/// Hyperparameters of a run. Defaults follow the RL training table of the
/// reference setup; desk-scale experiment presets override a few of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub group_size: usize,
    pub batch_size: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coeff: f64,
    pub rollout_temperature: f64,
    /// 0 means greedy evaluation.
    pub eval_temperature: f64,
    /// Per-episode action cap.
    pub max_steps: usize,
    /// Length of the per-task score window used by the forgetting detector.
    pub window_size: usize,
    /// Rarity threshold, in percent.
    pub rare_threshold: f64,
    pub rare_min_total: u64,
    pub pattern_length: usize,
    pub init_pool_size: usize,
    /// Training steps between evolution phases.
    pub gen_frequency: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub dedup_threshold: f64,
    pub adv_epsilon: f64,

    /// Independent exploration runs per context.
    pub explore_rounds: usize,
    /// Steps per exploration run; 0 means `max_steps`.
    pub explore_steps: usize,
    /// Annotations explored per evolution phase.
    pub explore_budget: usize,
    /// Off-path action probability of the scripted explorer.
    pub noise_rate: f64,
    /// Upper bound on unguided rollouts spent building the initial pool.
    pub init_explore_budget: usize,

    pub num_tools: usize,
    pub max_chain_depth: usize,
    pub eval_tasks: usize,
    pub policy_buckets: usize,
    pub embed_dim: usize,
    pub sr_k: usize,
    pub histogram_bins: usize,
    /// Write every rollout trajectory to the trajectory log, not only the
    /// signal-annotated ones.
    pub log_all_trajectories: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            group_size: 8,
            batch_size: 32,
            clip_low: 0.20,
            clip_high: 0.28,
            kl_coeff: 1e-3,
            rollout_temperature: 0.9,
            eval_temperature: 0.0,
            max_steps: 30,
            window_size: 10,
            rare_threshold: 5.0,
            rare_min_total: 100,
            pattern_length: 3,
            init_pool_size: 100,
            gen_frequency: 10,
            total_steps: 120,
            seed: 0,
            dedup_threshold: 0.95,
            adv_epsilon: 1e-8,
            explore_rounds: 3,
            explore_steps: 0,
            explore_budget: 16,
            noise_rate: 0.3,
            init_explore_budget: 5000,
            num_tools: 12,
            max_chain_depth: 6,
            eval_tasks: 64,
            policy_buckets: 1 << 16,
            embed_dim: 128,
            sr_k: 5,
            histogram_bins: 10,
            log_all_trajectories: false,
        }
    }
}

impl RunConfig {
    /// Checks every range constraint, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::config(key, "must be a positive integer"));
            }
            Ok(())
        }
        fn finite_positive(key: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be a finite real > 0"));
            }
            Ok(())
        }

        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be a finite real >= 0"));
        }
        positive("group_size", self.group_size)?;
        if self.group_size < 2 {
            return Err(Error::config(
                "group_size",
                "must be >= 2 for group-relative advantages",
            ));
        }
        positive("batch_size", self.batch_size)?;
        if !(self.clip_low > 0.0 && self.clip_low < 1.0) {
            return Err(Error::config("clip_low", "must lie in (0, 1)"));
        }
        finite_positive("clip_high", self.clip_high)?;
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= 0.0) {
            return Err(Error::config("kl_coeff", "must be a finite real >= 0"));
        }
        finite_positive("rollout_temperature", self.rollout_temperature)?;
        if !(self.eval_temperature.is_finite() && self.eval_temperature >= 0.0) {
            return Err(Error::config(
                "eval_temperature",
                "must be a finite real >= 0",
            ));
        }
        positive("max_steps", self.max_steps)?;
        positive("window_size", self.window_size)?;
        if !(self.rare_threshold > 0.0 && self.rare_threshold < 100.0) {
            return Err(Error::config(
                "rare_threshold",
                "must lie strictly inside (0, 100)",
            ));
        }
        if self.rare_min_total == 0 {
            return Err(Error::config(
                "rare_min_total",
                "must be a positive integer",
            ));
        }
        positive("pattern_length", self.pattern_length)?;
        positive("init_pool_size", self.init_pool_size)?;
        positive("gen_frequency", self.gen_frequency)?;
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::config("dedup_threshold", "must lie in (0, 1]"));
        }
        finite_positive("adv_epsilon", self.adv_epsilon)?;
        positive("explore_rounds", self.explore_rounds)?;
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", "must lie in [0, 1]"));
        }
        positive("init_explore_budget", self.init_explore_budget)?;
        positive("max_chain_depth", self.max_chain_depth)?;
        if self.num_tools < self.max_chain_depth {
            return Err(Error::config("num_tools", "must be >= max_chain_depth"));
        }
        positive("eval_tasks", self.eval_tasks)?;
        positive("policy_buckets", self.policy_buckets)?;
        if self.embed_dim < 8 {
            return Err(Error::config("embed_dim", "must be >= 8"));
        }
        positive("sr_k", self.sr_k)?;
        positive("histogram_bins", self.histogram_bins)?;
        Ok(())
    }

    pub fn exploration_steps(&self) -> usize {
        if self.explore_steps == 0 {
            self.max_steps
        } else {
            self.explore_steps
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Forgetting,
    Boundary,
    Rare,
}

impl SignalKind {
    pub const ALL: [SignalKind; 3] = [
        SignalKind::Forgetting,
        SignalKind::Boundary,
        SignalKind::Rare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Forgetting => "forgetting",
            SignalKind::Boundary => "boundary",
            SignalKind::Rare => "rare",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What steered the exploration that produced a synthesized task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    Forgetting,
    Boundary,
    Rare,
    Unguided,
}

impl From<SignalKind> for SignalSource {
    fn from(k: SignalKind) -> Self {
        match k {
            SignalKind::Forgetting => SignalSource::Forgetting,
            SignalKind::Boundary => SignalSource::Boundary,
            SignalKind::Rare => SignalSource::Rare,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub query: String,
    pub env_seed: u64,
    pub goal_id: GoalId,
    pub origin: Origin,
    /// `None` for initial tasks; synthesized tasks always carry a source.
    pub source_signal: Option<SignalSource>,
    pub created_at_step: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.origin == Origin::Synthesized && self.source_signal.is_none() {
            return Err(Error::domain(format!(
                "synthesized task {} lacks a source signal",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// A structured action: a tool name plus ordered argument tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<String>,
}

impl Action {
    pub fn tool(name: impl Into<String>) -> Self {
        Self {
            tool: name.into(),
            args: Vec::new(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tool)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':' | '/'))
}

impl FromStr for Action {
    type Err = Error;

    /// Parses `tool arg1 arg2 ...`; the tool name must start with a letter.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let tool = parts.next().ok_or_else(|| Error::domain("empty action"))?;
        if !tool.starts_with(|c: char| c.is_ascii_alphabetic()) || !is_token(tool) {
            return Err(Error::domain(format!("malformed tool name `{tool}`")));
        }
        let args: Vec<String> = parts.map(str::to_string).collect();
        if let Some(bad) = args.iter().find(|a| !is_token(a)) {
            return Err(Error::domain(format!("malformed argument `{bad}`")));
        }
        Ok(Action {
            tool: tool.to_string(),
            args,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    pub observation: String,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Goal,
    StepLimit,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: TrajId,
    pub task_id: TaskId,
    pub steps: Vec<Step>,
    pub raw_reward: f64,
    pub score: f64,
    pub group_index: usize,
    pub train_step: usize,
    pub terminated_by: TerminatedBy,
}

impl Trajectory {
    pub fn validate(&self, max_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::domain(format!("score {} outside [0,1]", self.score)));
        }
        if self.terminated_by == TerminatedBy::StepLimit && self.raw_reward != 0.0 {
            return Err(Error::domain(
                "step-limit termination must carry zero reward",
            ));
        }
        if self.steps.len() > max_steps {
            return Err(Error::domain(format!(
                "{} steps exceed the cap of {max_steps}",
                self.steps.len()
            )));
        }
        if self
            .steps
            .windows(2)
            .any(|w| w[1].step_index <= w[0].step_index)
        {
            return Err(Error::domain("step indices must be strictly increasing"));
        }
        Ok(())
    }

    pub fn tool_names(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.action.tool.as_str())
    }
}

/// An ordered run of tool names used as the unit of rarity counting.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pattern(pub Vec<String>);

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}

/// Kind-specific proof that a detector fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Forgetting {
        prior_score: f64,
        current_score: f64,
    },
    Boundary {
        success_index: usize,
        success_score: f64,
        failure_index: usize,
        failure_score: f64,
    },
    Rare {
        pattern: Pattern,
        count: u64,
        total: u64,
    },
}

impl Evidence {
    pub fn kind(&self) -> SignalKind {
        match self {
            Evidence::Forgetting { .. } => SignalKind::Forgetting,
            Evidence::Boundary { .. } => SignalKind::Boundary,
            Evidence::Rare { .. } => SignalKind::Rare,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAnnotation {
    pub traj_id: TrajId,
    pub task_id: TaskId,
    pub evidence: Evidence,
    pub detected_at_step: usize,
}

impl SignalAnnotation {
    pub fn kind(&self) -> SignalKind {
        self.evidence.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationTriplet {
    pub action: Action,
    pub observation: String,
    pub rollout_id: RolloutId,
    pub source_task_id: TaskId,
    pub step_index: usize,
}

/// An abstracted candidate task awaiting validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSolutionPair {
    pub query: String,
    pub goal_id: GoalId,
    pub action_sequence: Vec<Action>,
    pub source_task_id: TaskId,
    pub source_signal: SignalSource,
}

/// Minimum length of an abstracted action sequence.
pub const MIN_ABSTRACT_STEPS: usize = 3;

/// Maps a raw reward onto `[0, 1]` by clamping.
pub fn normalize_score(raw_reward: f64) -> Result<f64> {
    if !raw_reward.is_finite() {
        return Err(Error::domain(format!("non-finite reward {raw_reward}")));
    }
    Ok(raw_reward.clamp(0.0, 1.0))
}

/// Encodes any record as one JSON line (no trailing newline).
pub fn encode_record<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

pub fn decode_record<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T> {
    Ok(serde_json::from_str(line)?)
}

pub fn encode_trajectory(t: &Trajectory) -> Result<String> {
    encode_record(t)
}

pub fn decode_trajectory(line: &str) -> Result<Trajectory> {
    decode_record(line)
}
