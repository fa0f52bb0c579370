//! Step-level GRPO.
//!
//! The policy is a table of logits indexed by a hashed state bucket (target
//! resource plus current inventory) and a tool index; action probabilities
//! are `softmax(theta[bucket, .] / temperature)`. For a group of `K`
//! trajectories sampled from one task, the objective is
//!
//! ```text
//! J = 1/sum_k |tau_k| * sum_k sum_t [ min(r A_k, clip(r, 1-eps_lo, 1+eps_hi) A_k) - beta * kl_t ]
//! r    = pi(a|s) / pi_old(a|s)
//! kl_t = rho - ln(rho) - 1,   rho = pi_ref(a|s) / pi(a|s)
//! ```
//!
//! with `A_k` the group z-scored reward. The gradient is computed in closed
//! form; see [`grpo_gradient`].

use std::collections::BTreeMap;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, ResourceSet};
use crate::error::{Error, Result};
use crate::model::{
    normalize_score, Action, RunConfig, Step, TaskSpec, TerminatedBy, TrajId, Trajectory,
};
use crate::seed;

/// Temperatures at or below this sample greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    num_buckets: usize,
    num_actions: usize,
    pub temperature: f64,
    params: Vec<f64>,
}

impl Policy {
    /// All-zero logits: the uniform policy.
    pub fn new(num_buckets: usize, num_actions: usize, temperature: f64) -> Self {
        assert!(num_buckets > 0 && num_actions > 0);
        Self {
            num_buckets,
            num_actions,
            temperature,
            params: vec![0.0; num_buckets * num_actions],
        }
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hashes (target resource, inventory) into a bucket.
    pub fn bucket(&self, goal: Option<usize>, owned: ResourceSet) -> usize {
        let g = goal.map_or(0, |g| g as u64 + 1);
        (seed::derive(g, &[owned.0]) % self.num_buckets as u64) as usize
    }

    pub fn logits(&self, bucket: usize) -> &[f64] {
        &self.params[bucket * self.num_actions..(bucket + 1) * self.num_actions]
    }

    pub fn probs_at(&self, bucket: usize, temperature: f64) -> Vec<f64> {
        softmax(self.logits(bucket), temperature)
    }

    pub fn probs(&self, bucket: usize) -> Vec<f64> {
        self.probs_at(bucket, self.temperature)
    }

    pub fn log_prob_at(&self, bucket: usize, action: usize, temperature: f64) -> f64 {
        log_softmax_at(self.logits(bucket), action, temperature)
    }

    pub fn log_prob(&self, bucket: usize, action: usize) -> f64 {
        self.log_prob_at(bucket, action, self.temperature)
    }

    /// Argmax with ties resolved toward the lowest index.
    pub fn greedy(&self, bucket: usize) -> usize {
        let l = self.logits(bucket);
        let mut best = 0;
        for (i, &v) in l.iter().enumerate().skip(1) {
            if v > l[best] {
                best = i;
            }
        }
        best
    }

    pub fn apply(&mut self, grad: &Gradient, step_size: f64) {
        for (&b, row) in &grad.rows {
            let dst = &mut self.params[b * self.num_actions..(b + 1) * self.num_actions];
            for (p, g) in dst.iter_mut().zip(row) {
                *p += step_size * g;
            }
        }
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        let rows = (0..self.num_buckets)
            .filter_map(|b| {
                let l = self.logits(b);
                l.iter().any(|&v| v != 0.0).then(|| (b, l.to_vec()))
            })
            .collect();
        PolicyCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            num_buckets: self.num_buckets,
            num_actions: self.num_actions,
            temperature: self.temperature,
            rows,
        }
    }

    pub fn from_checkpoint(c: &PolicyCheckpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::domain(format!(
                "unsupported checkpoint format `{}`",
                c.format
            )));
        }
        let mut p = Policy::new(c.num_buckets, c.num_actions, c.temperature);
        for (&b, row) in &c.rows {
            if b >= c.num_buckets || row.len() != c.num_actions {
                return Err(Error::domain(format!("checkpoint row {b} out of shape")));
            }
            p.params[b * c.num_actions..(b + 1) * c.num_actions].copy_from_slice(row);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "coevolve-policy-v1";

/// Sparse on-disk policy: only buckets with a nonzero logit are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub num_buckets: usize,
    pub num_actions: usize,
    pub temperature: f64,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(logits: &[f64], a: usize, temperature: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| ((l - m) / temperature).exp()).sum();
    (logits[a] - m) / temperature - z.ln()
}

/// Frozen policy used as `pi_ref`.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<Policy>);

impl PolicySnapshot {
    pub fn capture(p: &Policy) -> Self {
        Self(Arc::new(p.clone()))
    }
}

impl Deref for PolicySnapshot {
    type Target = Policy;
    fn deref(&self) -> &Policy {
        &self.0
    }
}

/// One sampled decision with its behaviour-policy log-probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub bucket: usize,
    pub action: usize,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub task: TaskSpec,
    pub trajectories: Vec<SampledTrajectory>,
    /// Empty until [`GroupBatch::compute_advantages`] runs.
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| t.trajectory.raw_reward)
            .collect()
    }

    pub fn compute_advantages(&mut self, eps_std: f64) -> Result<()> {
        self.advantages = group_advantages(&self.rewards(), eps_std)?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.decisions.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoParams {
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coeff: f64,
}

impl From<&RunConfig> for GrpoParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            clip_low: c.clip_low,
            clip_high: c.clip_high,
            kl_coeff: c.kl_coeff,
        }
    }
}

/// `(R_k - mean) / (std_pop + eps)`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain(
            "group-relative advantages need at least 2 rewards",
        ));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + eps_std))
        .collect())
}

/// Per-step terms shared by the objective and the gradient.
struct StepTerms {
    surrogate: f64,
    kl: f64,
    /// d(surrogate - beta*kl)/d log pi(a|s).
    coef: f64,
}

fn step_terms(
    d: &Decision,
    adv: f64,
    current: &Policy,
    reference: &Policy,
    p: &GrpoParams,
) -> StepTerms {
    let lp = current.log_prob(d.bucket, d.action);
    let ref_lp = reference.log_prob_at(d.bucket, d.action, current.temperature);
    let r = (lp - d.old_log_prob).exp();
    let (lo, hi) = (1.0 - p.clip_low, 1.0 + p.clip_high);
    let surrogate = (r * adv).min(r.clamp(lo, hi) * adv);
    // The unclipped branch is the one selected by the min unless the ratio
    // has left the trust region in the advantage's favourable direction.
    let unclipped = if adv >= 0.0 { r <= hi } else { r >= lo };
    let log_rho = ref_lp - lp;
    let rho = log_rho.exp();
    let kl = rho - log_rho - 1.0;
    let surr_coef = if unclipped { adv * r } else { 0.0 };
    StepTerms {
        surrogate,
        kl,
        coef: surr_coef - p.kl_coeff * (1.0 - rho),
    }
}

fn check_batch(batch: &GroupBatch) -> Result<usize> {
    if batch.advantages.len() != batch.trajectories.len() {
        return Err(Error::domain("advantages not computed for this batch"));
    }
    let total = batch.total_steps();
    if total == 0 {
        return Err(Error::domain("batch has zero total steps"));
    }
    if batch
        .trajectories
        .iter()
        .flat_map(|t| &t.decisions)
        .any(|d| !d.old_log_prob.is_finite())
    {
        return Err(Error::domain("non-finite behaviour log-probability"));
    }
    Ok(total)
}

pub fn grpo_objective(
    batch: &GroupBatch,
    current: &Policy,
    reference: &PolicySnapshot,
    params: &GrpoParams,
) -> Result<f64> {
    let total = check_batch(batch)?;
    let mut sum = 0.0;
    for (t, &adv) in batch.trajectories.iter().zip(&batch.advantages) {
        for d in &t.decisions {
            let s = step_terms(d, adv, current, reference, params);
            sum += s.surrogate - params.kl_coeff * s.kl;
        }
    }
    Ok(sum / total as f64)
}

/// Per-step KL estimate `rho - ln(rho) - 1`; exposed for property tests.
pub fn kl_estimate(current_log_prob: f64, ref_log_prob: f64) -> f64 {
    let log_rho = ref_log_prob - current_log_prob;
    log_rho.exp() - log_rho - 1.0
}

/// Sparse gradient keyed by bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl Gradient {
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (&b, row) in &other.rows {
            let dst = self.rows.entry(b).or_insert_with(|| vec![0.0; row.len()]);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn get(&self, bucket: usize, action: usize) -> f64 {
        self.rows.get(&bucket).map_or(0.0, |r| r[action])
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Exact gradient of [`grpo_objective`] with `pi_old`, `pi_ref` and the
/// advantages held constant.
///
/// Every per-step term depends on theta only through `log pi(a|s)`, whose
/// derivative w.r.t. `theta[s, j]` is `(1[j = a] - pi(j|s)) / T`. The
/// surrogate contributes `A r` per unit of log-probability on its unclipped
/// branch and nothing on the clipped one; the KL estimator contributes
/// `-beta (1 - rho)`.
pub fn grpo_gradient(
    batch: &GroupBatch,
    current: &Policy,
    reference: &PolicySnapshot,
    params: &GrpoParams,
) -> Result<Gradient> {
    let total = check_batch(batch)?;
    let scale = 1.0 / total as f64;
    let temp = current.temperature;
    let mut grad = Gradient::default();
    for (t, &adv) in batch.trajectories.iter().zip(&batch.advantages) {
        for d in &t.decisions {
            let s = step_terms(d, adv, current, reference, params);
            if s.coef == 0.0 {
                continue;
            }
            let probs = current.probs(d.bucket);
            let row = grad
                .rows
                .entry(d.bucket)
                .or_insert_with(|| vec![0.0; current.num_actions()]);
            let c = s.coef * scale / temp;
            for (j, pj) in probs.iter().enumerate() {
                let ind = if j == d.action { 1.0 } else { 0.0 };
                row[j] += c * (ind - pj);
            }
        }
    }
    Ok(grad)
}

fn choose_action<R: Rng>(
    policy: &Policy,
    bucket: usize,
    temperature: f64,
    rng: &mut R,
) -> (usize, f64) {
    if temperature <= GREEDY_TEMPERATURE {
        return (policy.greedy(bucket), 0.0);
    }
    let probs = policy.probs_at(bucket, temperature);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut choice = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            choice = i;
            break;
        }
    }
    (choice, policy.log_prob_at(bucket, choice, temperature))
}

/// Runs one episode of `task` under `policy`.
pub fn rollout(
    policy: &Policy,
    env: &Env,
    task: &TaskSpec,
    temperature: f64,
    seed: u64,
    group_index: usize,
    train_step: usize,
) -> Result<SampledTrajectory> {
    let mut state = env.reset(task)?;
    let mut rng = seed::rng(seed);
    let mut steps = Vec::new();
    let mut decisions = Vec::new();
    let mut reward = 0.0;
    while !state.done {
        let bucket = policy.bucket(state.goal, state.owned);
        let (action, log_prob) = choose_action(policy, bucket, temperature, &mut rng);
        let out = env.step_tool(&mut state, action)?;
        reward += out.reward;
        steps.push(Step {
            action: Action::tool(env.tool_name(action)),
            observation: out.observation,
            step_index: steps.len(),
        });
        decisions.push(Decision {
            bucket,
            action,
            old_log_prob: log_prob,
        });
    }
    let raw_reward = if state.succeeded { reward } else { 0.0 };
    let trajectory = Trajectory {
        traj_id: TrajId::new(format!("{}@{}#{}", task.task_id, train_step, group_index)),
        task_id: task.task_id.clone(),
        steps,
        raw_reward,
        score: normalize_score(raw_reward)?,
        group_index,
        train_step,
        terminated_by: if state.succeeded {
            TerminatedBy::Goal
        } else {
            TerminatedBy::StepLimit
        },
    };
    Ok(SampledTrajectory {
        trajectory,
        decisions,
    })
}

/// Samples `k` independent episodes. Episode `i` uses a generator derived
/// from `(seed, i)`.
pub fn sample_group(
    policy: &Policy,
    env: &Env,
    task: &TaskSpec,
    k: usize,
    temperature: f64,
    seed: u64,
    train_step: usize,
) -> Result<GroupBatch> {
    let trajectories = (0..k)
        .map(|i| {
            rollout(
                policy,
                env,
                task,
                temperature,
                seed::derive(seed, &[i as u64]),
                i,
                train_step,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupBatch {
        task: task.clone(),
        trajectories,
        advantages: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub groups: Vec<GroupBatch>,
    /// Mean per-group objective at the pre-update parameters.
    pub objective: f64,
}

/// Samples one group per task, then takes a single ascent step on the
/// batch-averaged objective. Groups are sampled in parallel; the gradient is
/// reduced in task order so the update is independent of scheduling.
pub fn train_iteration(
    policy: &mut Policy,
    reference: &PolicySnapshot,
    env: &Env,
    tasks: &[TaskSpec],
    config: &RunConfig,
    seed: u64,
    train_step: usize,
) -> Result<IterationOutcome> {
    if tasks.is_empty() {
        return Err(Error::domain("empty task batch"));
    }
    let params = GrpoParams::from(config);
    let current: &Policy = policy;
    let results: Vec<(GroupBatch, Gradient, f64)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut g = sample_group(
                current,
                env,
                task,
                config.group_size,
                current.temperature,
                seed::derive(seed, &[i as u64]),
                train_step,
            )?;
            g.compute_advantages(config.adv_epsilon)?;
            let grad = grpo_gradient(&g, current, reference, &params)?;
            let obj = grpo_objective(&g, current, reference, &params)?;
            Ok((g, grad, obj))
        })
        .collect::<Result<_>>()?;

    let n = results.len() as f64;
    let mut total = Gradient::default();
    let mut objective = 0.0;
    let mut groups = Vec::with_capacity(results.len());
    for (g, grad, obj) in results {
        total.add_scaled(&grad, 1.0 / n);
        objective += obj / n;
        groups.push(g);
    }
    policy.apply(&total, config.learning_rate);
    Ok(IterationOutcome { groups, objective })
}

/// Success rate of `policy` over `tasks`, one episode each.
pub fn evaluate(
    policy: &Policy,
    env: &Env,
    tasks: &[TaskSpec],
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::domain("no evaluation tasks"));
    }
    let wins = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            rollout(
                policy,
                env,
                t,
                temperature,
                seed::derive(seed, &[i as u64]),
                0,
                0,
            )
            .map(|r| usize::from(r.trajectory.terminated_by == TerminatedBy::Goal))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wins as f64 / tasks.len() as f64)
}
