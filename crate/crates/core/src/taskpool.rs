//! The evolving task set.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::explorer::{explore_unguided, ExplorationBackend};
use crate::metrics::Embedder;
use crate::model::{Origin, RunConfig, SignalSource, TaskId, TaskSolutionPair, TaskSpec};
use crate::seed;
use crate::signals::{HistoryStore, ScoreHistory};
use crate::synthesis::{
    admit, aggregate_triplets, validate_all, Abstractor, ReplayExecutor, Verdict,
};

/// Tasks only ever grow; ids are never reused.
#[derive(Debug, Clone)]
pub struct TaskPool {
    env_seed: u64,
    window: usize,
    tasks: Vec<TaskSpec>,
    index: BTreeMap<TaskId, usize>,
    embeddings: Vec<Vec<f64>>,
    verdicts: BTreeMap<TaskId, Verdict>,
    histories: BTreeMap<TaskId, ScoreHistory>,
}

/// Serialized pool state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub step: usize,
    pub tasks: Vec<TaskSpec>,
    pub verdicts: BTreeMap<TaskId, Verdict>,
}

impl TaskPool {
    pub fn new(env_seed: u64, window: usize) -> Self {
        Self {
            env_seed,
            window,
            tasks: Vec::new(),
            index: BTreeMap::new(),
            embeddings: Vec::new(),
            verdicts: BTreeMap::new(),
            histories: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn get(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    /// Query embeddings, aligned with [`TaskPool::tasks`].
    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn verdict(&self, id: &TaskId) -> Option<Verdict> {
        self.verdicts.get(id).copied()
    }

    /// Adds a validated candidate under a fresh id.
    pub fn append(
        &mut self,
        pair: &TaskSolutionPair,
        origin: Origin,
        source_signal: Option<SignalSource>,
        step: usize,
        embedding: Vec<f64>,
        verdict: Verdict,
    ) -> Result<TaskSpec> {
        if !verdict.is_admissible() {
            return Err(Error::domain(format!(
                "refusing to pool a rejected candidate: {}",
                pair.query
            )));
        }
        let spec = TaskSpec {
            task_id: TaskId::new(format!("task-{:05}", self.tasks.len())),
            query: pair.query.clone(),
            env_seed: self.env_seed,
            goal_id: pair.goal_id.clone(),
            origin,
            source_signal,
            created_at_step: step,
        };
        spec.validate()?;
        self.index.insert(spec.task_id.clone(), self.tasks.len());
        self.verdicts.insert(spec.task_id.clone(), verdict);
        self.tasks.push(spec.clone());
        self.embeddings.push(embedding);
        Ok(spec)
    }

    /// Appends `score` to the task's window, evicting the oldest past `W`.
    pub fn record_score(&mut self, id: &TaskId, score: f64) -> Result<&ScoreHistory> {
        if !self.index.contains_key(id) {
            return Err(Error::domain(format!("unknown task {id}")));
        }
        let window = self.window;
        let h = self
            .histories
            .entry(id.clone())
            .or_insert_with(|| ScoreHistory::new(id.clone(), window));
        h.push(score);
        Ok(h)
    }

    pub fn snapshot(&self, step: usize) -> PoolSnapshot {
        PoolSnapshot {
            step,
            tasks: self.tasks.clone(),
            verdicts: self.verdicts.clone(),
        }
    }

    pub fn save_snapshot(&self, path: &Path, step: usize) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.snapshot(step))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl HistoryStore for TaskPool {
    fn history(&self, id: &TaskId) -> Option<&ScoreHistory> {
        self.histories.get(id)
    }

    fn record(&mut self, id: &TaskId, score: f64) -> Result<()> {
        self.record_score(id, score).map(|_| ())
    }
}

/// Uniform sample without replacement, or with replacement when the batch
/// is larger than the pool.
pub fn sample_batch(pool: &TaskPool, batch_size: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if pool.is_empty() {
        return Err(Error::domain("cannot sample from an empty pool"));
    }
    let mut rng = seed::rng(seed);
    let n = pool.len();
    let picks: Vec<usize> = if batch_size <= n {
        index::sample(&mut rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    };
    Ok(picks.into_iter().map(|i| pool.tasks[i].clone()).collect())
}

/// Rollouts launched per unguided exploration batch.
pub const INIT_BATCH_ROLLOUTS: usize = 16;

/// Builds the initial pool from unguided exploration. Batches of rollouts
/// are abstracted, validated and deduplicated until the pool holds
/// `config.init_pool_size` tasks or `config.init_explore_budget` rollouts
/// have been spent.
pub fn init_pool(
    env: &Env,
    config: &RunConfig,
    backend: &dyn ExplorationBackend,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<TaskPool> {
    let target = config.init_pool_size;
    if target == 0 {
        return Err(Error::config("init_pool_size", "must be at least 1"));
    }
    let mut pool = TaskPool::new(env.spec().seed, config.window_size);
    let mut spent = 0;
    let mut batch = 0u64;
    while pool.len() < target {
        if spent >= config.init_explore_budget {
            return Err(Error::domain(format!(
                "initial pool reached only {} of {target} tasks after {spent} exploration rollouts",
                pool.len()
            )));
        }
        let rounds = INIT_BATCH_ROLLOUTS.min(config.init_explore_budget - spent);
        let source = TaskId::new(format!("unguided-{batch:04}"));
        let run = explore_unguided(
            env,
            &source,
            rounds,
            config.exploration_steps(),
            backend,
            seed::derive(seed, &[batch]),
        )?;
        spent += rounds;
        batch += 1;
        let mut pairs = Vec::new();
        for rollouts in aggregate_triplets(&run.triplets).values() {
            pairs.extend(crate::synthesis::abstract_tasks(
                rollouts,
                env,
                &source,
                SignalSource::Unguided,
                &Abstractor::RuleBased,
            )?);
        }
        let records = validate_all(&pairs, env, &ReplayExecutor);
        admit(
            &records,
            &mut pool,
            embedder,
            config.dedup_threshold,
            0,
            Origin::Initial,
            Some(target),
        )?;
    }
    Ok(pool)
}
