//! The closed training loop, its run log and the report derived from it.
//!
//! Every `gen_frequency` training steps the loop drains the signals seen
//! since the previous phase, re-explores around them, abstracts and
//! validates candidate tasks, and grows the pool. Held-out tasks are drawn
//! from their own seed stream and never enter the pool.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{generate_env, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::explorer::{
    build_context, explore, explore_task, remote_backend, scripted_backend, ExplorationBackend,
    HttpTransport, Summarizer,
};
use crate::grpo::{evaluate, train_iteration, Policy, PolicySnapshot};
use crate::metrics::{
    default_embedder, ed_rel, max_similarity_distribution, project_2d, sr_at_k, Embedder,
    SimilarityHistogram,
};
use crate::model::{
    encode_trajectory, GoalId, Origin, RunConfig, SignalAnnotation, SignalKind, SignalSource,
    TaskId, TaskSolutionPair, TaskSpec, Trajectory,
};
use crate::seed;
use crate::signals::{extract_signals, PatternStats, SignalCounts, SignalParams};
use crate::synthesis::{
    abstract_tasks, aggregate_triplets, evolve_pool, phrase_query, validate_all, Abstractor,
    ReplayExecutor, Verdict,
};
use crate::taskpool::{init_pool, sample_batch, PoolSnapshot, TaskPool};

/// Parses a TOML config; absent keys take their defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Signal-guided re-exploration every phase.
    Coevolve,
    /// Training on the initial pool only.
    GrpoStatic,
    /// Unguided exploration every phase, same budget.
    RandomExplore,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Coevolve, Mode::GrpoStatic, Mode::RandomExplore];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Coevolve => "coevolve",
            Mode::GrpoStatic => "grpo-static",
            Mode::RandomExplore => "random-explore",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "coevolve" => Ok(Mode::Coevolve),
            "grpo-static" => Ok(Mode::GrpoStatic),
            "random-explore" => Ok(Mode::RandomExplore),
            _ => Err(Error::domain(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Scripted,
    Remote { endpoint: String, model: String },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    /// Where logs, snapshots and the checkpoint go; `None` keeps the log in memory only.
    pub out_dir: Option<PathBuf>,
    pub backend: BackendChoice,
}

impl RunOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            out_dir: None,
            backend: BackendChoice::Scripted,
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    RunStart {
        mode: Mode,
        config: RunConfig,
        env: EnvSpec,
        heldout: Vec<TaskSpec>,
        initial_pool_size: usize,
    },
    Eval {
        step: usize,
        success_rate: f64,
    },
    Iteration {
        step: usize,
        objective: f64,
        mean_reward: f64,
        signals: SignalCounts,
        pool_size: usize,
    },
    /// Signals accumulated since the previous phase.
    Window {
        step: usize,
        signals: SignalCounts,
    },
    Verdict {
        step: usize,
        source_task_id: TaskId,
        source_signal: SignalSource,
        goal_id: GoalId,
        query: String,
        verdict: Verdict,
        cumulative_reward: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pooled_as: Option<TaskId>,
    },
    Evolution {
        step: usize,
        contexts: usize,
        rollouts: usize,
        failed_rounds: usize,
        triplets: usize,
        candidates: usize,
        admissible: usize,
        appended: usize,
        duplicates: usize,
        pass_rate: Option<f64>,
        pool_size: usize,
        sr_at_k: Option<f64>,
        ed_rel: Option<f64>,
        histogram: Option<SimilarityHistogram>,
        pool_projection: Vec<[f64; 2]>,
    },
    RunEnd {
        step: usize,
        final_success: f64,
        pool_size: usize,
    },
    Aborted {
        iteration: usize,
        error: String,
    },
}

struct RunLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl RunLog {
    fn new(path: Option<PathBuf>) -> Result<Self> {
        let file = match &path {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        Ok(Self {
            lines: Vec::new(),
            file,
            path,
        })
    }

    fn push(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        if let (Some(f), Some(p)) = (&mut self.file, &self.path) {
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let (Some(f), Some(p)) = (&mut self.file, &self.path) {
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Everything a run produces besides files on disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub log: Vec<String>,
    pub final_pool: PoolSnapshot,
}

impl RunOutput {
    pub fn final_success(&self) -> f64 {
        self.report.final_success.unwrap_or(0.0)
    }
}

mod stream {
    pub const ENV: u64 = 1;
    pub const HELDOUT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EXPLORE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const EMBED: u64 = 8;
    pub const PROJECT: u64 = 9;
}

/// Goal of every held-out task has a shortest solution of at least this length.
pub const HELDOUT_MIN_LENGTH: usize = 3;

pub fn build_env(config: &RunConfig) -> Result<Env> {
    let mut spec = generate_env(
        seed::derive(config.seed, &[stream::ENV]),
        config.num_tools,
        config.max_chain_depth,
    )?;
    spec.max_steps = config.max_steps;
    Env::new(spec)
}

/// Evaluation tasks on a seed stream disjoint from pool construction.
pub fn heldout_tasks(env: &Env, config: &RunConfig) -> Result<Vec<TaskSpec>> {
    let goals = env.goals_with_min_length(HELDOUT_MIN_LENGTH);
    if goals.is_empty() {
        return Err(Error::domain(format!(
            "environment has no goal needing {HELDOUT_MIN_LENGTH} or more steps"
        )));
    }
    let stream_seed = seed::derive(config.seed, &[stream::HELDOUT]);
    let mut rng = seed::rng(stream_seed);
    Ok((0..config.eval_tasks)
        .map(|i| {
            let goal = goals[rng.gen_range(0..goals.len())].clone();
            let resource = env.resource_name(env.goal_resource(&goal).expect("listed goal"));
            TaskSpec {
                task_id: TaskId::new(format!("heldout-{i:04}")),
                query: phrase_query(resource, seed::derive(stream_seed, &[i as u64])),
                env_seed: env.spec().seed,
                goal_id: goal,
                origin: Origin::Initial,
                source_signal: None,
                created_at_step: 0,
            }
        })
        .collect())
}

struct Outputs {
    dir: Option<PathBuf>,
    trajectories: Option<BufWriter<File>>,
}

impl Outputs {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        let trajectories = match &dir {
            Some(d) => {
                std::fs::create_dir_all(d.join("pools")).map_err(|e| Error::io(d, e))?;
                let p = d.join("trajectories.ndjson");
                Some(BufWriter::new(
                    File::create(&p).map_err(|e| Error::io(&p, e))?,
                ))
            }
            None => None,
        };
        Ok(Self { dir, trajectories })
    }

    fn trajectory(&mut self, t: &Trajectory) -> Result<()> {
        if let (Some(w), Some(d)) = (&mut self.trajectories, &self.dir) {
            writeln!(w, "{}", encode_trajectory(t)?)
                .map_err(|e| Error::io(d.join("trajectories.ndjson"), e))?;
        }
        Ok(())
    }

    fn pool(&self, pool: &TaskPool, step: usize) -> Result<()> {
        if let Some(d) = &self.dir {
            pool.save_snapshot(
                &d.join("pools").join(format!("pool-step-{step:04}.json")),
                step,
            )?;
        }
        Ok(())
    }

    fn finish(&mut self, policy: &Policy, env: &Env, report: &RunReport) -> Result<()> {
        if let Some(w) = &mut self.trajectories {
            w.flush().map_err(|e| Error::io("trajectories.ndjson", e))?;
        }
        if let Some(d) = &self.dir {
            policy.save(&d.join("policy.json"))?;
            env.spec().save(&d.join("env.json"))?;
            let p = d.join("report.json");
            std::fs::write(&p, serde_json::to_string_pretty(report)? + "\n")
                .map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Runs the configured loop end to end.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let env = build_env(config)?;
    let embedder = default_embedder(
        config.embed_dim,
        seed::derive(config.seed, &[stream::EMBED]),
    )?;
    let heldout = heldout_tasks(&env, config)?;

    let transport = match &options.backend {
        BackendChoice::Scripted => None,
        BackendChoice::Remote { endpoint, model } => Some(HttpTransport::new(endpoint, model)),
    };
    let scripted = scripted_backend(&env, config.noise_rate)?;
    let remote = transport.clone().map(remote_backend);
    let backend: &dyn ExplorationBackend = match &remote {
        Some(r) => r,
        None => &scripted,
    };
    let (summarizer, abstractor) = match &transport {
        Some(t) => (Summarizer::Remote(t), Abstractor::Remote(t)),
        None => (Summarizer::RuleBased, Abstractor::RuleBased),
    };

    let mut outputs = Outputs::new(options.out_dir.clone())?;
    let mut log = RunLog::new(options.out_dir.as_ref().map(|d| d.join("run.ndjson")))?;

    let pool = init_pool(
        &env,
        config,
        backend,
        &embedder,
        seed::derive(config.seed, &[stream::INIT]),
    )?;
    log.push(&LogRecord::RunStart {
        mode: options.mode,
        config: config.clone(),
        env: env.spec().clone(),
        heldout: heldout.clone(),
        initial_pool_size: pool.len(),
    })?;
    outputs.pool(&pool, 0)?;

    let mut state = LoopState {
        config,
        mode: options.mode,
        env: &env,
        embedder: &embedder,
        heldout: &heldout,
        heldout_embeddings: heldout.iter().map(|t| embedder.embed(&t.query)).collect(),
        initial_len: pool.len(),
        pool,
        policy: Policy::new(
            config.policy_buckets,
            env.num_tools(),
            config.rollout_temperature,
        ),
        patterns: PatternStats::default(),
        latest: BTreeMap::new(),
        window: SignalCounts::default(),
        backend,
        summarizer: &summarizer,
        abstractor: &abstractor,
    };
    let reference = PolicySnapshot::capture(&state.policy);

    let result = state.drive(&reference, &mut log, &mut outputs);
    if let Err(Error::RunAborted { iteration, source }) = &result {
        log.push(&LogRecord::Aborted {
            iteration: *iteration,
            error: source.to_string(),
        })?;
    }
    log.flush()?;
    result?;

    let (report, _) = build_report(&log.lines, None);
    outputs.finish(&state.policy, &env, &report)?;
    Ok(RunOutput {
        report,
        log: log.lines,
        final_pool: state.pool.snapshot(config.total_steps),
    })
}

struct LoopState<'a> {
    config: &'a RunConfig,
    mode: Mode,
    env: &'a Env,
    embedder: &'a dyn Embedder,
    heldout: &'a [TaskSpec],
    heldout_embeddings: Vec<Vec<f64>>,
    initial_len: usize,
    pool: TaskPool,
    policy: Policy,
    patterns: PatternStats,
    /// Latest annotation per (task, kind) since the previous phase.
    latest: BTreeMap<(TaskId, SignalKind), (SignalAnnotation, Trajectory)>,
    window: SignalCounts,
    backend: &'a dyn ExplorationBackend,
    summarizer: &'a Summarizer<'a>,
    abstractor: &'a Abstractor<'a>,
}

fn aborted(iteration: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::RunAborted {
        iteration,
        source: Box::new(e),
    }
}

impl LoopState<'_> {
    fn evaluate(&self, step: usize, log: &mut RunLog) -> Result<f64> {
        let rate = evaluate(
            &self.policy,
            self.env,
            self.heldout,
            self.config.eval_temperature,
            seed::derive(self.config.seed, &[stream::EVAL, step as u64]),
        )
        .map_err(aborted(step))?;
        log.push(&LogRecord::Eval {
            step,
            success_rate: rate,
        })?;
        Ok(rate)
    }

    fn drive(
        &mut self,
        reference: &PolicySnapshot,
        log: &mut RunLog,
        outputs: &mut Outputs,
    ) -> Result<()> {
        let config = self.config;
        let params = SignalParams::from(config);
        let mut last = self.evaluate(0, log)?;
        for step in 1..=config.total_steps {
            let batch = sample_batch(
                &self.pool,
                config.batch_size,
                seed::derive(config.seed, &[stream::SAMPLE, step as u64]),
            )
            .map_err(aborted(step))?;
            let out = train_iteration(
                &mut self.policy,
                reference,
                self.env,
                &batch,
                config,
                seed::derive(config.seed, &[stream::TRAIN, step as u64]),
                step,
            )
            .map_err(aborted(step))?;
            let groups: Vec<Vec<Trajectory>> = out
                .groups
                .iter()
                .map(|g| {
                    g.trajectories
                        .iter()
                        .map(|t| t.trajectory.clone())
                        .collect()
                })
                .collect();
            let annotations =
                extract_signals(&groups, &mut self.pool, &mut self.patterns, &params, step)
                    .map_err(aborted(step))?;
            let counts = SignalCounts::tally(&annotations);
            self.window.add(&counts);

            let by_id: BTreeMap<_, _> = groups
                .iter()
                .flatten()
                .map(|t| (t.traj_id.clone(), t))
                .collect();
            if config.log_all_trajectories {
                for t in groups.iter().flatten() {
                    outputs.trajectory(t)?;
                }
            }
            let mut written = std::collections::BTreeSet::new();
            for a in annotations {
                let t = by_id[&a.traj_id];
                if !config.log_all_trajectories && written.insert(a.traj_id.clone()) {
                    outputs.trajectory(t)?;
                }
                self.latest
                    .insert((a.task_id.clone(), a.kind()), (a, (*t).clone()));
            }

            let rewards: Vec<f64> = groups.iter().flatten().map(|t| t.raw_reward).collect();
            log.push(&LogRecord::Iteration {
                step,
                objective: out.objective,
                mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
                signals: counts,
                pool_size: self.pool.len(),
            })?;

            if step % config.gen_frequency == 0 {
                log.push(&LogRecord::Window {
                    step,
                    signals: std::mem::take(&mut self.window),
                })?;
                if step < config.total_steps && self.mode != Mode::GrpoStatic {
                    self.evolve(step, log).map_err(aborted(step))?;
                }
                self.latest.clear();
                outputs.pool(&self.pool, step)?;
                last = self.evaluate(step, log)?;
            } else if step == config.total_steps {
                last = self.evaluate(step, log)?;
            }
        }
        log.push(&LogRecord::RunEnd {
            step: config.total_steps,
            final_success: last,
            pool_size: self.pool.len(),
        })?;
        Ok(())
    }

    /// Up to `budget` annotations, alternating between signal kinds; within
    /// a kind the most recent first.
    fn select(&self) -> Vec<(SignalAnnotation, Trajectory)> {
        let mut per_kind: BTreeMap<SignalKind, Vec<&(SignalAnnotation, Trajectory)>> =
            BTreeMap::new();
        for ((_, kind), entry) in &self.latest {
            per_kind.entry(*kind).or_default().push(entry);
        }
        for list in per_kind.values_mut() {
            list.sort_by(|a, b| {
                b.0.detected_at_step
                    .cmp(&a.0.detected_at_step)
                    .then_with(|| a.0.task_id.cmp(&b.0.task_id))
            });
        }
        let total: usize = per_kind.values().map(Vec::len).sum();
        let budget = total.min(self.config.explore_budget);
        let mut out = Vec::with_capacity(budget);
        let mut depth = 0;
        while out.len() < budget {
            for kind in SignalKind::ALL {
                if let Some(e) = per_kind.get(&kind).and_then(|l| l.get(depth)) {
                    if out.len() < budget {
                        out.push((*e).clone());
                    }
                }
            }
            depth += 1;
        }
        out
    }

    fn evolve(&mut self, step: usize, log: &mut RunLog) -> Result<()> {
        let config = self.config;
        let rounds = config.explore_rounds;
        let steps = config.exploration_steps();
        let base = seed::derive(config.seed, &[stream::EXPLORE, step as u64]);
        let env = self.env;

        let explored: Vec<(crate::explorer::Exploration, Vec<TaskSolutionPair>)> = match self.mode {
            Mode::Coevolve => {
                let selected = self.select();
                let pool = &self.pool;
                selected
                    .par_iter()
                    .enumerate()
                    .map(|(i, (ann, traj))| {
                        let task = pool.get(&ann.task_id).ok_or_else(|| {
                            Error::domain(format!("annotated task {} not pooled", ann.task_id))
                        })?;
                        let ctx = build_context(ann, traj, task, env, self.summarizer)?;
                        let exp = explore(
                            &ctx,
                            env,
                            task,
                            rounds,
                            steps,
                            self.backend,
                            seed::derive(base, &[i as u64]),
                        )?;
                        let pairs = abstract_groups(&exp, env, ann.kind().into(), self.abstractor)?;
                        Ok((exp, pairs))
                    })
                    .collect::<Result<_>>()?
            }
            Mode::RandomExplore => {
                let n = config.explore_budget.min(self.pool.len());
                let tasks = sample_batch(&self.pool, n, seed::derive(base, &[u64::MAX]))?;
                tasks
                    .par_iter()
                    .enumerate()
                    .map(|(i, task)| {
                        let exp = explore_task(
                            env,
                            task,
                            rounds,
                            steps,
                            self.backend,
                            seed::derive(base, &[i as u64]),
                        )?;
                        let pairs =
                            abstract_groups(&exp, env, SignalSource::Unguided, self.abstractor)?;
                        Ok((exp, pairs))
                    })
                    .collect::<Result<_>>()?
            }
            Mode::GrpoStatic => Vec::new(),
        };

        let contexts = explored.len();
        let mut rollouts = 0;
        let mut failed_rounds = 0;
        let mut triplets = 0;
        let mut candidates = Vec::new();
        for (exp, pairs) in explored {
            rollouts += exp
                .triplets
                .iter()
                .map(|t| &t.rollout_id)
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            failed_rounds += exp.failures.len();
            triplets += exp.triplets.len();
            candidates.extend(pairs);
        }

        let records = validate_all(&candidates, env, &ReplayExecutor);
        let update = evolve_pool(
            &records,
            &mut self.pool,
            self.embedder,
            config.dedup_threshold,
            step,
        )?;
        for (rec, pooled) in records.iter().zip(&update.admitted) {
            log.push(&LogRecord::Verdict {
                step,
                source_task_id: rec.pair.source_task_id.clone(),
                source_signal: rec.pair.source_signal,
                goal_id: rec.pair.goal_id.clone(),
                query: rec.pair.query.clone(),
                verdict: rec.verdict,
                cumulative_reward: rec.cumulative_reward,
                pooled_as: pooled.clone(),
            })?;
        }
        let admissible = records.iter().filter(|r| r.verdict.is_admissible()).count();

        let emb = self.pool.embeddings();
        let (initial, synthesized) = emb.split_at(self.initial_len);
        let sr = (emb.len() > config.sr_k)
            .then(|| sr_at_k(emb, config.sr_k))
            .transpose()?;
        let ed = (initial.len() >= 2 && !synthesized.is_empty())
            .then(|| ed_rel(initial, synthesized))
            .transpose()
            .ok()
            .flatten();
        let histogram = (!synthesized.is_empty())
            .then(|| {
                max_similarity_distribution(
                    synthesized,
                    &self.heldout_embeddings,
                    config.histogram_bins,
                )
            })
            .transpose()?;
        log.push(&LogRecord::Evolution {
            step,
            contexts,
            rollouts,
            failed_rounds,
            triplets,
            candidates: records.len(),
            admissible,
            appended: update.appended.len(),
            duplicates: update.duplicates,
            pass_rate: (!records.is_empty()).then(|| admissible as f64 / records.len() as f64),
            pool_size: self.pool.len(),
            sr_at_k: sr,
            ed_rel: ed,
            histogram,
            pool_projection: project_2d(emb, seed::derive(config.seed, &[stream::PROJECT])),
        })
    }
}

fn abstract_groups(
    exp: &crate::explorer::Exploration,
    env: &Env,
    source: SignalSource,
    abstractor: &Abstractor<'_>,
) -> Result<Vec<TaskSolutionPair>> {
    let mut pairs = Vec::new();
    for (task, rollouts) in aggregate_triplets(&exp.triplets) {
        pairs.extend(abstract_tasks(&rollouts, env, &task, source, abstractor)?);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPoint {
    pub step: usize,
    pub signals: SignalCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPoints {
    pub step: usize,
    pub points: Vec<[f64; 2]>,
}

/// Plot-ready series recovered from a run log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    /// Held-out success against training step.
    pub success: Vec<SeriesPoint>,
    pub baseline_success: Vec<SeriesPoint>,
    /// Per-iteration signal counts.
    pub signals: Vec<SignalPoint>,
    /// Signal counts per evolution window.
    pub windows: Vec<SignalPoint>,
    pub pool_sizes: Vec<(usize, usize)>,
    pub pool_snapshots: Vec<PoolPoints>,
    /// Share of validated candidates that were admissible, per phase.
    pub pass_rate: Vec<SeriesPoint>,
    /// Max-similarity histogram of the latest phase that had one.
    pub histogram: Option<SimilarityHistogram>,
    pub final_success: Option<f64>,
    pub warnings: Vec<String>,
}

/// Builds a report from log lines; unparsable lines end the scan.
pub fn build_report(lines: &[String], baseline: Option<&[String]>) -> (RunReport, bool) {
    let mut r = RunReport::default();
    let mut complete = false;
    for (i, line) in lines.iter().enumerate() {
        let rec: LogRecord = match serde_json::from_str(line) {
            Ok(rec) => rec,
            Err(e) => {
                r.warnings
                    .push(format!("log truncated at line {}: {e}", i + 1));
                break;
            }
        };
        match rec {
            LogRecord::RunStart { mode, config, .. } => {
                r.mode = Some(mode);
                r.seed = Some(config.seed);
            }
            LogRecord::Eval { step, success_rate } => r.success.push(SeriesPoint {
                step,
                value: success_rate,
            }),
            LogRecord::Iteration {
                step,
                signals,
                pool_size,
                ..
            } => {
                r.signals.push(SignalPoint { step, signals });
                r.pool_sizes.push((step, pool_size));
            }
            LogRecord::Window { step, signals } => r.windows.push(SignalPoint { step, signals }),
            LogRecord::Verdict { .. } => {}
            LogRecord::Evolution {
                step,
                pass_rate,
                histogram,
                pool_projection,
                ..
            } => {
                if let Some(p) = pass_rate {
                    r.pass_rate.push(SeriesPoint { step, value: p });
                }
                if histogram.is_some() {
                    r.histogram = histogram;
                }
                r.pool_snapshots.push(PoolPoints {
                    step,
                    points: pool_projection,
                });
            }
            LogRecord::RunEnd { final_success, .. } => {
                r.final_success = Some(final_success);
                complete = true;
            }
            LogRecord::Aborted { iteration, error } => {
                r.warnings
                    .push(format!("run aborted at iteration {iteration}: {error}"));
            }
        }
    }
    if !complete {
        r.warnings
            .push("run log has no end record; report is partial".into());
    }
    if let Some(b) = baseline {
        let (base, _) = build_report(b, None);
        r.baseline_success = base.success;
        r.warnings
            .extend(base.warnings.into_iter().map(|w| format!("baseline: {w}")));
    }
    for w in &r.warnings {
        log::warn!("{w}");
    }
    (r, complete)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .collect()
}

/// Report bundle for a run log, optionally with a baseline run's success curve.
pub fn emit_report(log_path: &Path, baseline: Option<&Path>) -> Result<RunReport> {
    let lines = read_lines(log_path)?;
    let base = baseline.map(read_lines).transpose()?;
    Ok(build_report(&lines, base.as_deref()).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_examples() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        let err = parse_config("clip_low = 1.5").unwrap_err().to_string();
        assert!(err.contains("clip_low"), "{err}");
        let c = parse_config("gen_frequency = 5").unwrap();
        assert_eq!(c.gen_frequency, 5);
        assert_eq!(
            RunConfig {
                gen_frequency: 10,
                ..c
            },
            RunConfig::default()
        );
        assert!(parse_config("no_such_key = 1").is_err());
        assert!(parse_config("group_size = \"eight\"").is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("grpo_static".parse::<Mode>().unwrap(), Mode::GrpoStatic);
        assert!("other".parse::<Mode>().is_err());
    }

    fn small() -> RunConfig {
        RunConfig {
            num_tools: 8,
            max_chain_depth: 4,
            init_pool_size: 12,
            batch_size: 4,
            total_steps: 0,
            eval_tasks: 8,
            policy_buckets: 4096,
            learning_rate: 20.0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_reports_initial_eval_only() {
        let out = run(&small(), &RunOptions::new(Mode::Coevolve)).unwrap();
        assert_eq!(out.report.success.len(), 1);
        assert_eq!(out.report.success[0].step, 0);
        assert!(out.report.pool_snapshots.is_empty() && out.report.pass_rate.is_empty());
        assert!(out.report.warnings.is_empty());
    }

    #[test]
    fn short_runs_in_every_mode() {
        let config = RunConfig {
            total_steps: 12,
            gen_frequency: 5,
            ..small()
        };
        for mode in Mode::ALL {
            let out = run(&config, &RunOptions::new(mode)).unwrap();
            assert_eq!(
                out.report
                    .success
                    .iter()
                    .map(|p| p.step)
                    .collect::<Vec<_>>(),
                [0, 5, 10, 12]
            );
            assert_eq!(out.report.windows.len(), 2);
            assert_eq!(out.report.signals.len(), 12);
            let evolutions = out.report.pool_snapshots.len();
            assert_eq!(evolutions, if mode == Mode::GrpoStatic { 0 } else { 2 });
        }
    }

    #[test]
    fn heldout_tasks_are_long_and_stable() {
        let config = small();
        let env = build_env(&config).unwrap();
        let a = heldout_tasks(&env, &config).unwrap();
        assert_eq!(a, heldout_tasks(&env, &config).unwrap());
        for t in &a {
            assert!(env.oracle_solve(&t.goal_id).unwrap().len() >= HELDOUT_MIN_LENGTH);
            assert!(t.task_id.as_str().starts_with("heldout-"));
        }
    }

    #[test]
    fn truncated_log_gives_partial_report() {
        let lines = vec![
            serde_json::to_string(&LogRecord::Eval {
                step: 0,
                success_rate: 0.25,
            })
            .unwrap(),
            "{\"type\":\"eval\",\"st".to_string(),
        ];
        let (r, complete) = build_report(&lines, None);
        assert!(!complete);
        assert_eq!(
            r.success,
            vec![SeriesPoint {
                step: 0,
                value: 0.25
            }]
        );
        assert!(!r.warnings.is_empty());
    }
}
