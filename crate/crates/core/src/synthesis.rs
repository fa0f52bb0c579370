//! From exploration triplets to validated pool tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, ResourceSet};
use crate::error::{Error, Result};
use crate::explorer::{ChatMessage, ChatTransport, MAX_ATTEMPTS};
use crate::metrics::{dot, Embedder};
use crate::model::{
    Action, ExplorationTriplet, GoalId, Origin, RolloutId, SignalSource, Step, TaskId,
    TaskSolutionPair, TaskSpec, TerminatedBy, TrajId, Trajectory, MIN_ABSTRACT_STEPS,
};
use crate::prompts::Prompt;
use crate::seed;
use crate::taskpool::TaskPool;

pub type Rollouts = BTreeMap<RolloutId, Vec<ExplorationTriplet>>;

/// Groups triplets by source task, then rollout; steps ordered by index.
pub fn aggregate_triplets(triplets: &[ExplorationTriplet]) -> BTreeMap<TaskId, Rollouts> {
    let mut out: BTreeMap<TaskId, Rollouts> = BTreeMap::new();
    for t in triplets {
        out.entry(t.source_task_id.clone())
            .or_default()
            .entry(t.rollout_id.clone())
            .or_default()
            .push(t.clone());
    }
    for rollouts in out.values_mut() {
        for steps in rollouts.values_mut() {
            steps.sort_by_key(|t| t.step_index);
        }
    }
    out
}

const OPENERS: &[&str] = &[
    "Please",
    "Could you",
    "I need you to",
    "Go ahead and",
    "Help me",
    "Can you",
    "Kindly",
    "I'd like you to",
];
const VERBS: &[&str] = &[
    "obtain",
    "produce",
    "get me",
    "prepare",
    "put together",
    "come up with",
    "generate",
    "acquire",
];
const FRAMES: &[&str] = &["the {}", "a fresh {}", "a new {}", "the {} we discussed"];
const QUALIFIERS: &[&str] = &[
    "",
    " for the team",
    " before the deadline",
    " as soon as possible",
    " for my records",
    " for the weekly review",
    " so we can continue",
    " starting from scratch",
];

/// A natural-language request for `resource`, phrased by `variant`.
pub fn phrase_query(resource: &str, variant: u64) -> String {
    let pick = |list: &[&'static str], k: u64| {
        list[(seed::derive(variant, &[k]) % list.len() as u64) as usize]
    };
    let noun = resource.replace('_', " ");
    let object = pick(FRAMES, 2).replace("{}", &noun);
    format!(
        "{} {} {}{}.",
        pick(OPENERS, 0),
        pick(VERBS, 1),
        object,
        pick(QUALIFIERS, 3)
    )
}

/// Successful producing steps of a rollout: `(step, tool, new resource)`.
fn productive_steps(env: &Env, steps: &[ExplorationTriplet]) -> Vec<(usize, usize, usize)> {
    let mut owned = ResourceSet::default();
    let mut out = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        let Some(t) = env.tool_by_name(&s.action.tool) else {
            continue;
        };
        if !s.action.args.is_empty() || !owned.is_superset(env.tool_requires(t)) {
            continue;
        }
        let r = env.tool_produces(t);
        if !owned.contains(r) {
            owned = owned.with(r);
            out.push((i, t, r));
        }
    }
    out
}

/// Rule-based abstraction of one rollout.
///
/// Every goal resource obtained in the rollout that is not itself a
/// prerequisite of another obtained goal yields a candidate: the rollout's
/// productive steps restricted to that goal's dependency closure, which is
/// the shortest executable sequence from an empty inventory contained in
/// the rollout. Candidates shorter than the minimum are dropped.
pub fn abstract_rollout(
    env: &Env,
    rollout_id: &RolloutId,
    steps: &[ExplorationTriplet],
    source_task_id: &TaskId,
    source_signal: SignalSource,
) -> Vec<TaskSolutionPair> {
    let productive = productive_steps(env, steps);
    let reached: Vec<usize> = productive
        .iter()
        .map(|&(_, _, r)| r)
        .filter(|&r| env.goal_for_resource(r).is_some())
        .collect();
    let closures: Vec<ResourceSet> = reached.iter().map(|&r| env.closure(r)).collect();
    let mut pairs = Vec::new();
    for (i, &r) in reached.iter().enumerate() {
        let dominated = reached
            .iter()
            .enumerate()
            .any(|(j, &other)| j != i && other != r && closures[j].contains(r));
        if dominated {
            continue;
        }
        let actions: Vec<Action> = productive
            .iter()
            .filter(|&&(_, _, p)| closures[i].contains(p))
            .map(|&(_, t, _)| Action::tool(env.tool_name(t)))
            .collect();
        if actions.len() < MIN_ABSTRACT_STEPS {
            continue;
        }
        let goal = env.goal_for_resource(r).expect("filtered above").clone();
        let variant = seed::derive(seed::hash_str(rollout_id.as_str()), &[r as u64]);
        pairs.push(TaskSolutionPair {
            query: phrase_query(env.resource_name(r), variant),
            goal_id: goal,
            action_sequence: actions,
            source_task_id: source_task_id.clone(),
            source_signal,
        });
    }
    pairs
}

pub enum Abstractor<'a> {
    RuleBased,
    Remote(&'a dyn ChatTransport),
}

pub fn interaction_history(rollouts: &Rollouts) -> String {
    let mut s = String::new();
    for (id, steps) in rollouts {
        let _ = writeln!(s, "### Rollout {id}");
        for t in steps {
            let _ = writeln!(s, "{}. {} -> {}", t.step_index, t.action, t.observation);
        }
    }
    s.truncate(s.trim_end().len());
    s
}

/// Parses `<task>` blocks with `Query:`, `Goal:` and `ActionSequence:` lines.
pub fn parse_abstraction_reply(
    reply: &str,
    env: &Env,
    source_task_id: &TaskId,
    source_signal: SignalSource,
) -> Option<Vec<TaskSolutionPair>> {
    let mut pairs = Vec::new();
    let mut rest = reply;
    let mut blocks = 0;
    while let Some(start) = rest.find("<task>") {
        let body_start = start + "<task>".len();
        let len = rest[body_start..].find("</task>")?;
        let body = &rest[body_start..body_start + len];
        rest = &rest[body_start + len + "</task>".len()..];
        blocks += 1;
        let field = |name: &str| {
            body.lines()
                .find_map(|l| l.trim().strip_prefix(name))
                .map(|v| {
                    v.trim()
                        .trim_matches(|c| c == '[' || c == ']')
                        .trim()
                        .to_string()
                })
        };
        let (Some(query), Some(goal), Some(seq)) =
            (field("Query:"), field("Goal:"), field("ActionSequence:"))
        else {
            continue;
        };
        let goal = GoalId::new(goal);
        if env.goal_resource(&goal).is_none() || query.is_empty() {
            continue;
        }
        let actions: Option<Vec<Action>> = seq.split(',').map(|a| a.trim().parse().ok()).collect();
        match actions {
            Some(a) if a.len() >= MIN_ABSTRACT_STEPS => pairs.push(TaskSolutionPair {
                query,
                goal_id: goal,
                action_sequence: a,
                source_task_id: source_task_id.clone(),
                source_signal,
            }),
            _ => continue,
        }
    }
    (blocks > 0).then_some(pairs)
}

/// Abstracts every rollout recorded for one source task.
pub fn abstract_tasks(
    rollouts: &Rollouts,
    env: &Env,
    source_task_id: &TaskId,
    source_signal: SignalSource,
    abstractor: &Abstractor<'_>,
) -> Result<Vec<TaskSolutionPair>> {
    if rollouts.is_empty() {
        return Err(Error::domain(format!(
            "no rollouts to abstract for {source_task_id}"
        )));
    }
    let rule_based = || {
        rollouts
            .iter()
            .flat_map(|(id, steps)| abstract_rollout(env, id, steps, source_task_id, source_signal))
            .collect()
    };
    match abstractor {
        Abstractor::RuleBased => Ok(rule_based()),
        Abstractor::Remote(transport) => {
            let prompt = Prompt::TaskAbstraction.render(&[
                (
                    "output_format",
                    Prompt::AbstractionOutputFormat.source().trim_end(),
                ),
                ("interaction_history", &interaction_history(rollouts)),
            ])?;
            let messages = [ChatMessage::user(prompt)];
            for _ in 0..MAX_ATTEMPTS {
                if let Ok(reply) = transport.complete(&messages) {
                    if let Some(pairs) =
                        parse_abstraction_reply(&reply, env, source_task_id, source_signal)
                    {
                        return Ok(pairs);
                    }
                }
            }
            log::warn!(
                "abstraction for {source_task_id} fell back to rules after {MAX_ATTEMPTS} attempts"
            );
            Ok(rule_based())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    RetainByReward,
    Reject,
}

impl Verdict {
    pub fn is_admissible(self) -> bool {
        !matches!(self, Verdict::Reject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub pair: TaskSolutionPair,
    pub verdict: Verdict,
    pub cumulative_reward: f64,
    pub evidence: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Result of executing a candidate in a fresh environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub trajectory: Trajectory,
    pub cumulative_reward: f64,
    pub succeeded: bool,
}

pub trait TaskExecutor: Send + Sync {
    fn execute(&self, pair: &TaskSolutionPair, env: &Env) -> Result<Execution>;
}

/// Replays the pair's action sequence literally.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayExecutor;

fn evidence_id(pair: &TaskSolutionPair) -> TrajId {
    let h = seed::hash_str(&format!("{}|{}", pair.goal_id, pair.query));
    TrajId::new(format!("validate-{}-{h:016x}", pair.source_task_id))
}

impl TaskExecutor for ReplayExecutor {
    fn execute(&self, pair: &TaskSolutionPair, env: &Env) -> Result<Execution> {
        let goal = env
            .goal_resource(&pair.goal_id)
            .ok_or_else(|| Error::Env(format!("unknown goal {}", pair.goal_id)))?;
        let mut state = env.reset_to(goal);
        let mut steps = Vec::new();
        let mut reward = 0.0;
        for action in &pair.action_sequence {
            if state.done {
                break;
            }
            let out = env.step(&mut state, action)?;
            reward += out.reward;
            steps.push(Step {
                action: action.clone(),
                observation: out.observation,
                step_index: steps.len(),
            });
        }
        let terminated_by = if state.succeeded {
            TerminatedBy::Goal
        } else if state.done {
            TerminatedBy::StepLimit
        } else {
            TerminatedBy::Invalid
        };
        let score = if state.succeeded { 1.0 } else { 0.0 };
        Ok(Execution {
            trajectory: Trajectory {
                traj_id: evidence_id(pair),
                task_id: pair.source_task_id.clone(),
                steps,
                raw_reward: score,
                score,
                group_index: 0,
                train_step: 0,
                terminated_by,
            },
            cumulative_reward: reward,
            succeeded: state.succeeded,
        })
    }
}

fn reject_with_error(pair: &TaskSolutionPair, error: String) -> ValidationRecord {
    ValidationRecord {
        pair: pair.clone(),
        verdict: Verdict::Reject,
        cumulative_reward: 0.0,
        evidence: Trajectory {
            traj_id: evidence_id(pair),
            task_id: pair.source_task_id.clone(),
            steps: Vec::new(),
            raw_reward: 0.0,
            score: 0.0,
            group_index: 0,
            train_step: 0,
            terminated_by: TerminatedBy::Invalid,
        },
        error: Some(error),
    }
}

fn verdict_for(succeeded: bool, cumulative_reward: f64) -> Verdict {
    if succeeded {
        Verdict::Accept
    } else if cumulative_reward > 0.0 {
        Verdict::RetainByReward
    } else {
        Verdict::Reject
    }
}

/// Accept on success, retain on failure with positive reward, else reject.
pub fn validate_task(
    pair: &TaskSolutionPair,
    env: &Env,
    executor: &dyn TaskExecutor,
) -> ValidationRecord {
    match executor.execute(pair, env) {
        Ok(exec) => ValidationRecord {
            pair: pair.clone(),
            verdict: verdict_for(exec.succeeded, exec.cumulative_reward),
            cumulative_reward: exec.cumulative_reward,
            evidence: exec.trajectory,
            error: None,
        },
        Err(e) => reject_with_error(pair, e.to_string()),
    }
}

/// Reads `Success: true|false` from an evaluator reply.
pub fn parse_judge_reply(reply: &str) -> Option<bool> {
    reply.lines().find_map(|l| {
        let v = l
            .trim()
            .strip_prefix("Success:")?
            .trim()
            .trim_matches(|c| c == '[' || c == ']');
        match v.to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    })
}

/// Like [`validate_task`] but the success branch is decided by a model
/// reading the execution; an unusable judge leaves the environment's flag.
pub fn validate_task_judged(
    pair: &TaskSolutionPair,
    env: &Env,
    executor: &dyn TaskExecutor,
    judge: &dyn ChatTransport,
) -> ValidationRecord {
    let exec = match executor.execute(pair, env) {
        Ok(e) => e,
        Err(e) => return reject_with_error(pair, e.to_string()),
    };
    let summary: String = exec
        .trajectory
        .steps
        .iter()
        .map(|s| format!("{}. {} -> {}\n", s.step_index, s.action, s.observation))
        .collect();
    let final_obs = exec
        .trajectory
        .steps
        .last()
        .map_or("(none)", |s| s.observation.as_str());
    let expected = pair
        .action_sequence
        .iter()
        .map(Action::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    let goal_desc = format!("Obtain the resource targeted by goal {}", pair.goal_id);
    let prompt = Prompt::TaskValidation.render(&[
        ("task_description", &goal_desc),
        ("query", &pair.query),
        ("ground_truth", &expected),
        ("modality_hint", "tool calls by name, no arguments"),
        ("trajectory_summary", summary.trim_end()),
        ("final_observation", final_obs),
    ]);
    let mut succeeded = exec.succeeded;
    if let Ok(prompt) = prompt {
        let messages = [ChatMessage::user(prompt)];
        let judged = (0..MAX_ATTEMPTS).find_map(|_| {
            judge
                .complete(&messages)
                .ok()
                .and_then(|r| parse_judge_reply(&r))
        });
        match judged {
            Some(v) => succeeded = v,
            None => log::warn!("validation judge gave no verdict for {}", pair.query),
        }
    }
    ValidationRecord {
        pair: pair.clone(),
        verdict: verdict_for(succeeded, exec.cumulative_reward),
        cumulative_reward: exec.cumulative_reward,
        evidence: exec.trajectory,
        error: None,
    }
}

/// Validates candidates concurrently; records come back in input order.
pub fn validate_all(
    pairs: &[TaskSolutionPair],
    env: &Env,
    executor: &dyn TaskExecutor,
) -> Vec<ValidationRecord> {
    pairs
        .par_iter()
        .map(|p| validate_task(p, env, executor))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolUpdate {
    pub appended: Vec<TaskSpec>,
    /// Per processed record, the id it was pooled under.
    pub admitted: Vec<Option<TaskId>>,
    pub duplicates: usize,
    pub rejected: usize,
}

/// Appends admissible candidates whose query is not a near-duplicate
/// (cosine similarity above `threshold`) of a pooled or just-appended task.
pub fn admit(
    records: &[ValidationRecord],
    pool: &mut TaskPool,
    embedder: &dyn Embedder,
    threshold: f64,
    step: usize,
    origin: Origin,
    limit: Option<usize>,
) -> Result<PoolUpdate> {
    let mut update = PoolUpdate::default();
    for rec in records {
        if limit.is_some_and(|l| pool.len() >= l) {
            break;
        }
        if !rec.verdict.is_admissible() {
            update.rejected += 1;
            update.admitted.push(None);
            continue;
        }
        let e = embedder.embed(&rec.pair.query);
        if pool.embeddings().iter().any(|p| dot(p, &e) > threshold) {
            update.duplicates += 1;
            update.admitted.push(None);
            continue;
        }
        let source = match origin {
            Origin::Initial => None,
            Origin::Synthesized => Some(rec.pair.source_signal),
        };
        let spec = pool.append(&rec.pair, origin, source, step, e, rec.verdict)?;
        update.admitted.push(Some(spec.task_id.clone()));
        update.appended.push(spec);
    }
    Ok(update)
}

pub fn evolve_pool(
    records: &[ValidationRecord],
    pool: &mut TaskPool,
    embedder: &dyn Embedder,
    threshold: f64,
    step: usize,
) -> Result<PoolUpdate> {
    admit(
        records,
        pool,
        embedder,
        threshold,
        step,
        Origin::Synthesized,
        None,
    )
}
