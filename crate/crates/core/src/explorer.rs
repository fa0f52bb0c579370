//! Signal-conditioned re-exploration.
//!
//! An annotated trajectory is distilled into an [`ExplorationContext`], the
//! context is rendered into a guidance prompt for its signal kind, and a
//! backend then drives several independent rollouts through the
//! environment. Every step comes back as an [`ExplorationTriplet`].

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, ResourceSet};
use crate::error::{Error, Result};
use crate::model::{
    Action, Evidence, ExplorationTriplet, RolloutId, SignalAnnotation, SignalKind, Step, TaskId,
    TaskSpec, Trajectory,
};
use crate::prompts::{extract_action_text, Prompt};
use crate::seed;

/// Attempts a backend gets to produce a well-formed reply.
pub const MAX_ATTEMPTS: usize = 3;
/// Objectives attached to a rule-based context.
pub const MAX_OBJECTIVES: usize = 3;
/// History steps shown to a remote backend.
pub const HISTORY_WINDOW: usize = 10;

pub const UNGUIDED_GUIDANCE: &str = "Exploration Goal: Free Exploration\n\
Explore the environment without a fixed target. Try tools in different orders, \
observe what each one needs and produces, and build up resources step by step.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationContext {
    pub summary: String,
    pub failure_cause: String,
    pub instability_pattern: String,
    pub focus_pattern: Vec<String>,
    pub exploration_objectives: Vec<String>,
    pub do_not_repeat: Vec<String>,
    pub source: SignalAnnotation,
}

/// The reply schema a summarizer model is asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextFields {
    pub summary: String,
    pub failure_cause: String,
    pub instability_pattern: String,
    pub focus_pattern: Vec<String>,
    pub exploration_objectives: Vec<String>,
    pub do_not_repeat: Vec<String>,
}

impl ContextFields {
    fn is_complete(&self) -> bool {
        let filled = |v: &[String]| !v.is_empty() && v.iter().all(|s| !s.trim().is_empty());
        !self.summary.trim().is_empty()
            && !self.failure_cause.trim().is_empty()
            && !self.instability_pattern.trim().is_empty()
            && filled(&self.focus_pattern)
            && filled(&self.exploration_objectives)
            && filled(&self.do_not_repeat)
    }

    fn with_source(self, source: SignalAnnotation) -> ExplorationContext {
        ExplorationContext {
            summary: self.summary,
            failure_cause: self.failure_cause,
            instability_pattern: self.instability_pattern,
            focus_pattern: self.focus_pattern,
            exploration_objectives: self.exploration_objectives,
            do_not_repeat: self.do_not_repeat,
            source,
        }
    }
}

/// One chat message in the remote wire format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Sends role-tagged messages and returns the generated text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Chat-completion client over HTTP.
///
/// Request: `POST endpoint` with body
/// `{"model": M, "messages": [{"role": R, "content": C}, ...], "temperature": T}`
/// and, when a key is set, `Authorization: Bearer KEY`.
/// Response: JSON whose `choices[0].message.content` holds the reply text.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

/// Environment variable holding the remote credential.
pub const API_KEY_VAR: &str = "COEVOLVE_API_KEY";

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.7,
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        })
    }
}

pub fn parse_chat_response(body: &serde_json::Value) -> Result<String> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Backend("response lacks choices[0].message.content".into()))
}

impl ChatTransport for HttpTransport {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(messages))
            .map_err(|e| Error::Backend(format!("request to {} failed: {e}", self.endpoint)))?;
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("unreadable response body: {e}")))?;
        parse_chat_response(&body)
    }
}

pub enum Summarizer<'a> {
    RuleBased,
    Remote(&'a dyn ChatTransport),
}

/// Distills an annotated trajectory into an exploration context. A remote
/// summarizer that fails to return a complete reply in [`MAX_ATTEMPTS`]
/// tries falls back to the rule-based one.
pub fn build_context(
    annotation: &SignalAnnotation,
    trajectory: &Trajectory,
    task: &TaskSpec,
    env: &Env,
    summarizer: &Summarizer<'_>,
) -> Result<ExplorationContext> {
    if trajectory.traj_id != annotation.traj_id || task.task_id != annotation.task_id {
        return Err(Error::domain(format!(
            "annotation for {} does not match trajectory {}",
            annotation.traj_id, trajectory.traj_id
        )));
    }
    match summarizer {
        Summarizer::RuleBased => rule_based_context(annotation, trajectory, task, env),
        Summarizer::Remote(transport) => {
            let prompt = Prompt::ContextSummary.render(&[
                ("signal", &describe_signal(annotation)),
                ("trajectory_context", &trajectory_text(trajectory, task)),
            ])?;
            let messages = [ChatMessage::user(prompt)];
            let mut last = String::new();
            for _ in 0..MAX_ATTEMPTS {
                match transport.complete(&messages) {
                    Ok(reply) => match parse_context_reply(&reply) {
                        Some(fields) => return Ok(fields.with_source(annotation.clone())),
                        None => last = "unparseable reply".into(),
                    },
                    Err(e) => last = e.to_string(),
                }
            }
            log::warn!(
                "context summary for {} fell back to rules after {MAX_ATTEMPTS} attempts: {last}",
                annotation.traj_id
            );
            rule_based_context(annotation, trajectory, task, env)
        }
    }
}

/// Extracts the outermost JSON object from a reply.
pub fn parse_context_reply(reply: &str) -> Option<ContextFields> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    let fields: ContextFields = serde_json::from_str(reply.get(start..=end)?).ok()?;
    fields.is_complete().then_some(fields)
}

fn describe_signal(a: &SignalAnnotation) -> String {
    match &a.evidence {
        Evidence::Forgetting { prior_score, current_score } => format!(
            "forgetting (task {} scored {prior_score} earlier in the window, now {current_score})",
            a.task_id
        ),
        Evidence::Boundary { success_index, success_score, failure_index, failure_score } => format!(
            "boundary (rollout {success_index} scored {success_score}, rollout {failure_index} scored {failure_score})"
        ),
        Evidence::Rare { pattern, count, total } => {
            format!("rare (pattern {pattern} seen {count} times in {total})")
        }
    }
}

fn trajectory_text(t: &Trajectory, task: &TaskSpec) -> String {
    let mut s = format!("Task: {}\nQuery: {}\n", task.task_id, task.query);
    for step in &t.steps {
        let _ = writeln!(
            s,
            "{}. {} -> {}",
            step.step_index, step.action, step.observation
        );
    }
    let _ = write!(s, "Outcome: score {} ({:?})", t.score, t.terminated_by);
    s
}

fn fmt_score(x: f64) -> String {
    format!("{x:.2}")
}

fn rule_based_context(
    annotation: &SignalAnnotation,
    t: &Trajectory,
    task: &TaskSpec,
    env: &Env,
) -> Result<ExplorationContext> {
    let goal = env
        .goal_resource(&task.goal_id)
        .ok_or_else(|| Error::Env(format!("unknown goal {}", task.goal_id)))?;
    let goal_name = env.resource_name(goal);
    let tools: Vec<&str> = t.tool_names().collect();
    let actions = if tools.is_empty() {
        "none".to_string()
    } else {
        tools.join(" -> ")
    };

    let mut summary = format!(
        "Task {} asks for {goal_name}. Trajectory {} took {} steps ({actions}) and scored {}.",
        task.task_id,
        t.traj_id,
        t.steps.len(),
        fmt_score(t.score)
    );
    let oracle: Vec<String> = env
        .oracle_solve(&task.goal_id)?
        .iter()
        .map(|a| a.tool.clone())
        .collect();
    let (instability, focus, anchor) = match &annotation.evidence {
        Evidence::Forgetting {
            prior_score,
            current_score,
        } => {
            let _ = write!(
                summary,
                " The same task scored {} earlier in the recent window but {} now.",
                fmt_score(*prior_score),
                fmt_score(*current_score)
            );
            (
                format!(
                    "Success on {goal_name} regressed from {} to {}.",
                    fmt_score(*prior_score),
                    fmt_score(*current_score)
                ),
                vec![oracle.join(",")],
                goal,
            )
        }
        Evidence::Boundary {
            success_index,
            success_score,
            failure_index,
            failure_score,
        } => {
            let _ = write!(
                summary,
                " Rollouts of this task split: rollout {success_index} scored {} while rollout {failure_index} scored {}.",
                fmt_score(*success_score),
                fmt_score(*failure_score)
            );
            (
                format!("Attempts at {goal_name} in one iteration both succeed and fail."),
                vec![oracle.join(",")],
                goal,
            )
        }
        Evidence::Rare {
            pattern,
            count,
            total,
        } => {
            let _ = write!(
                summary,
                " It contains the pattern {pattern}, seen {count} times among {total}."
            );
            let anchor = pattern
                .0
                .last()
                .and_then(|name| env.tool_by_name(name))
                .map_or(goal, |i| env.tool_produces(i));
            (
                format!("The action pattern {pattern} is rarely exercised ({count}/{total})."),
                vec![pattern.to_string()],
                anchor,
            )
        }
    };

    let first_error = t.steps.iter().find(|s| s.observation.starts_with("Error"));
    let failure_cause = match first_error {
        Some(s) => format!(
            "Step {} `{}` failed: {}",
            s.step_index, s.action, s.observation
        ),
        None if t.score < 0.5 => {
            format!("No tool error, but the episode ended before {goal_name} was produced.")
        }
        None => format!(
            "No tool error; {goal_name} was reached but the outcome is unstable across attempts."
        ),
    };

    let mut do_not_repeat: Vec<String> = Vec::new();
    for s in t
        .steps
        .iter()
        .filter(|s| s.observation.starts_with("Error"))
    {
        let msg = s
            .observation
            .trim_end_matches(" Step limit reached.")
            .to_string();
        if !do_not_repeat.contains(&msg) {
            do_not_repeat.push(msg);
        }
    }
    if t.steps
        .iter()
        .any(|s| s.observation.contains("already held"))
    {
        do_not_repeat.push("Re-running tools whose product is already held.".into());
    }
    if do_not_repeat.is_empty() {
        do_not_repeat.push(format!("Stopping before {goal_name} is produced."));
    }

    let objectives = objective_targets(env, anchor, goal)
        .into_iter()
        .map(|r| {
            format!(
                "Obtain {} starting from an empty inventory.",
                env.resource_name(r)
            )
        })
        .collect();

    Ok(ExplorationContext {
        summary,
        failure_cause,
        instability_pattern: instability,
        focus_pattern: focus,
        exploration_objectives: objectives,
        do_not_repeat,
        source: annotation.clone(),
    })
}

/// Resources reachable downstream of `r`, nearest first, ties by index.
pub fn downstream(env: &Env, r: usize) -> Vec<usize> {
    let mut seen = BTreeSet::from([r]);
    let mut out = Vec::new();
    let mut queue = VecDeque::from([r]);
    while let Some(x) = queue.pop_front() {
        let mut next: Vec<usize> = env.consumers(x).map(|t| env.tool_produces(t)).collect();
        next.sort_unstable();
        for y in next {
            if seen.insert(y) {
                out.push(y);
                queue.push_back(y);
            }
        }
    }
    out
}

/// The anchor resource, then what builds on it, then the task's own goal.
fn objective_targets(env: &Env, anchor: usize, goal: usize) -> Vec<usize> {
    let room = if anchor == goal {
        MAX_OBJECTIVES
    } else {
        MAX_OBJECTIVES - 1
    };
    let mut out = vec![anchor];
    for r in downstream(env, anchor) {
        if out.len() >= room {
            break;
        }
        if r != goal && env.goal_for_resource(r).is_some() {
            out.push(r);
        }
    }
    if !out.contains(&goal) {
        out.push(goal);
    }
    out
}

/// Finds the resource an objective names. The longest matching name wins so
/// that `album_cover` is not read as `album`.
pub fn resolve_objective(env: &Env, text: &str) -> Option<usize> {
    let words: BTreeSet<&str> = text
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .collect();
    env.spec()
        .resources
        .iter()
        .filter(|r| words.contains(r.as_str()))
        .max_by_key(|r| r.len())
        .and_then(|r| env.resource_by_name(r))
}

/// Canonical text form of a context, substituted into guidance templates.
pub fn render_context(c: &ExplorationContext) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Summary: {}", c.summary);
    let _ = writeln!(s, "Failure cause: {}", c.failure_cause);
    let _ = writeln!(s, "Instability pattern: {}", c.instability_pattern);
    let list = |s: &mut String, title: &str, items: &[String]| {
        let _ = writeln!(s, "{title}:");
        for i in items {
            let _ = writeln!(s, "- {i}");
        }
    };
    list(&mut s, "Focus patterns", &c.focus_pattern);
    list(&mut s, "Exploration objectives", &c.exploration_objectives);
    list(&mut s, "Do not repeat", &c.do_not_repeat);
    s.truncate(s.trim_end().len());
    s
}

pub fn guidance_prompt(kind: SignalKind) -> Prompt {
    match kind {
        SignalKind::Forgetting => Prompt::GuidanceForgetting,
        SignalKind::Rare => Prompt::GuidanceRare,
        SignalKind::Boundary => Prompt::GuidanceBoundary,
    }
}

pub fn render_guidance(context: &ExplorationContext, kind: SignalKind) -> Result<String> {
    if context.source.kind() != kind {
        return Err(Error::domain(format!(
            "guidance kind {kind} does not match context signal {}",
            context.source.kind()
        )));
    }
    guidance_prompt(kind).render(&[("context", &render_context(context))])
}

pub trait ExplorationBackend: Send + Sync {
    /// Next action given the guidance, the environment description and the
    /// steps taken so far in this round.
    fn choose_action(
        &self,
        guidance: &str,
        description: &str,
        history: &[Step],
        rng: &mut ChaCha8Rng,
    ) -> Result<Action>;
}

/// Oracle-following stand-in for an exploration model.
///
/// The target is read from the `Goal resource:` line of the description and
/// the inventory is rebuilt by replaying the history. With probability
/// `noise_rate` a step deviates to an off-path tool, preferring ones that
/// can run; without a target every tool is equally likely.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedBackend<'a> {
    env: &'a Env,
    noise_rate: f64,
}

pub fn scripted_backend(env: &Env, noise_rate: f64) -> Result<ScriptedBackend<'_>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::domain(format!(
            "noise rate {noise_rate} outside [0, 1]"
        )));
    }
    Ok(ScriptedBackend { env, noise_rate })
}

impl ScriptedBackend<'_> {
    fn inventory(&self, history: &[Step]) -> (ResourceSet, Vec<usize>) {
        let mut owned = ResourceSet::default();
        let mut taken = Vec::new();
        for step in history {
            if let Some(t) = self.env.tool_by_name(&step.action.tool) {
                taken.push(t);
                if step.action.args.is_empty() && owned.is_superset(self.env.tool_requires(t)) {
                    owned = owned.with(self.env.tool_produces(t));
                }
            }
        }
        (owned, taken)
    }

    fn target(&self, description: &str) -> Option<usize> {
        let line = description
            .lines()
            .find_map(|l| l.strip_prefix("Goal resource: "))?;
        self.env.resource_by_name(line.trim())
    }

    fn next_on_path(&self, target: usize, owned: ResourceSet, taken: &[usize]) -> Option<usize> {
        let plan = self.env.oracle_from(ResourceSet::default(), target)?;
        if taken.len() < plan.len() && plan[..taken.len()] == *taken {
            return Some(plan[taken.len()]);
        }
        self.env.oracle_from(owned, target)?.first().copied()
    }
}

impl ExplorationBackend for ScriptedBackend<'_> {
    fn choose_action(
        &self,
        _guidance: &str,
        description: &str,
        history: &[Step],
        rng: &mut ChaCha8Rng,
    ) -> Result<Action> {
        let n = self.env.num_tools();
        let (owned, taken) = self.inventory(history);
        let on_path = self
            .target(description)
            .and_then(|t| self.next_on_path(t, owned, &taken));
        let pick = match on_path {
            None => rng.gen_range(0..n),
            Some(best) => {
                if self.noise_rate > 0.0 && rng.gen_bool(self.noise_rate) {
                    let runnable: Vec<usize> =
                        self.env.executable(owned).filter(|&t| t != best).collect();
                    match runnable.choose(rng) {
                        Some(&t) => t,
                        None => {
                            let others: Vec<usize> = (0..n).filter(|&t| t != best).collect();
                            others.choose(rng).copied().unwrap_or(best)
                        }
                    }
                } else {
                    best
                }
            }
        };
        Ok(Action::tool(self.env.tool_name(pick)))
    }
}

/// Backend that asks a chat model for each action.
pub struct RemoteBackend<T> {
    transport: T,
    retries: AtomicUsize,
}

pub fn remote_backend<T: ChatTransport>(transport: T) -> RemoteBackend<T> {
    RemoteBackend {
        transport,
        retries: AtomicUsize::new(0),
    }
}

impl<T> RemoteBackend<T> {
    /// Malformed replies that were retried so far.
    pub fn retries(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }
}

pub fn history_text(history: &[Step]) -> String {
    if history.is_empty() {
        return "(no actions yet)".into();
    }
    let start = history.len().saturating_sub(HISTORY_WINDOW);
    history[start..]
        .iter()
        .map(|s| format!("{}. {} -> {}", s.step_index, s.action, s.observation))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn exploration_messages(
    guidance: &str,
    description: &str,
    history: &[Step],
) -> Result<[ChatMessage; 2]> {
    let system = Prompt::ExplorationSystem
        .render(&[("action_format", Prompt::ActionFormat.source().trim_end())])?;
    let user = Prompt::ExplorationUser.render(&[
        ("exploration_guidance", guidance),
        ("initial_obs", description),
        ("history_text", &history_text(history)),
    ])?;
    Ok([ChatMessage::system(system), ChatMessage::user(user)])
}

impl<T: ChatTransport> ExplorationBackend for RemoteBackend<T> {
    fn choose_action(
        &self,
        guidance: &str,
        description: &str,
        history: &[Step],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Action> {
        let messages = exploration_messages(guidance, description, history)?;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
            }
            let reply = self.transport.complete(&messages)?;
            if let Some(action) = extract_action_text(&reply).and_then(|a| a.parse::<Action>().ok())
            {
                return Ok(action);
            }
        }
        Err(Error::Backend(format!(
            "no valid action after {MAX_ATTEMPTS} attempts"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFailure {
    pub rollout_id: RolloutId,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exploration {
    pub triplets: Vec<ExplorationTriplet>,
    pub failures: Vec<RoundFailure>,
}

pub fn rollout_id(source: &TaskId, seed: u64, round: usize) -> RolloutId {
    RolloutId::new(format!("{source}~{seed:016x}~r{round:02}"))
}

struct RoundPlan {
    state: crate::env::EnvState,
    description: String,
}

fn run_rounds<F>(
    rounds: usize,
    steps: usize,
    source: &TaskId,
    env: &Env,
    guidance: &str,
    backend: &dyn ExplorationBackend,
    seed: u64,
    plan: F,
) -> Result<Exploration>
where
    F: Fn(usize) -> RoundPlan + Sync,
{
    if rounds == 0 || steps == 0 {
        return Err(Error::domain(
            "exploration needs at least one round and one step",
        ));
    }
    let results: Vec<(Vec<ExplorationTriplet>, Option<RoundFailure>)> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let id = rollout_id(source, seed, round);
            let RoundPlan {
                mut state,
                description,
            } = plan(round);
            let mut rng = seed::rng_for(seed, &[round as u64]);
            let mut history: Vec<Step> = Vec::new();
            let mut triplets = Vec::new();
            let mut failure = None;
            for _ in 0..steps {
                let outcome = backend
                    .choose_action(guidance, &description, &history, &mut rng)
                    .and_then(|a| env.step(&mut state, &a).map(|o| (a, o)));
                let (action, out) = match outcome {
                    Ok(x) => x,
                    Err(e) => {
                        failure = Some(RoundFailure {
                            rollout_id: id.clone(),
                            error: e.to_string(),
                        });
                        break;
                    }
                };
                let step_index = history.len();
                triplets.push(ExplorationTriplet {
                    action: action.clone(),
                    observation: out.observation.clone(),
                    rollout_id: id.clone(),
                    source_task_id: source.clone(),
                    step_index,
                });
                history.push(Step {
                    action,
                    observation: out.observation,
                    step_index,
                });
                if out.done {
                    break;
                }
            }
            (triplets, failure)
        })
        .collect();
    let mut out = Exploration::default();
    for (t, f) in results {
        out.triplets.extend(t);
        if let Some(f) = f {
            log::warn!("exploration round {} aborted: {}", f.rollout_id, f.error);
            out.failures.push(f);
        }
    }
    Ok(out)
}

/// Runs `rounds` independent rollouts of up to `steps` steps each. Round `r`
/// starts from a fresh environment aimed at objective `r mod len`; an
/// objective naming no known resource falls back to the task's goal.
pub fn explore(
    context: &ExplorationContext,
    env: &Env,
    task: &TaskSpec,
    rounds: usize,
    steps: usize,
    backend: &dyn ExplorationBackend,
    seed: u64,
) -> Result<Exploration> {
    let goal = env
        .goal_resource(&task.goal_id)
        .ok_or_else(|| Error::Env(format!("unknown goal {}", task.goal_id)))?;
    let guidance = render_guidance(context, context.source.kind())?;
    let objectives = &context.exploration_objectives;
    run_rounds(
        rounds,
        steps,
        &task.task_id,
        env,
        &guidance,
        backend,
        seed,
        |round| {
            let target = if objectives.is_empty() {
                goal
            } else {
                resolve_objective(env, &objectives[round % objectives.len()]).unwrap_or(goal)
            };
            RoundPlan {
                state: env.reset_to(target),
                description: env.describe(Some(target)),
            }
        },
    )
}

/// Exploration with no signal and no target: episodes run to the step cap
/// or `steps`, whichever is first.
pub fn explore_unguided(
    env: &Env,
    source: &TaskId,
    rounds: usize,
    steps: usize,
    backend: &dyn ExplorationBackend,
    seed: u64,
) -> Result<Exploration> {
    run_rounds(
        rounds,
        steps,
        source,
        env,
        UNGUIDED_GUIDANCE,
        backend,
        seed,
        |_| RoundPlan {
            state: env.reset_free(),
            description: env.describe(None),
        },
    )
}

/// Exploration aimed at a pooled task's own goal with no signal context.
pub fn explore_task(
    env: &Env,
    task: &TaskSpec,
    rounds: usize,
    steps: usize,
    backend: &dyn ExplorationBackend,
    seed: u64,
) -> Result<Exploration> {
    let goal = env
        .goal_resource(&task.goal_id)
        .ok_or_else(|| Error::Env(format!("unknown goal {}", task.goal_id)))?;
    run_rounds(
        rounds,
        steps,
        &task.task_id,
        env,
        UNGUIDED_GUIDANCE,
        backend,
        seed,
        |_| RoundPlan {
            state: env.reset_to(goal),
            description: env.describe(Some(goal)),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_env;
    use crate::model::{GoalId, Origin, Pattern, TerminatedBy, TrajId};
    use std::sync::Mutex;

    fn setup() -> (Env, TaskSpec) {
        let env = Env::new(generate_env(7, 8, 4).unwrap()).unwrap();
        let goal = env.goals_with_min_length(3)[0].clone();
        let task = TaskSpec {
            task_id: TaskId::new("t1"),
            query: "make it".into(),
            env_seed: 7,
            goal_id: goal,
            origin: Origin::Initial,
            source_signal: None,
            created_at_step: 0,
        };
        (env, task)
    }

    fn failed_traj(env: &Env) -> Trajectory {
        let tool = env.tool_name(0).to_string();
        let mut state = env.reset_free();
        let out = env.step(&mut state, &Action::tool(&tool)).unwrap();
        Trajectory {
            traj_id: TrajId::new("t1@0#0"),
            task_id: TaskId::new("t1"),
            steps: vec![Step {
                action: Action::tool(&tool),
                observation: out.observation,
                step_index: 0,
            }],
            raw_reward: 0.0,
            score: 0.0,
            group_index: 0,
            train_step: 0,
            terminated_by: TerminatedBy::StepLimit,
        }
    }

    fn annotation(evidence: Evidence) -> SignalAnnotation {
        SignalAnnotation {
            traj_id: TrajId::new("t1@0#0"),
            task_id: TaskId::new("t1"),
            evidence,
            detected_at_step: 3,
        }
    }

    fn forgetting() -> SignalAnnotation {
        annotation(Evidence::Forgetting {
            prior_score: 1.0,
            current_score: 0.0,
        })
    }

    #[test]
    fn rule_based_context_examples() {
        let (env, task) = setup();
        let t = failed_traj(&env);
        let rare = annotation(Evidence::Rare {
            pattern: Pattern(vec!["A".into(), "B".into(), "C".into()]),
            count: 2,
            total: 400,
        });
        let c = build_context(&rare, &t, &task, &env, &Summarizer::RuleBased).unwrap();
        assert!(c.focus_pattern.iter().any(|p| p.contains("A,B,C")));

        let f = forgetting();
        let c1 = build_context(&f, &t, &task, &env, &Summarizer::RuleBased).unwrap();
        assert!(c1.summary.contains("1.00"));
        let c2 = build_context(&f, &t, &task, &env, &Summarizer::RuleBased).unwrap();
        assert_eq!(c1, c2);
        assert!(!c1.failure_cause.is_empty() && !c1.do_not_repeat.is_empty());
        assert!(!c1.exploration_objectives.is_empty());
    }

    #[test]
    fn guidance_examples() {
        let (env, task) = setup();
        let t = failed_traj(&env);
        let cases = [
            (forgetting(), "Exploration Goal: Reinforce Forgotten Skills"),
            (
                annotation(Evidence::Rare {
                    pattern: Pattern(vec!["A".into()]),
                    count: 1,
                    total: 200,
                }),
                "Try to discover and document various forms",
            ),
            (
                annotation(Evidence::Boundary {
                    success_index: 0,
                    success_score: 1.0,
                    failure_index: 1,
                    failure_score: 0.0,
                }),
                "difference between success and failure",
            ),
        ];
        for (a, needle) in cases {
            let c = build_context(&a, &t, &task, &env, &Summarizer::RuleBased).unwrap();
            let g = render_guidance(&c, a.kind()).unwrap();
            assert!(g.contains(needle));
            assert_eq!(g, render_guidance(&c, a.kind()).unwrap());
        }
        let c = build_context(&forgetting(), &t, &task, &env, &Summarizer::RuleBased).unwrap();
        assert!(render_guidance(&c, SignalKind::Rare).is_err());
        assert!(render_guidance(&c, SignalKind::Forgetting)
            .unwrap()
            .starts_with("Exploration Goal: Reinforce Forgotten Skills"));
    }

    fn context_for(
        env: &Env,
        task: &TaskSpec,
        objective_goal: Option<&GoalId>,
    ) -> ExplorationContext {
        let mut c = build_context(
            &forgetting(),
            &failed_traj(env),
            task,
            env,
            &Summarizer::RuleBased,
        )
        .unwrap();
        if let Some(g) = objective_goal {
            let r = env.goal_resource(g).unwrap();
            c.exploration_objectives = vec![format!("Obtain {}", env.resource_name(r))];
        }
        c
    }

    #[test]
    fn explore_counts_and_early_stop() {
        let (env, task) = setup();
        let backend = scripted_backend(&env, 0.0).unwrap();
        let c = context_for(&env, &task, Some(&task.goal_id));
        let out = explore(&c, &env, &task, 3, 1, &backend, 1).unwrap();
        assert_eq!(out.triplets.len(), 3);
        let ids: BTreeSet<_> = out.triplets.iter().map(|t| t.rollout_id.clone()).collect();
        assert_eq!(ids.len(), 3);

        let len = env.oracle_solve(&task.goal_id).unwrap().len();
        let out = explore(&c, &env, &task, 1, len + 5, &backend, 1).unwrap();
        assert_eq!(out.triplets.len(), len);
        assert!(out
            .triplets
            .last()
            .unwrap()
            .observation
            .contains("Goal reached."));
    }

    #[test]
    fn task_exploration_targets_the_task_goal() {
        let (env, task) = setup();
        let backend = scripted_backend(&env, 0.0).unwrap();
        let out = explore_task(&env, &task, 2, 30, &backend, 3).unwrap();
        let oracle = env.oracle_solve(&task.goal_id).unwrap();
        assert_eq!(out.triplets.len(), 2 * oracle.len());
        assert!(out
            .triplets
            .iter()
            .all(|t| t.source_task_id == task.task_id));
        let bad = TaskSpec {
            goal_id: GoalId::new("have_nothing"),
            ..task
        };
        assert!(explore_task(&env, &bad, 1, 5, &backend, 3).is_err());
    }

    #[test]
    fn noise_free_backend_reproduces_oracle() {
        let (env, task) = setup();
        let backend = scripted_backend(&env, 0.0).unwrap();
        let c = context_for(&env, &task, Some(&task.goal_id));
        let out = explore(&c, &env, &task, 1, 30, &backend, 9).unwrap();
        let got: Vec<Action> = out.triplets.iter().map(|t| t.action.clone()).collect();
        assert_eq!(got, env.oracle_solve(&task.goal_id).unwrap());
    }

    #[test]
    fn full_noise_never_takes_the_path_step() {
        let (env, task) = setup();
        let backend = scripted_backend(&env, 1.0).unwrap();
        let goal = env.goal_resource(&task.goal_id).unwrap();
        let description = env.describe(Some(goal));
        let mut rng = seed::rng(4);
        let mut state = env.reset_to(goal);
        let mut history = Vec::new();
        while !state.done {
            let (owned, taken) = backend.inventory(&history);
            let best = backend.next_on_path(goal, owned, &taken);
            let a = backend
                .choose_action("", &description, &history, &mut rng)
                .unwrap();
            assert_ne!(Some(env.tool_by_name(&a.tool).unwrap()), best);
            let out = env.step(&mut state, &a).unwrap();
            history.push(Step {
                action: a,
                observation: out.observation,
                step_index: history.len(),
            });
        }
    }

    #[test]
    fn noisy_exploration_is_reproducible() {
        let (env, task) = setup();
        let backend = scripted_backend(&env, 0.3).unwrap();
        let c = context_for(&env, &task, None);
        let a = explore(&c, &env, &task, 4, 30, &backend, 11).unwrap();
        let b = explore(&c, &env, &task, 4, 30, &backend, 11).unwrap();
        assert_eq!(a, b);
        for id in a
            .triplets
            .iter()
            .map(|t| &t.rollout_id)
            .collect::<BTreeSet<_>>()
        {
            let idx: Vec<usize> = a
                .triplets
                .iter()
                .filter(|t| &t.rollout_id == id)
                .map(|t| t.step_index)
                .collect();
            assert_eq!(idx, (0..idx.len()).collect::<Vec<_>>());
        }
    }

    struct Scripted {
        replies: Mutex<VecDeque<Result<String>>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String>>) -> Self {
            Self {
                replies: Mutex::new(replies.into()),
            }
        }
    }

    impl ChatTransport for Scripted {
        fn complete(&self, _: &[ChatMessage]) -> Result<String> {
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(Error::Backend("exhausted".into())))
        }
    }

    #[test]
    fn remote_backend_retry_paths() {
        let (env, _) = setup();
        let name = env.tool_name(0).to_string();
        let mut rng = seed::rng(0);
        let desc = env.describe(None);

        let ok = remote_backend(Scripted::new(vec![Ok(format!(
            "reason <action>{name}</action>"
        ))]));
        assert_eq!(
            ok.choose_action("g", &desc, &[], &mut rng).unwrap(),
            Action::tool(&name)
        );
        assert_eq!(ok.retries(), 0);

        let second = remote_backend(Scripted::new(vec![
            Ok("??".into()),
            Ok(format!("<action>{name}</action>")),
        ]));
        assert_eq!(
            second.choose_action("g", &desc, &[], &mut rng).unwrap(),
            Action::tool(&name)
        );
        assert_eq!(second.retries(), 1);

        let garbage = remote_backend(Scripted::new(vec![
            Ok("x".into()),
            Ok("y".into()),
            Ok("<action>1</action>".into()),
        ]));
        assert!(garbage.choose_action("g", &desc, &[], &mut rng).is_err());
        assert_eq!(garbage.retries(), 2);
    }

    /// Fails every call made from round 1 (identified by the first draw of its generator).
    struct FaultyRound<'a> {
        inner: ScriptedBackend<'a>,
        bad_first_draw: u64,
    }

    impl ExplorationBackend for FaultyRound<'_> {
        fn choose_action(
            &self,
            g: &str,
            d: &str,
            h: &[Step],
            rng: &mut ChaCha8Rng,
        ) -> Result<Action> {
            let mut probe = rng.clone();
            probe.set_word_pos(0);
            if probe.gen::<u64>() == self.bad_first_draw {
                return Err(Error::Backend("injected".into()));
            }
            self.inner.choose_action(g, d, h, rng)
        }
    }

    #[test]
    fn aborted_round_leaves_others_untouched() {
        let (env, task) = setup();
        let c = context_for(&env, &task, None);
        let inner = scripted_backend(&env, 0.3).unwrap();
        let clean = explore(&c, &env, &task, 3, 30, &inner, 5).unwrap();
        let bad_first_draw = seed::rng_for(5, &[1]).gen::<u64>();
        let faulty = FaultyRound {
            inner,
            bad_first_draw,
        };
        let out = explore(&c, &env, &task, 3, 30, &faulty, 5).unwrap();
        assert_eq!(out.failures.len(), 1);
        let bad = rollout_id(&task.task_id, 5, 1);
        let keep = |v: &[ExplorationTriplet]| {
            v.iter()
                .filter(|t| t.rollout_id != bad)
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(keep(&out.triplets), keep(&clean.triplets));
        assert!(out.triplets.iter().all(|t| t.rollout_id != bad));
    }

    #[test]
    fn remote_summary_falls_back_after_three_failures() {
        let (env, task) = setup();
        let t = failed_traj(&env);
        let transport = Scripted::new(vec![
            Ok("no".into()),
            Ok("{}".into()),
            Ok("{\"summary\": 1}".into()),
        ]);
        let remote = build_context(
            &forgetting(),
            &t,
            &task,
            &env,
            &Summarizer::Remote(&transport),
        )
        .unwrap();
        let rules = build_context(&forgetting(), &t, &task, &env, &Summarizer::RuleBased).unwrap();
        assert_eq!(remote, rules);

        let fields = ContextFields {
            summary: "s".into(),
            failure_cause: "f".into(),
            instability_pattern: "i".into(),
            focus_pattern: vec!["p".into()],
            exploration_objectives: vec!["o".into()],
            do_not_repeat: vec!["d".into()],
        };
        let reply = format!("Here:\n{}\nDone", serde_json::to_string(&fields).unwrap());
        let transport = Scripted::new(vec![Ok(reply)]);
        let c = build_context(
            &forgetting(),
            &t,
            &task,
            &env,
            &Summarizer::Remote(&transport),
        )
        .unwrap();
        assert_eq!(c.summary, "s");
    }

    #[test]
    fn objective_resolution_prefers_longest_name() {
        let (env, _) = setup();
        for r in &env.spec().resources {
            let idx = env.resource_by_name(r).unwrap();
            assert_eq!(
                resolve_objective(&env, &format!("Obtain {r} now.")),
                Some(idx)
            );
        }
        assert_eq!(resolve_objective(&env, "nothing here"), None);
    }
}
