//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coevolve::env::{Env, EnvSpec};
use coevolve::grpo::{Decision, GroupBatch, GrpoParams, Policy, PolicySnapshot, SampledTrajectory};
use coevolve::model::{
    Action, Evidence, GoalId, Origin, Pattern, SignalAnnotation, Step, TaskId, TaskSolutionPair,
    TaskSpec, TerminatedBy, TrajId, Trajectory,
};
use coevolve::signals::SignalParams;
use coevolve::synthesis::Verdict;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn prompt_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/prompts")
}

// ---------------------------------------------------------------------------
// Signal streams

/// One synthetic training run: iterations of groups of trajectories, plus
/// the detector settings it should be scanned with.
#[derive(Debug, Clone)]
pub struct SignalStream {
    pub iterations: Vec<Vec<Vec<Trajectory>>>,
    pub params: SignalParams,
    pub window: usize,
}

const TOOLS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

fn random_score(r: &mut ChaCha8Rng) -> f64 {
    match r.gen_range(0..6) {
        0 | 1 => 1.0,
        2 => 0.0,
        3 => 0.5,
        4 => [0.25, 0.75, 0.49, 0.51][r.gen_range(0..4)],
        _ => r.gen_range(0.0..=1.0),
    }
}

fn random_tools(r: &mut ChaCha8Rng) -> Vec<String> {
    let len = r.gen_range(0..7);
    if r.gen_bool(0.5) {
        // A routine prefix makes a handful of patterns common.
        (0..len).map(|i| TOOLS[i % 4].to_string()).collect()
    } else {
        (0..len)
            .map(|_| TOOLS[r.gen_range(0..TOOLS.len())].to_string())
            .collect()
    }
}

pub fn trajectory(task: &str, step: usize, k: usize, score: f64, tools: &[String]) -> Trajectory {
    Trajectory {
        traj_id: TrajId::new(format!("{task}@{step}#{k}")),
        task_id: TaskId::new(task),
        steps: tools
            .iter()
            .enumerate()
            .map(|(i, t)| Step {
                action: Action::tool(t),
                observation: String::new(),
                step_index: i,
            })
            .collect(),
        raw_reward: score,
        score,
        group_index: k,
        train_step: step,
        terminated_by: if score > 0.0 {
            TerminatedBy::Goal
        } else {
            TerminatedBy::StepLimit
        },
    }
}

pub fn random_stream(seed: u64) -> SignalStream {
    let mut r = rng(seed);
    let window = r.gen_range(1..=10);
    let params = SignalParams {
        rare_threshold: [5.0, 5.0, 2.0, 10.0][r.gen_range(0..4)],
        rare_min_total: [100, 100, 20, 0][r.gen_range(0..4)],
        pattern_length: [3, 3, 2, 1][r.gen_range(0..4)],
    };
    let tasks: Vec<String> = (0..r.gen_range(2..7)).map(|i| format!("t{i}")).collect();
    let iterations = (0..r.gen_range(6..14))
        .map(|step| {
            let mut chosen = tasks.clone();
            chosen.shuffle(&mut r);
            chosen.truncate(r.gen_range(1..=tasks.len().min(4)));
            chosen
                .iter()
                .map(|task| {
                    let k = r.gen_range(1..7);
                    (0..k)
                        .map(|i| {
                            let score = random_score(&mut r);
                            let tools = random_tools(&mut r);
                            trajectory(task, step, i, score, &tools)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    SignalStream {
        iterations,
        params,
        window,
    }
}

/// Feeds a stream through the incremental detectors.
pub fn run_detectors(
    stream: &SignalStream,
) -> (Vec<SignalAnnotation>, coevolve::signals::SignalState) {
    use coevolve::signals::{extract_signals, PatternStats, SignalState};
    let mut state = SignalState::new(stream.window);
    let mut patterns = PatternStats::default();
    let mut out = Vec::new();
    for (step, groups) in stream.iterations.iter().enumerate() {
        out.extend(
            extract_signals(groups, &mut state, &mut patterns, &stream.params, step).unwrap(),
        );
    }
    state.patterns = patterns;
    (out, state)
}

fn literal_ngrams(t: &Trajectory, n: usize) -> Vec<Pattern> {
    let names: Vec<String> = t.steps.iter().map(|s| s.action.tool.clone()).collect();
    let mut out = Vec::new();
    if names.is_empty() {
        return out;
    }
    if names.len() < n {
        out.push(Pattern(names));
        return out;
    }
    let mut i = 0;
    while i + n <= names.len() {
        out.push(Pattern(names[i..i + n].to_vec()));
        i += 1;
    }
    out
}

/// Re-scans the complete stream from scratch, applying the three trigger
/// inequalities literally at every trajectory.
pub fn rescan_signals(stream: &SignalStream) -> Vec<SignalAnnotation> {
    let p = &stream.params;
    let mut scores: Vec<(TaskId, f64)> = Vec::new();
    let mut emitted: Vec<Pattern> = Vec::new();
    let mut out = Vec::new();
    for (step, groups) in stream.iterations.iter().enumerate() {
        for group in groups {
            let before = scores.len();
            let success = (0..group.len()).find(|&i| group[i].score > 0.5);
            let failure = (0..group.len()).find(|&i| group[i].score < 0.5);
            for t in group {
                let prior: Vec<f64> = scores[..before]
                    .iter()
                    .filter(|(id, _)| *id == t.task_id)
                    .map(|(_, s)| *s)
                    .collect();
                let window = &prior[prior.len().saturating_sub(stream.window)..];
                if t.score < 0.5 {
                    if let Some(&s) = window.iter().rev().find(|&&s| s >= 0.5) {
                        out.push(SignalAnnotation {
                            traj_id: t.traj_id.clone(),
                            task_id: t.task_id.clone(),
                            evidence: Evidence::Forgetting {
                                prior_score: s,
                                current_score: t.score,
                            },
                            detected_at_step: step,
                        });
                    }
                }
                if let (Some(si), Some(fi)) = (success, failure) {
                    out.push(SignalAnnotation {
                        traj_id: t.traj_id.clone(),
                        task_id: t.task_id.clone(),
                        evidence: Evidence::Boundary {
                            success_index: si,
                            success_score: group[si].score,
                            failure_index: fi,
                            failure_score: group[fi].score,
                        },
                        detected_at_step: step,
                    });
                }
                let mine = literal_ngrams(t, p.pattern_length);
                emitted.extend(mine.iter().cloned());
                let n = emitted.len() as u64;
                if n >= p.rare_min_total {
                    let mut best: Option<(Pattern, u64)> = None;
                    for pat in &mine {
                        let c = emitted.iter().filter(|e| *e == pat).count() as u64;
                        let rare = c > 0 && (c as f64) / (n as f64) < p.rare_threshold / 100.0;
                        if rare && best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                            best = Some((pat.clone(), c));
                        }
                    }
                    if let Some((pattern, count)) = best {
                        out.push(SignalAnnotation {
                            traj_id: t.traj_id.clone(),
                            task_id: t.task_id.clone(),
                            evidence: Evidence::Rare {
                                pattern,
                                count,
                                total: n,
                            },
                            detected_at_step: step,
                        });
                    }
                }
                scores.push((t.task_id.clone(), t.score));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// GRPO

#[derive(Debug, Clone)]
pub struct GrpoCase {
    pub current: Policy,
    pub reference: PolicySnapshot,
    pub batch: GroupBatch,
    pub params: GrpoParams,
}

fn dummy_task() -> TaskSpec {
    TaskSpec {
        task_id: TaskId::new("fd"),
        query: "q".into(),
        env_seed: 0,
        goal_id: GoalId::new("g"),
        origin: Origin::Initial,
        source_signal: None,
        created_at_step: 0,
    }
}

fn random_policy(
    r: &mut ChaCha8Rng,
    buckets: usize,
    actions: usize,
    temperature: f64,
    scale: f64,
) -> Policy {
    let mut p = Policy::new(buckets, actions, temperature);
    for x in p.params_mut() {
        *x = r.gen_range(-scale..scale);
    }
    p
}

/// A random (policy, batch, clip, beta) configuration. The behaviour policy
/// is a perturbation of the current one so ratios land on both sides of the
/// clip range.
pub fn random_grpo_case(seed: u64) -> GrpoCase {
    let mut r = rng(seed);
    let buckets = r.gen_range(2..6);
    let actions = r.gen_range(2..6);
    let temperature = r.gen_range(0.5..1.5);
    let current = random_policy(&mut r, buckets, actions, temperature, 1.5);
    let mut old = current.clone();
    for x in old.params_mut() {
        *x += r.gen_range(-0.6..0.6);
    }
    let reference = random_policy(&mut r, buckets, actions, temperature, 1.0);
    let k = r.gen_range(2..6);
    let mut trajectories = Vec::new();
    for i in 0..k {
        let decisions: Vec<Decision> = (0..r.gen_range(1..6))
            .map(|_| {
                let bucket = r.gen_range(0..buckets);
                let action = r.gen_range(0..actions);
                Decision {
                    bucket,
                    action,
                    old_log_prob: old.log_prob(bucket, action),
                }
            })
            .collect();
        let tools: Vec<String> = decisions.iter().map(|d| format!("t{}", d.action)).collect();
        trajectories.push(SampledTrajectory {
            trajectory: trajectory("fd", 0, i, 0.0, &tools),
            decisions,
        });
    }
    let advantages = (0..k).map(|_| r.gen_range(-2.0..2.0)).collect();
    GrpoCase {
        current,
        reference: PolicySnapshot::capture(&reference),
        batch: GroupBatch {
            task: dummy_task(),
            trajectories,
            advantages,
        },
        params: GrpoParams {
            clip_low: r.gen_range(0.05..0.4),
            clip_high: r.gen_range(0.05..0.4),
            kl_coeff: [0.0, 1e-3, r.gen_range(0.0..0.5)][r.gen_range(0..3)],
        },
    }
}

fn log_softmax(logits: &[f64], temperature: f64, action: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[action] - lse
}

/// Straight per-step evaluation of the clipped surrogate minus the KL
/// penalty, averaged over all steps of the group.
pub fn brute_objective(
    params: &[f64],
    actions: usize,
    temperature: f64,
    reference: &Policy,
    batch: &GroupBatch,
    g: &GrpoParams,
) -> f64 {
    let mut sum = 0.0;
    let mut steps = 0usize;
    for (t, &adv) in batch.trajectories.iter().zip(&batch.advantages) {
        for d in &t.decisions {
            let row = &params[d.bucket * actions..(d.bucket + 1) * actions];
            let lp = log_softmax(row, temperature, d.action);
            let ref_lp = log_softmax(reference.logits(d.bucket), temperature, d.action);
            let ratio = (lp - d.old_log_prob).exp();
            let clipped = ratio.max(1.0 - g.clip_low).min(1.0 + g.clip_high);
            let surrogate = f64::min(ratio * adv, clipped * adv);
            let rho = (ref_lp - lp).exp();
            let kl = rho - rho.ln() - 1.0;
            sum += surrogate - g.kl_coeff * kl;
            steps += 1;
        }
    }
    sum / steps as f64
}

/// Central differences of `f` over every parameter of `policy`.
pub fn finite_difference<F: Fn(&Policy) -> f64>(policy: &Policy, h: f64, f: F) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.params().len())
        .map(|i| {
            let x = p.params()[i];
            p.params_mut()[i] = x + h;
            let up = f(&p);
            p.params_mut()[i] = x - h;
            let down = f(&p);
            p.params_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |b|` over all components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

// ---------------------------------------------------------------------------
// Validation

/// Replays `actions` against the raw spec with a plain set of held
/// resources; returns (succeeded, cumulative reward).
pub fn literal_replay(spec: &EnvSpec, goal: &GoalId, actions: &[Action]) -> Option<(bool, f64)> {
    let target = spec.goals.get(goal)?;
    let mut held: BTreeSet<&str> = BTreeSet::new();
    let mut reward = 0.0;
    for (taken, a) in actions.iter().enumerate() {
        if taken >= spec.max_steps {
            break;
        }
        if let Some(tool) = spec.tools.iter().find(|t| t.name == a.tool) {
            let ready =
                a.args.is_empty() && tool.requires.iter().all(|r| held.contains(r.as_str()));
            if ready && held.insert(tool.produces.as_str()) {
                if &tool.produces == target {
                    return Some((true, 1.0));
                }
                reward += spec
                    .subgoal_rewards
                    .get(&tool.produces)
                    .copied()
                    .unwrap_or(0.0);
            }
        }
    }
    Some((false, reward))
}

pub fn expected_verdict(spec: &EnvSpec, pair: &TaskSolutionPair) -> Verdict {
    match literal_replay(spec, &pair.goal_id, &pair.action_sequence) {
        Some((true, _)) => Verdict::Accept,
        Some((false, r)) if r > 0.0 => Verdict::RetainByReward,
        _ => Verdict::Reject,
    }
}

/// Mixed solvable and unsolvable candidates: oracle plans, mutated plans,
/// random tool strings, unknown tools and unknown goals.
pub fn fuzz_pairs(env: &Env, n: usize, seed: u64) -> Vec<TaskSolutionPair> {
    let mut r = rng(seed);
    let goals: Vec<GoalId> = env.goals().map(|(g, _)| g.clone()).collect();
    let tools: Vec<String> = (0..env.num_tools())
        .map(|i| env.tool_name(i).to_string())
        .collect();
    (0..n)
        .map(|i| {
            let goal = goals[r.gen_range(0..goals.len())].clone();
            let mut seq = env.oracle_solve(&goal).unwrap();
            let (goal, seq) = match r.gen_range(0..7) {
                0 | 1 => (goal, seq),
                2 => {
                    seq.remove(r.gen_range(0..seq.len()));
                    (goal, seq)
                }
                3 => {
                    seq.shuffle(&mut r);
                    (goal, seq)
                }
                4 => {
                    let len = r.gen_range(0..8);
                    (
                        goal,
                        (0..len)
                            .map(|_| Action::tool(&tools[r.gen_range(0..tools.len())]))
                            .collect(),
                    )
                }
                5 => {
                    let at = r.gen_range(0..=seq.len());
                    seq.insert(at, Action::tool("no_such_tool"));
                    if r.gen_bool(0.5) {
                        seq.push(Action {
                            tool: tools[0].clone(),
                            args: vec!["x".into()],
                        });
                    }
                    (goal, seq)
                }
                _ => (GoalId::new(format!("have_missing_{i}")), seq),
            };
            TaskSolutionPair {
                query: format!(
                    "fuzz case {i} token{} token{}",
                    r.gen::<u32>(),
                    r.gen::<u32>()
                ),
                goal_id: goal,
                action_sequence: seq,
                source_task_id: TaskId::new(format!("src-{}", i % 7)),
                source_signal: coevolve::model::SignalSource::Boundary,
            }
        })
        .collect()
}

/// The same environment with a partial reward on every non-goal resource.
pub fn graded(spec: &EnvSpec, amount: f64) -> EnvSpec {
    let mut s = spec.clone();
    s.subgoal_rewards = s
        .resources
        .iter()
        .map(|r| (r.clone(), amount))
        .collect::<BTreeMap<_, _>>();
    s
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    Text(String),
    Slot(String),
}

/// Splits a template at `{name}` sites, where `name` is lowercase
/// snake_case. Any other brace is literal text.
pub fn split_template(text: &str) -> Vec<Piece> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_' || bytes[j].is_ascii_digit())
            {
                j += 1;
            }
            let name = &text[i + 1..j];
            let valid = j < bytes.len()
                && bytes[j] == b'}'
                && name
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_ascii_lowercase() || c == '_');
            if valid {
                if !lit.is_empty() {
                    out.push(Piece::Text(std::mem::take(&mut lit)));
                }
                out.push(Piece::Slot(name.to_string()));
                i = j + 1;
                continue;
            }
        }
        let ch = text[i..].chars().next().unwrap();
        lit.push(ch);
        i += ch.len_utf8();
    }
    if !lit.is_empty() {
        out.push(Piece::Text(lit));
    }
    out
}

/// True when `rendered` is `template` with each slot replaced by some text:
/// all literal bytes appear in order, anchored at both ends.
pub fn literal_bytes_preserved(template: &str, rendered: &str) -> bool {
    let pieces = split_template(template);
    let mut pos = 0;
    let mut after_slot = false;
    for (idx, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Slot(_) => after_slot = true,
            Piece::Text(t) => {
                let last = idx == pieces.len() - 1;
                let found = if !after_slot {
                    rendered[pos..].starts_with(t.as_str()).then_some(pos)
                } else if last {
                    rendered[pos..]
                        .ends_with(t.as_str())
                        .then(|| rendered.len() - t.len())
                } else {
                    rendered[pos..].find(t.as_str()).map(|f| pos + f)
                };
                match found {
                    Some(at) if at >= pos => pos = at + t.len(),
                    _ => return false,
                }
                after_slot = false;
            }
        }
    }
    after_slot || pos == rendered.len()
}

/// Records every prompt it is sent and never answers usefully.
#[derive(Default)]
pub struct Recorder(pub std::sync::Mutex<Vec<Vec<coevolve::explorer::ChatMessage>>>);

impl coevolve::explorer::ChatTransport for Recorder {
    fn complete(&self, messages: &[coevolve::explorer::ChatMessage]) -> coevolve::Result<String> {
        self.0.lock().unwrap().push(messages.to_vec());
        Ok("no structured content here".into())
    }
}

fn substitute(template: &str, values: &BTreeMap<String, String>) -> String {
    split_template(template)
        .into_iter()
        .map(|p| match p {
            Piece::Text(t) => t,
            Piece::Slot(name) => values[&name].clone(),
        })
        .collect()
}

fn annotation_for(kind: coevolve::model::SignalKind, t: &Trajectory) -> SignalAnnotation {
    use coevolve::model::SignalKind;
    let evidence = match kind {
        SignalKind::Forgetting => Evidence::Forgetting {
            prior_score: 1.0,
            current_score: 0.0,
        },
        SignalKind::Boundary => Evidence::Boundary {
            success_index: 1,
            success_score: 1.0,
            failure_index: 0,
            failure_score: 0.0,
        },
        SignalKind::Rare => Evidence::Rare {
            pattern: Pattern(t.tool_names().take(3).map(str::to_string).collect()),
            count: 1,
            total: 120,
        },
    };
    SignalAnnotation {
        traj_id: t.traj_id.clone(),
        task_id: t.task_id.clone(),
        evidence,
        detected_at_step: 4,
    }
}

/// Checks every prompt asset, rendered both directly and through the code
/// paths that send it, against the asset file on disk. Returns one
/// `(label, ok)` entry per rendered prompt.
pub fn template_fidelity() -> Vec<(String, bool)> {
    use coevolve::explorer::{build_context, exploration_messages, render_guidance, Summarizer};
    use coevolve::model::SignalKind;
    use coevolve::prompts::Prompt;
    use coevolve::synthesis::{
        abstract_tasks, aggregate_triplets, validate_task_judged, Abstractor, ReplayExecutor,
    };

    let mut out = Vec::new();
    let disk = |p: Prompt| std::fs::read_to_string(prompt_dir().join(p.file_name())).unwrap();

    let mut r = rng(99);
    for p in Prompt::ALL {
        let text = disk(p);
        out.push((
            format!("{} embedded copy", p.file_name()),
            text == p.source(),
        ));
        let values: BTreeMap<String, String> = p
            .template()
            .placeholders()
            .into_iter()
            .map(|n| {
                (
                    n.to_string(),
                    format!("<<{n}:{}\nline two>>", r.gen::<u32>()),
                )
            })
            .collect();
        let pairs: Vec<(&str, &str)> = values
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        let rendered = p.render(&pairs).unwrap();
        let ok =
            rendered == substitute(&text, &values) && literal_bytes_preserved(&text, &rendered);
        out.push((format!("{} direct render", p.file_name()), ok));
    }

    let env = Env::new(coevolve::env::generate_env(7, 12, 4).unwrap()).unwrap();
    let goal = env.goals_with_min_length(3)[0].clone();
    let task = TaskSpec {
        goal_id: goal.clone(),
        ..dummy_task()
    };
    let mut policy = Policy::new(256, env.num_tools(), 1.0);
    for x in policy.params_mut() {
        *x = r.gen_range(-1.0..1.0);
    }
    let traj = coevolve::grpo::rollout(&policy, &env, &task, 1.0, 5, 0, 4)
        .unwrap()
        .trajectory;
    let recorder = Recorder::default();
    for kind in SignalKind::ALL {
        let ann = annotation_for(kind, &traj);
        let ctx = build_context(&ann, &traj, &task, &env, &Summarizer::RuleBased).unwrap();
        let guidance = render_guidance(&ctx, kind).unwrap();
        let asset = coevolve::explorer::guidance_prompt(kind);
        out.push((
            format!("{} via exploration context", asset.file_name()),
            literal_bytes_preserved(&disk(asset), &guidance),
        ));
        let [system, user] = exploration_messages(&guidance, &env.describe(Some(0)), &[]).unwrap();
        out.push((
            "exploration messages".into(),
            literal_bytes_preserved(&disk(Prompt::ExplorationSystem), &system.content)
                && literal_bytes_preserved(&disk(Prompt::ExplorationUser), &user.content),
        ));
        build_context(&ann, &traj, &task, &env, &Summarizer::Remote(&recorder)).unwrap();
    }

    let backend = coevolve::explorer::scripted_backend(&env, 0.2).unwrap();
    let run =
        coevolve::explorer::explore_unguided(&env, &task.task_id, 2, 12, &backend, 3).unwrap();
    let groups = aggregate_triplets(&run.triplets);
    let histories: Vec<String> = groups
        .values()
        .map(coevolve::synthesis::interaction_history)
        .collect();
    for rollouts in groups.values() {
        abstract_tasks(
            rollouts,
            &env,
            &task.task_id,
            coevolve::model::SignalSource::Rare,
            &Abstractor::Remote(&recorder),
        )
        .unwrap();
    }
    let pair = TaskSolutionPair {
        query: "obtain it".into(),
        goal_id: goal.clone(),
        action_sequence: env.oracle_solve(&goal).unwrap(),
        source_task_id: task.task_id.clone(),
        source_signal: coevolve::model::SignalSource::Rare,
    };
    validate_task_judged(&pair, &env, &ReplayExecutor, &recorder);

    let sent = recorder.0.lock().unwrap();
    let task_line = format!("Task: {}", task.task_id);
    for (asset, marker) in [
        (Prompt::ContextSummary, task_line.as_str()),
        (Prompt::TaskAbstraction, histories[0].as_str()),
        (Prompt::TaskValidation, "obtain it"),
    ] {
        let text = disk(asset);
        let matching: Vec<_> = sent
            .iter()
            .filter(|m| m.len() == 1 && literal_bytes_preserved(&text, &m[0].content))
            .collect();
        let ok = !matching.is_empty() && matching.iter().any(|m| m[0].content.contains(marker));
        out.push((format!("{} via remote request", asset.file_name()), ok));
    }
    out
}
