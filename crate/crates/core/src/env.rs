//! A seeded tool-dependency environment.
//!
//! Each tool consumes a set of resources and produces one resource. The
//! dependency graph is a layered DAG, so every resource is reachable from the
//! empty inventory and the shortest solution for a goal is exactly its set of
//! ancestor tools. A task names a goal resource; the episode ends with reward
//! 1 the first time that resource is held, or with reward 0 when the step cap
//! is hit.
//!
//! [`EnvSpec`] is the serializable description; [`Env`] is the validated,
//! index-compiled form used at runtime.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, GoalId, TaskSpec};
use crate::seed;

pub const MAX_RESOURCES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub requires: Vec<String>,
    pub produces: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub seed: u64,
    pub tools: Vec<ToolSpec>,
    pub resources: Vec<String>,
    pub goals: BTreeMap<GoalId, String>,
    pub max_steps: usize,
    /// Partial rewards paid the first time a resource is acquired. Empty for
    /// generated environments; used by graded fixtures.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subgoal_rewards: BTreeMap<String, f64>,
}

impl EnvSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Inventory bitset over resource indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ResourceSet(pub u64);

impl ResourceSet {
    pub fn contains(self, r: usize) -> bool {
        self.0 & (1 << r) != 0
    }

    pub fn with(self, r: usize) -> Self {
        ResourceSet(self.0 | (1 << r))
    }

    pub fn is_superset(self, other: ResourceSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_RESOURCES).filter(move |&r| self.contains(r))
    }
}

#[derive(Debug, Clone, Copy)]
struct CompiledTool {
    requires: ResourceSet,
    produces: usize,
}

/// Validated environment with index lookups.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    tools: Vec<CompiledTool>,
    tool_index: BTreeMap<String, usize>,
    resource_index: BTreeMap<String, usize>,
    goal_resource: BTreeMap<GoalId, usize>,
    /// Resource -> goal id targeting it, if any.
    goal_of_resource: Vec<Option<GoalId>>,
    producer: Vec<Vec<usize>>,
    subgoal_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub owned: ResourceSet,
    pub steps_taken: usize,
    pub done: bool,
    pub succeeded: bool,
    /// Target resource; `None` for open-ended sandbox episodes.
    pub goal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: String,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    /// Validates names, acyclicity and reachability.
    pub fn new(spec: EnvSpec) -> Result<Self> {
        if spec.resources.len() > MAX_RESOURCES {
            return Err(Error::Env(format!(
                "at most {MAX_RESOURCES} resources supported"
            )));
        }
        if spec.max_steps == 0 {
            return Err(Error::Env("max_steps must be positive".into()));
        }
        let mut resource_index = BTreeMap::new();
        for (i, r) in spec.resources.iter().enumerate() {
            if resource_index.insert(r.clone(), i).is_some() {
                return Err(Error::Env(format!("duplicate resource `{r}`")));
            }
        }
        let lookup = |name: &str| {
            resource_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Env(format!("unknown resource `{name}`")))
        };
        let mut tools = Vec::with_capacity(spec.tools.len());
        let mut tool_index = BTreeMap::new();
        let mut producer = vec![Vec::new(); spec.resources.len()];
        for (i, t) in spec.tools.iter().enumerate() {
            if tool_index.insert(t.name.clone(), i).is_some() {
                return Err(Error::Env(format!("duplicate tool `{}`", t.name)));
            }
            let mut requires = ResourceSet::default();
            for r in &t.requires {
                requires = requires.with(lookup(r)?);
            }
            let produces = lookup(&t.produces)?;
            if requires.contains(produces) {
                return Err(Error::Env(format!(
                    "tool `{}` requires its own product",
                    t.name
                )));
            }
            producer[produces].push(i);
            tools.push(CompiledTool { requires, produces });
        }
        let mut goal_resource = BTreeMap::new();
        let mut goal_of_resource = vec![None; spec.resources.len()];
        for (g, r) in &spec.goals {
            let ri = lookup(r)?;
            goal_resource.insert(g.clone(), ri);
            goal_of_resource[ri].get_or_insert_with(|| g.clone());
        }
        let mut subgoal_rewards = vec![0.0; spec.resources.len()];
        for (r, v) in &spec.subgoal_rewards {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Env(format!(
                    "subgoal reward for `{r}` must be finite and >= 0"
                )));
            }
            subgoal_rewards[lookup(r)?] = *v;
        }
        let env = Env {
            spec,
            tools,
            tool_index,
            resource_index,
            goal_resource,
            goal_of_resource,
            producer,
            subgoal_rewards,
        };
        env.check_acyclic()?;
        let reachable = env.reachable_from_empty();
        for (g, &r) in &env.goal_resource {
            if !reachable.contains(r) {
                return Err(Error::Env(format!("goal {g} is unreachable")));
            }
        }
        Ok(env)
    }

    fn check_acyclic(&self) -> Result<()> {
        // Kahn over resources: edge required -> produced.
        let n = self.spec.resources.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in &self.tools {
            for r in t.requires.iter() {
                out[r].push(t.produces);
                indeg[t.produces] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&r| indeg[r] == 0).collect();
        let mut seen = 0;
        while let Some(r) = queue.pop_front() {
            seen += 1;
            for &s in &out[r] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if seen != n {
            return Err(Error::Env("tool dependency graph has a cycle".into()));
        }
        Ok(())
    }

    fn reachable_from_empty(&self) -> ResourceSet {
        let mut owned = ResourceSet::default();
        loop {
            let before = owned;
            for t in &self.tools {
                if owned.is_superset(t.requires) {
                    owned = owned.with(t.produces);
                }
            }
            if owned == before {
                return owned;
            }
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_tools(&self) -> usize {
        self.tools.len()
    }

    pub fn tool_name(&self, i: usize) -> &str {
        &self.spec.tools[i].name
    }

    pub fn tool_by_name(&self, name: &str) -> Option<usize> {
        self.tool_index.get(name).copied()
    }

    pub fn resource_name(&self, r: usize) -> &str {
        &self.spec.resources[r]
    }

    pub fn resource_by_name(&self, name: &str) -> Option<usize> {
        self.resource_index.get(name).copied()
    }

    pub fn tool_requires(&self, i: usize) -> ResourceSet {
        self.tools[i].requires
    }

    pub fn tool_produces(&self, i: usize) -> usize {
        self.tools[i].produces
    }

    pub fn goal_resource(&self, goal: &GoalId) -> Option<usize> {
        self.goal_resource.get(goal).copied()
    }

    pub fn goal_for_resource(&self, r: usize) -> Option<&GoalId> {
        self.goal_of_resource.get(r).and_then(Option::as_ref)
    }

    pub fn goals(&self) -> impl Iterator<Item = (&GoalId, usize)> {
        self.goal_resource.iter().map(|(g, &r)| (g, r))
    }

    /// Every resource that must be held to produce `r`, including `r`.
    /// Uses the first producer of each resource; generated environments have
    /// exactly one.
    pub fn closure(&self, r: usize) -> ResourceSet {
        let mut set = ResourceSet::default();
        let mut stack = vec![r];
        while let Some(x) = stack.pop() {
            if set.contains(x) {
                continue;
            }
            set = set.with(x);
            if let Some(&t) = self.producer[x].first() {
                stack.extend(self.tools[t].requires.iter());
            }
        }
        set
    }

    /// Tools that consume resource `r`.
    pub fn consumers(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.tools.len()).filter(move |&t| self.tools[t].requires.contains(r))
    }

    /// Goals whose shortest solution is at least `min_len` actions long.
    pub fn goals_with_min_length(&self, min_len: usize) -> Vec<GoalId> {
        self.goals()
            .filter(|&(g, _)| self.oracle_solve(g).is_ok_and(|s| s.len() >= min_len))
            .map(|(g, _)| g.clone())
            .collect()
    }

    pub fn reset(&self, task: &TaskSpec) -> Result<EnvState> {
        let goal = self
            .goal_resource(&task.goal_id)
            .ok_or_else(|| Error::Env(format!("unknown goal {}", task.goal_id)))?;
        Ok(self.reset_to(goal))
    }

    pub fn reset_to(&self, goal: usize) -> EnvState {
        EnvState {
            owned: ResourceSet::default(),
            steps_taken: 0,
            done: false,
            succeeded: false,
            goal: Some(goal),
        }
    }

    /// Open-ended episode with no target; ends only at the step cap.
    pub fn reset_free(&self) -> EnvState {
        EnvState {
            owned: ResourceSet::default(),
            steps_taken: 0,
            done: false,
            succeeded: false,
            goal: None,
        }
    }

    pub fn step(&self, state: &mut EnvState, action: &Action) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Env("episode already finished".into()));
        }
        match self.tool_by_name(&action.tool) {
            Some(i) if action.args.is_empty() => self.step_tool(state, i),
            Some(_) => {
                Ok(self.wasted_step(state, format!("Error: {} takes no arguments.", action.tool)))
            }
            None => Ok(self.wasted_step(state, format!("Error: unknown tool `{}`.", action.tool))),
        }
    }

    fn wasted_step(&self, state: &mut EnvState, mut observation: String) -> StepOutcome {
        state.steps_taken += 1;
        let done = self.check_cap(state, &mut observation);
        StepOutcome {
            observation,
            reward: 0.0,
            done,
        }
    }

    fn check_cap(&self, state: &mut EnvState, observation: &mut String) -> bool {
        if !state.done && state.steps_taken >= self.spec.max_steps {
            state.done = true;
            observation.push_str(" Step limit reached.");
        }
        state.done
    }

    /// Executes tool `i`. The fast path used by policy rollouts.
    pub fn step_tool(&self, state: &mut EnvState, i: usize) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Env("episode already finished".into()));
        }
        let tool = self.tools[i];
        let name = &self.spec.tools[i].name;
        let missing = ResourceSet(tool.requires.0 & !state.owned.0);
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|r| self.resource_name(r)).collect();
            return Ok(self.wasted_step(
                state,
                format!(
                    "Error: {name} requires {} which you do not hold.",
                    names.join(", ")
                ),
            ));
        }
        state.steps_taken += 1;
        let product = self.resource_name(tool.produces);
        let mut reward = 0.0;
        let mut observation;
        if state.owned.contains(tool.produces) {
            observation = format!("OK: {name} ran but {product} is already held.");
        } else {
            state.owned = state.owned.with(tool.produces);
            observation = format!("OK: {name} produced {product}.");
            reward += self.subgoal_rewards[tool.produces];
            if state.goal == Some(tool.produces) {
                state.done = true;
                state.succeeded = true;
                reward = 1.0;
                observation.push_str(" Goal reached.");
            }
        }
        self.check_cap(state, &mut observation);
        Ok(StepOutcome {
            observation,
            reward,
            done: state.done,
        })
    }

    /// Tools whose requirements are met in `owned`.
    pub fn executable(&self, owned: ResourceSet) -> impl Iterator<Item = usize> + '_ {
        (0..self.tools.len()).filter(move |&t| owned.is_superset(self.tools[t].requires))
    }

    /// Shortest tool sequence reaching the goal, by breadth-first search over
    /// inventories. Ties resolve toward lower tool indices.
    pub fn oracle_solve(&self, goal: &GoalId) -> Result<Vec<Action>> {
        let target = self
            .goal_resource(goal)
            .ok_or_else(|| Error::Env(format!("unknown goal {goal}")))?;
        self.oracle_from(ResourceSet::default(), target)
            .map(|path| {
                path.into_iter()
                    .map(|t| Action::tool(self.tool_name(t)))
                    .collect()
            })
            .ok_or_else(|| Error::Env(format!("goal {goal} is unreachable")))
    }

    /// Shortest tool-index path from `start` to holding `target`.
    pub fn oracle_from(&self, start: ResourceSet, target: usize) -> Option<Vec<usize>> {
        if start.contains(target) {
            return Some(Vec::new());
        }
        let mut parent: BTreeMap<ResourceSet, (ResourceSet, usize)> = BTreeMap::new();
        let mut queue = VecDeque::from([start]);
        parent.insert(start, (start, usize::MAX));
        while let Some(s) = queue.pop_front() {
            for t in 0..self.tools.len() {
                let tool = self.tools[t];
                if !s.is_superset(tool.requires) || s.contains(tool.produces) {
                    continue;
                }
                let next = s.with(tool.produces);
                if parent.contains_key(&next) {
                    continue;
                }
                parent.insert(next, (s, t));
                if tool.produces == target {
                    let mut path = vec![t];
                    let mut cur = s;
                    while cur != start {
                        let (prev, tt) = parent[&cur];
                        path.push(tt);
                        cur = prev;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(next);
            }
        }
        None
    }

    /// Text shown to exploration backends: the tool catalogue and, when the
    /// episode has one, the target resource.
    pub fn describe(&self, goal: Option<usize>) -> String {
        let mut s = String::from("Tools:\n");
        for t in &self.spec.tools {
            let req = if t.requires.is_empty() {
                "nothing".to_string()
            } else {
                t.requires.join(", ")
            };
            let _ = writeln!(
                s,
                "- {}: requires {} -> produces {}",
                t.name, req, t.produces
            );
        }
        if let Some(g) = goal {
            let _ = write!(s, "Goal resource: {}", self.resource_name(g));
        } else {
            s.push_str("Goal resource: none (free exploration)");
        }
        s
    }
}

const NOUNS: &[&str] = &[
    "token",
    "session",
    "profile",
    "contact",
    "invoice",
    "ledger",
    "receipt",
    "playlist",
    "track",
    "album",
    "queue",
    "folder",
    "archive",
    "report",
    "summary",
    "calendar",
    "event",
    "ticket",
    "refund",
    "order",
    "cart",
    "coupon",
    "address",
    "route",
    "booking",
    "payment",
    "statement",
    "note",
    "draft",
    "message",
    "thread",
    "backup",
    "snapshot",
    "license",
    "badge",
    "schedule",
    "roster",
    "quote",
    "budget",
    "forecast",
    "dataset",
    "chart",
    "review",
    "invite",
    "reminder",
    "photo",
    "album_cover",
    "transcript",
    "subtitle",
    "podcast",
    "episode",
    "feed",
    "digest",
    "survey",
    "response",
    "metric",
    "alert",
    "incident",
    "patch",
    "release",
    "manifest",
    "bundle",
    "signature",
    "approval",
];

const VERBS: &[&str] = &[
    "get", "fetch", "create", "build", "compile", "issue", "open", "generate", "export", "resolve",
    "assemble", "prepare",
];

/// Probability that a non-root tool takes a second prerequisite.
const EXTRA_REQUIREMENT_P: f64 = 0.35;

/// Builds a layered tool DAG. Tool `i < depth` sits at layer `i + 1`, which
/// guarantees one chain of full depth; the remaining tools land on random
/// layers. Each tool above layer 1 requires one resource from the layer
/// directly below and sometimes one more from any lower layer.
pub fn generate_env(seed: u64, num_tools: usize, max_chain_depth: usize) -> Result<EnvSpec> {
    if max_chain_depth == 0 || num_tools < max_chain_depth {
        return Err(Error::domain(format!(
            "need num_tools >= max_chain_depth >= 1, got {num_tools} tools and depth {max_chain_depth}"
        )));
    }
    if num_tools > NOUNS.len().min(MAX_RESOURCES) {
        return Err(Error::domain(format!(
            "at most {} tools supported",
            NOUNS.len().min(MAX_RESOURCES)
        )));
    }
    let mut rng = seed::rng_for(seed, &[0xE4_7E4_u64]);
    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    nouns.truncate(num_tools);

    let layers: Vec<usize> = (0..num_tools)
        .map(|i| {
            if i < max_chain_depth {
                i + 1
            } else {
                rng.gen_range(1..=max_chain_depth)
            }
        })
        .collect();
    let mut by_layer: Vec<Vec<usize>> = vec![Vec::new(); max_chain_depth + 1];
    for (i, &l) in layers.iter().enumerate() {
        by_layer[l].push(i);
    }

    let mut tools = Vec::with_capacity(num_tools);
    for i in 0..num_tools {
        let layer = layers[i];
        let mut requires: Vec<usize> = Vec::new();
        if layer > 1 {
            requires.push(
                *by_layer[layer - 1]
                    .choose(&mut rng)
                    .expect("layer populated"),
            );
            if rng.gen_bool(EXTRA_REQUIREMENT_P) {
                let lower: Vec<usize> = (1..layer)
                    .flat_map(|l| by_layer[l].iter().copied())
                    .filter(|r| !requires.contains(r))
                    .collect();
                if let Some(&extra) = lower.choose(&mut rng) {
                    requires.push(extra);
                }
            }
        }
        requires.sort_unstable();
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        tools.push(ToolSpec {
            name: format!("{verb}_{}", nouns[i]),
            requires: requires.iter().map(|&r| nouns[r].to_string()).collect(),
            produces: nouns[i].to_string(),
        });
    }
    // Catalogue order is independent of layer.
    tools.shuffle(&mut rng);

    let goals = nouns
        .iter()
        .map(|n| (GoalId::new(format!("have_{n}")), n.to_string()))
        .collect();
    let spec = EnvSpec {
        seed,
        tools,
        resources: nouns.iter().map(|s| s.to_string()).collect(),
        goals,
        max_steps: 30,
        subgoal_rewards: BTreeMap::new(),
    };
    Env::new(spec.clone())?;
    Ok(spec)
}
