//! Weakness signals mined from training rollouts.
//!
//! Three detectors run independently over each iteration's groups:
//!
//! - forgetting: the task's recent score window holds a score `>= 0.5` and
//!   the current trajectory scores `< 0.5`;
//! - boundary: a same-iteration group holds both a score `> 0.5` and a score
//!   `< 0.5`, in which case every trajectory of the group is annotated;
//! - rare: once at least `N_min` patterns have been counted, a trajectory
//!   contains a pattern with `0 < c_p / N < theta / 100`.
//!
//! A score of exactly 0.5 never witnesses success or failure.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Evidence, Pattern, RunConfig, SignalAnnotation, SignalKind, TaskId, Trajectory,
};

pub const SUCCESS_CUTOFF: f64 = 0.5;

/// Sliding window of a task's most recent scores, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistory {
    pub task_id: TaskId,
    window: usize,
    recent: VecDeque<f64>,
}

impl ScoreHistory {
    pub fn new(task_id: TaskId, window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        Self {
            task_id,
            window,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn from_scores(task_id: TaskId, window: usize, scores: &[f64]) -> Self {
        let mut h = Self::new(task_id, window);
        for &s in scores {
            h.push(s);
        }
        h
    }

    pub fn push(&mut self, score: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(score);
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn scores(&self) -> impl DoubleEndedIterator<Item = f64> + '_ {
        self.recent.iter().copied()
    }
}

/// Cumulative pattern counts over training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatternStats {
    counts: BTreeMap<Pattern, u64>,
    total: u64,
}

impl PatternStats {
    pub fn observe(&mut self, pattern: &Pattern) {
        *self.counts.entry(pattern.clone()).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, pattern: &Pattern) -> u64 {
        self.counts.get(pattern).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

/// Where score windows live. Implemented by the task pool and by
/// [`SignalState`].
pub trait HistoryStore {
    fn history(&self, task: &TaskId) -> Option<&ScoreHistory>;
    fn record(&mut self, task: &TaskId, score: f64) -> Result<()>;
}

/// Standalone detector state: per-task windows (created on first use) plus
/// pattern counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    window: usize,
    pub histories: BTreeMap<TaskId, ScoreHistory>,
    pub patterns: PatternStats,
}

impl SignalState {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            histories: BTreeMap::new(),
            patterns: PatternStats::default(),
        }
    }
}

impl HistoryStore for SignalState {
    fn history(&self, task: &TaskId) -> Option<&ScoreHistory> {
        self.histories.get(task)
    }

    fn record(&mut self, task: &TaskId, score: f64) -> Result<()> {
        let window = self.window;
        self.histories
            .entry(task.clone())
            .or_insert_with(|| ScoreHistory::new(task.clone(), window))
            .push(score);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalParams {
    pub rare_threshold: f64,
    pub rare_min_total: u64,
    pub pattern_length: usize,
}

impl From<&RunConfig> for SignalParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            rare_threshold: c.rare_threshold,
            rare_min_total: c.rare_min_total,
            pattern_length: c.pattern_length,
        }
    }
}

fn check_score(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::domain(format!("score {s} outside [0,1]")));
    }
    Ok(())
}

/// Fires when the window holds a success and the current trajectory fails.
/// The evidence carries the most recent qualifying prior score.
pub fn detect_forgetting(
    history: &ScoreHistory,
    traj: &Trajectory,
    step: usize,
) -> Result<Option<SignalAnnotation>> {
    if history.task_id != traj.task_id {
        return Err(Error::domain(format!(
            "history for {} applied to trajectory of {}",
            history.task_id, traj.task_id
        )));
    }
    let s_now = traj.score;
    check_score(s_now)?;
    if s_now >= SUCCESS_CUTOFF {
        return Ok(None);
    }
    Ok(history
        .scores()
        .rev()
        .find(|&s| s >= SUCCESS_CUTOFF)
        .map(|prior| SignalAnnotation {
            traj_id: traj.traj_id.clone(),
            task_id: traj.task_id.clone(),
            evidence: Evidence::Forgetting {
                prior_score: prior,
                current_score: s_now,
            },
            detected_at_step: step,
        }))
}

/// Annotates every trajectory of a mixed-outcome group.
pub fn detect_boundary(group: &[Trajectory], step: usize) -> Result<Vec<SignalAnnotation>> {
    let first = group.first().ok_or_else(|| Error::domain("empty group"))?;
    if group
        .iter()
        .any(|t| t.task_id != first.task_id || t.train_step != first.train_step)
    {
        return Err(Error::domain("group mixes tasks or training steps"));
    }
    let success = group.iter().position(|t| t.score > SUCCESS_CUTOFF);
    let failure = group.iter().position(|t| t.score < SUCCESS_CUTOFF);
    let (Some(si), Some(fi)) = (success, failure) else {
        return Ok(Vec::new());
    };
    let evidence = Evidence::Boundary {
        success_index: si,
        success_score: group[si].score,
        failure_index: fi,
        failure_score: group[fi].score,
    };
    Ok(group
        .iter()
        .map(|t| SignalAnnotation {
            traj_id: t.traj_id.clone(),
            task_id: t.task_id.clone(),
            evidence: evidence.clone(),
            detected_at_step: step,
        })
        .collect())
}

/// Contiguous tool-name n-grams. A non-empty trajectory shorter than `n`
/// yields its whole tool sequence as the single pattern; an empty one yields
/// nothing.
pub fn extract_pattern(t: &Trajectory, n: usize) -> Vec<Pattern> {
    assert!(n >= 1, "pattern length must be positive");
    let tools: Vec<String> = t.tool_names().map(str::to_string).collect();
    if tools.is_empty() {
        return Vec::new();
    }
    if tools.len() < n {
        return vec![Pattern(tools)];
    }
    tools.windows(n).map(|w| Pattern(w.to_vec())).collect()
}

/// Expects `stats` to already include this trajectory's patterns. Returns the
/// rarest qualifying pattern, ties broken by first occurrence.
pub fn detect_rare(
    stats: &PatternStats,
    trajectory_patterns: &[Pattern],
    traj: &Trajectory,
    params: &SignalParams,
    step: usize,
) -> Option<SignalAnnotation> {
    let total = stats.total();
    if total < params.rare_min_total {
        return None;
    }
    let cutoff = params.rare_threshold / 100.0;
    let mut best: Option<(&Pattern, u64)> = None;
    for p in trajectory_patterns {
        let c = stats.count(p);
        if c > 0 && (c as f64) / (total as f64) < cutoff && best.is_none_or(|(_, bc)| c < bc) {
            best = Some((p, c));
        }
    }
    best.map(|(p, c)| SignalAnnotation {
        traj_id: traj.traj_id.clone(),
        task_id: traj.task_id.clone(),
        evidence: Evidence::Rare {
            pattern: p.clone(),
            count: c,
            total,
        },
        detected_at_step: step,
    })
}

/// Runs all three detectors over one iteration's groups, updating the score
/// windows and pattern counts exactly once per trajectory.
///
/// Forgetting is judged against each task's window as it stood before the
/// group, so siblings sampled under the same policy never count as "prior"
/// successes. Output order: per group, per trajectory, forgetting then
/// boundary then rare.
pub fn extract_signals<H: HistoryStore>(
    groups: &[Vec<Trajectory>],
    histories: &mut H,
    patterns: &mut PatternStats,
    params: &SignalParams,
    step: usize,
) -> Result<Vec<SignalAnnotation>> {
    let mut out = Vec::new();
    for group in groups {
        let boundary = detect_boundary(group, step)?;
        let mut forgetting = Vec::with_capacity(group.len());
        for t in group {
            let hit = match histories.history(&t.task_id) {
                Some(h) => detect_forgetting(h, t, step)?,
                None => {
                    check_score(t.score)?;
                    None
                }
            };
            forgetting.push(hit);
        }
        for (k, t) in group.iter().enumerate() {
            histories.record(&t.task_id, t.score)?;
            let pats = extract_pattern(t, params.pattern_length);
            for p in &pats {
                patterns.observe(p);
            }
            if let Some(a) = forgetting[k].take() {
                out.push(a);
            }
            if let Some(a) = boundary.get(k) {
                out.push(a.clone());
            }
            if let Some(a) = detect_rare(patterns, &pats, t, params, step) {
                out.push(a);
            }
        }
    }
    Ok(out)
}

/// Per-kind annotation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalCounts {
    pub forgetting: usize,
    pub boundary: usize,
    pub rare: usize,
}

impl SignalCounts {
    pub fn tally(annotations: &[SignalAnnotation]) -> Self {
        let mut c = Self::default();
        for a in annotations {
            match a.kind() {
                SignalKind::Forgetting => c.forgetting += 1,
                SignalKind::Boundary => c.boundary += 1,
                SignalKind::Rare => c.rare += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.forgetting + self.boundary + self.rare
    }

    pub fn add(&mut self, other: &SignalCounts) {
        self.forgetting += other.forgetting;
        self.boundary += other.boundary;
        self.rare += other.rare;
    }
}
