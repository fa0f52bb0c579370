//! Prompt templates shipped as text assets.
//!
//! A template is plain text with `{name}` placeholders, where `name` matches
//! `[a-z_][a-z0-9_]*`. Any other brace is literal, so JSON schemas inside a
//! template need no escaping.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const ACTION_OPEN: &str = "<action>";
pub const ACTION_CLOSE: &str = "</action>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Prompt {
    ExplorationSystem,
    ExplorationUser,
    GuidanceForgetting,
    GuidanceRare,
    GuidanceBoundary,
    ContextSummary,
    TaskAbstraction,
    TaskValidation,
    ActionFormat,
    AbstractionOutputFormat,
}

impl Prompt {
    pub const ALL: [Prompt; 10] = [
        Prompt::ExplorationSystem,
        Prompt::ExplorationUser,
        Prompt::GuidanceForgetting,
        Prompt::GuidanceRare,
        Prompt::GuidanceBoundary,
        Prompt::ContextSummary,
        Prompt::TaskAbstraction,
        Prompt::TaskValidation,
        Prompt::ActionFormat,
        Prompt::AbstractionOutputFormat,
    ];

    /// Asset file name under `assets/prompts/`.
    pub fn file_name(self) -> &'static str {
        match self {
            Prompt::ExplorationSystem => "exploration_system.txt",
            Prompt::ExplorationUser => "exploration_user.txt",
            Prompt::GuidanceForgetting => "guidance_forgetting.txt",
            Prompt::GuidanceRare => "guidance_rare.txt",
            Prompt::GuidanceBoundary => "guidance_boundary.txt",
            Prompt::ContextSummary => "context_summary.txt",
            Prompt::TaskAbstraction => "task_abstraction.txt",
            Prompt::TaskValidation => "task_validation.txt",
            Prompt::ActionFormat => "action_format.txt",
            Prompt::AbstractionOutputFormat => "abstraction_output_format.txt",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Prompt::ExplorationSystem => include_str!("../assets/prompts/exploration_system.txt"),
            Prompt::ExplorationUser => include_str!("../assets/prompts/exploration_user.txt"),
            Prompt::GuidanceForgetting => include_str!("../assets/prompts/guidance_forgetting.txt"),
            Prompt::GuidanceRare => include_str!("../assets/prompts/guidance_rare.txt"),
            Prompt::GuidanceBoundary => include_str!("../assets/prompts/guidance_boundary.txt"),
            Prompt::ContextSummary => include_str!("../assets/prompts/context_summary.txt"),
            Prompt::TaskAbstraction => include_str!("../assets/prompts/task_abstraction.txt"),
            Prompt::TaskValidation => include_str!("../assets/prompts/task_validation.txt"),
            Prompt::ActionFormat => include_str!("../assets/prompts/action_format.txt"),
            Prompt::AbstractionOutputFormat => {
                include_str!("../assets/prompts/abstraction_output_format.txt")
            }
        }
    }

    pub fn template(self) -> &'static Template {
        static CACHE: OnceLock<BTreeMap<Prompt, Template>> = OnceLock::new();
        &CACHE.get_or_init(|| {
            Prompt::ALL
                .iter()
                .map(|&p| (p, Template::parse(p.source())))
                .collect()
        })[&self]
    }

    pub fn render(self, values: &[(&str, &str)]) -> Result<String> {
        self.template().render(values)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

fn is_name_start(c: u8) -> bool {
    c.is_ascii_lowercase() || c == b'_'
}

fn is_name_char(c: u8) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_'
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let bytes = text.as_bytes();
        let mut segments = Vec::new();
        let mut lit_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' && i + 1 < bytes.len() && is_name_start(bytes[i + 1]) {
                let mut j = i + 1;
                while j < bytes.len() && is_name_char(bytes[j]) {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    if lit_start < i {
                        segments.push(Segment::Literal(text[lit_start..i].to_string()));
                    }
                    segments.push(Segment::Placeholder(text[i + 1..j].to_string()));
                    i = j + 1;
                    lit_start = i;
                    continue;
                }
            }
            i += 1;
        }
        if lit_start < bytes.len() {
            segments.push(Segment::Literal(text[lit_start..].to_string()));
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.segments {
            if let Segment::Placeholder(p) = s {
                if !out.contains(&p.as_str()) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Fills every placeholder. Missing or unknown names are errors.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String> {
        let names = self.placeholders();
        for (k, _) in values {
            if !names.contains(k) {
                return Err(Error::domain(format!("template has no placeholder `{k}`")));
            }
        }
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(p) => {
                    let v = values.iter().find(|(k, _)| k == p).ok_or_else(|| {
                        Error::domain(format!("missing value for placeholder `{p}`"))
                    })?;
                    out.push_str(v.1);
                }
            }
        }
        Ok(out)
    }

    /// Recovers placeholder values from a rendered string, or `None` if the
    /// text differs from the template anywhere outside placeholder sites.
    /// Values are matched leftmost, so they must not contain the literal
    /// text that follows them.
    pub fn match_rendered(&self, text: &str) -> Option<Vec<(String, String)>> {
        let mut pos = 0;
        let mut pending: Option<&str> = None;
        let mut out = Vec::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => match pending.take() {
                    None => {
                        if !text[pos..].starts_with(l.as_str()) {
                            return None;
                        }
                        pos += l.len();
                    }
                    Some(name) => {
                        let at = text[pos..].find(l.as_str())?;
                        out.push((name.to_string(), text[pos..pos + at].to_string()));
                        pos += at + l.len();
                    }
                },
                Segment::Placeholder(p) => {
                    if let Some(prev) = pending.replace(p) {
                        // Adjacent placeholders are ambiguous; give the first nothing.
                        out.push((prev.to_string(), String::new()));
                    }
                }
            }
        }
        match pending {
            Some(name) => {
                out.push((name.to_string(), text[pos..].to_string()));
                Some(out)
            }
            None => (pos == text.len()).then_some(out),
        }
    }
}

/// Text between the first action tag pair, trimmed.
pub fn extract_action_text(reply: &str) -> Option<&str> {
    let start = reply.find(ACTION_OPEN)? + ACTION_OPEN.len();
    let len = reply[start..].find(ACTION_CLOSE)?;
    let inner = reply[start..start + len].trim();
    (!inner.is_empty()).then_some(inner)
}
