//! Prompt templates and placeholder rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder names a template body may reference as `{name}`.
pub const PLACEHOLDERS: [&str; 5] = ["code", "function", "summary", "task", "example_test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryStyle {
    Base,
    Short,
    Intent,
    Error,
    Warn,
}

impl SummaryStyle {
    pub const ALL: [SummaryStyle; 5] =
        [SummaryStyle::Base, SummaryStyle::Short, SummaryStyle::Intent, SummaryStyle::Error, SummaryStyle::Warn];

    pub fn as_str(self) -> &'static str {
        match self {
            SummaryStyle::Base => "base",
            SummaryStyle::Short => "short",
            SummaryStyle::Intent => "intent",
            SummaryStyle::Error => "error",
            SummaryStyle::Warn => "warn",
        }
    }

    pub fn template_name(self) -> &'static str {
        match self {
            SummaryStyle::Base => "summ_base",
            SummaryStyle::Short => "summ_short",
            SummaryStyle::Intent => "summ_intent",
            SummaryStyle::Error => "summ_error",
            SummaryStyle::Warn => "summ_warn",
        }
    }

    pub fn parse(s: &str) -> Option<SummaryStyle> {
        SummaryStyle::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for SummaryStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateRole {
    Summarise,
    Generate,
    DirectRepair,
    InitialSolve,
}

const FIXED_TEMPLATES: [(&str, TemplateRole, &str); 7] = [
    ("summ_base", TemplateRole::Summarise, "Summarise the following python code: {code}"),
    ("summ_short", TemplateRole::Summarise, "Summarise the following python code in one sentence: {code}"),
    (
        "summ_intent",
        TemplateRole::Summarise,
        "Summarise the following python code, be smart and infer expected functionality: {code}",
    ),
    (
        "summ_error",
        TemplateRole::Summarise,
        "Summarise the following python code, it contains at least one bug that is making a test fail: {code}",
    ),
    (
        "summ_warn",
        TemplateRole::Summarise,
        "Summarise the following python code, it is not very well written, and might have some bugs, so please work around this when writing the summary: {code}",
    ),
    ("generate", TemplateRole::Generate, "Write a python function `{function}`, satisfying the following code summary: {summary}"),
    ("direct_repair", TemplateRole::DirectRepair, "Repair the following python code: {code}"),
];

const INITIAL_SOLVE: &str =
    "Write a python function `{function}` to solve the following task: {task}\nYour solution must pass this test: {example_test}";

pub fn is_fixed_template(name: &str) -> bool {
    FIXED_TEMPLATES.iter().any(|(n, _, _)| *n == name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub role: TemplateRole,
    pub body: String,
    pub placeholders: BTreeSet<String>,
    segments: Vec<Segment>,
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .map(|close| &after[..close])
            .filter(|name| PLACEHOLDERS.contains(name));
        match slot {
            Some(name) => {
                text.push_str(&rest[..open]);
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(name.to_string()));
                rest = &after[name.len() + 1..];
            }
            None => {
                text.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    segments
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, role: TemplateRole, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse_segments(&body);
        let placeholders = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.clone()),
                Segment::Text(_) => None,
            })
            .collect();
        PromptTemplate { name: name.into(), role, body, placeholders, segments }
    }

    /// Substitutes every placeholder in one pass, so binding values that
    /// themselves contain `{code}`-like text are never re-expanded.
    pub fn render(&self, bindings: &Bindings<'_>) -> Result<String, PromptError> {
        for name in &self.placeholders {
            match bindings.get(name.as_str()) {
                None => return Err(PromptError::MissingPlaceholder(name.clone())),
                Some(&"") => return Err(PromptError::EmptyBinding(name.clone())),
                Some(_) => {}
            }
        }
        for key in bindings.keys() {
            if !self.placeholders.contains(*key) {
                log::warn!("template {}: unused binding `{key}`", self.name);
            }
        }
        let mut out = String::with_capacity(self.body.len() + bindings.values().map(|v| v.len()).sum::<usize>());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(n) => out.push_str(bindings[n.as_str()]),
            }
        }
        Ok(out)
    }
}

pub type Bindings<'a> = HashMap<&'a str, &'a str>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{name}`; valid names: {valid}")]
    UnknownTemplate { name: String, valid: String },
    #[error("missing placeholder: {0}")]
    MissingPlaceholder(String),
    #[error("empty binding for placeholder: {0}")]
    EmptyBinding(String),
    #[error("template `{0}` is a fixed template; pass --allow-template-override to replace it")]
    OverrideRejected(String),
    #[error("invalid override file: {0}")]
    OverrideFile(String),
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        for (name, role, body) in FIXED_TEMPLATES {
            templates.insert(name.to_string(), PromptTemplate::new(name, role, body));
        }
        templates.insert(
            "initial_solve".to_string(),
            PromptTemplate::new("initial_solve", TemplateRole::InitialSolve, INITIAL_SOLVE),
        );
        PromptRegistry { templates }
    }
}

impl PromptRegistry {
    /// The compiled-in registry.
    pub fn builtin() -> &'static PromptRegistry {
        static REGISTRY: OnceLock<PromptRegistry> = OnceLock::new();
        REGISTRY.get_or_init(PromptRegistry::default)
    }

    pub fn get_template(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(name).ok_or_else(|| PromptError::UnknownTemplate {
            name: name.to_string(),
            valid: self.names().collect::<Vec<_>>().join(", "),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Applies a name→body map. Bodies for the fixed templates are rejected
    /// unless `allow_fixed` is set; unknown names register new summarise styles.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, String>, allow_fixed: bool) -> Result<Self, PromptError> {
        for (name, body) in overrides {
            if is_fixed_template(name) && !allow_fixed {
                return Err(PromptError::OverrideRejected(name.clone()));
            }
            let role = self.templates.get(name).map(|t| t.role).unwrap_or(TemplateRole::Summarise);
            self.templates.insert(name.clone(), PromptTemplate::new(name.clone(), role, body.clone()));
        }
        Ok(self)
    }

    pub fn load_overrides(json: &str) -> Result<BTreeMap<String, String>, PromptError> {
        serde_json::from_str(json).map_err(|e| PromptError::OverrideFile(e.to_string()))
    }
}

pub fn get_template(name: &str) -> Result<&'static PromptTemplate, PromptError> {
    PromptRegistry::builtin().get_template(name)
}

pub fn render(template: &PromptTemplate, bindings: &Bindings<'_>) -> Result<String, PromptError> {
    template.render(bindings)
}
