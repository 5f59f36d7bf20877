//! Deterministic offline provider driven by a fixtures file.
//!
//! Each fixture line is `{"match": {"prompt_contains": "..."} | {"prompt_hash": "<sha256 hex>"}, "response": "..."}`.
//! The first fixture in file order that matches a prompt wins.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::llm::{ChatExchange, ChatProvider, ChatRequest, LlmConfig, LlmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMatch {
    PromptContains(String),
    PromptHash(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    pub response: String,
}

impl Fixture {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Fixture { matcher: FixtureMatch::PromptContains(needle.into()), response: response.into() }
    }

    pub fn exact(prompt: &str, response: impl Into<String>) -> Self {
        Fixture { matcher: FixtureMatch::PromptHash(prompt_hash(prompt)), response: response.into() }
    }
}

/// What to answer when no fixture matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockDefault {
    /// Reply with the prompt itself.
    Echo,
    #[default]
    Error,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn write_fixtures(path: &Path, fixtures: &[Fixture]) -> std::io::Result<()> {
    let mut out = String::new();
    for f in fixtures {
        out.push_str(&serde_json::to_string(f).expect("fixture serialises"));
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    fixtures: Vec<Fixture>,
    by_hash: HashMap<String, Vec<usize>>,
    contains: Vec<usize>,
    default: MockDefault,
}

impl MockProvider {
    pub fn new(fixtures: Vec<Fixture>, default: MockDefault) -> Self {
        let mut by_hash: HashMap<String, Vec<usize>> = HashMap::new();
        let mut contains = Vec::new();
        for (i, f) in fixtures.iter().enumerate() {
            match &f.matcher {
                FixtureMatch::PromptHash(h) => by_hash.entry(h.to_ascii_lowercase()).or_default().push(i),
                FixtureMatch::PromptContains(_) => contains.push(i),
            }
        }
        MockProvider { fixtures, by_hash, contains, default }
    }

    pub fn load(path: &Path, default: MockDefault) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Configuration(format!("cannot read fixtures {}: {e}", path.display())))?;
        let mut fixtures = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Fixture = serde_json::from_str(line)
                .map_err(|e| LlmError::Configuration(format!("fixtures line {}: {e}", i + 1)))?;
            fixtures.push(f);
        }
        Ok(MockProvider::new(fixtures, default))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    /// Indices of all fixtures matching `prompt`, in file order.
    fn matches(&self, prompt: &str) -> Vec<usize> {
        let mut hits: Vec<usize> = self.by_hash.get(&prompt_hash(prompt)).cloned().unwrap_or_default();
        hits.extend(self.contains.iter().copied().filter(|&i| match &self.fixtures[i].matcher {
            FixtureMatch::PromptContains(needle) => prompt.contains(needle.as_str()),
            FixtureMatch::PromptHash(_) => false,
        }));
        hits.sort_unstable();
        hits
    }

    pub fn resolve(&self, prompt: &str) -> Option<&str> {
        let hits = self.matches(prompt);
        if hits.len() > 1 {
            log::warn!("{} fixtures match one prompt; using fixture {}", hits.len(), hits[0] + 1);
        }
        hits.first().map(|&i| self.fixtures[i].response.as_str())
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, config: &LlmConfig, prompt: &str) -> Result<ChatExchange, LlmError> {
        if prompt.is_empty() {
            return Err(LlmError::Provider("empty prompt".into()));
        }
        let response = match (self.resolve(prompt), self.default) {
            (Some(r), _) => r.to_string(),
            (None, MockDefault::Echo) => prompt.to_string(),
            (None, MockDefault::Error) => return Err(LlmError::Provider("mock: no fixture matches prompt".into())),
        };
        let body = ChatRequest::single_turn(config, prompt);
        Ok(ChatExchange {
            request_prompt: prompt.to_string(),
            messages: body.messages,
            response_text: response,
            model_id: config.model_id.clone(),
            latency_ms: 0,
            prompt_tokens: None,
            completion_tokens: None,
            retry_count: 0,
            timestamp: Utc::now(),
        })
    }
}
