//! Stateless chat-completion client for OpenAI-compatible endpoints.
//!
//! Every interaction is a single POST carrying exactly one user message and
//! no system message. Nothing is carried between calls, so two requests can
//! never leak context into each other.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

fn default_temperature() -> f64 {
    0.2
}
fn default_top_p() -> f64 {
    1.0
}
fn default_max_output_tokens() -> u32 {
    2048
}
fn default_timeout_seconds() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}

/// Decoding and transport settings for one model. There is deliberately no
/// system-prompt field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// Roster display name, e.g. "GPT-4o-mini". Defaults to the model id.
    #[serde(default)]
    pub name: String,
    pub model_id: String,
    pub endpoint_url: String,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_seconds")]
    pub timeout_seconds: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

impl LlmConfig {
    pub fn new(model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        let model_id = model_id.into();
        LlmConfig {
            name: model_id.clone(),
            model_id,
            endpoint_url: endpoint_url.into(),
            api_key_env: None,
            temperature: default_temperature(),
            top_p: default_top_p(),
            max_output_tokens: default_max_output_tokens(),
            timeout_seconds: default_timeout_seconds(),
            max_retries: default_max_retries(),
        }
    }

    /// A config for the offline mock provider.
    pub fn mock(model_id: impl Into<String>) -> Self {
        LlmConfig::new(model_id, "mock://")
    }

    pub fn display_name(&self) -> &str {
        if self.name.is_empty() {
            &self.model_id
        } else {
            &self.name
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: String| Err(LlmError::Configuration(format!("{}: {m}", self.model_id)));
        if self.model_id.trim().is_empty() {
            return bad("empty model id".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        if self.timeout_seconds == 0 {
            return bad("timeout_seconds must be positive".into());
        }
        Ok(())
    }
}

/// Loads a model roster: a JSON array of [`LlmConfig`] entries.
pub fn load_roster(path: &Path) -> Result<Vec<LlmConfig>, LlmError> {
    let text = fs::read_to_string(path)
        .map_err(|e| LlmError::Configuration(format!("cannot read roster {}: {e}", path.display())))?;
    let mut roster: Vec<LlmConfig> = serde_json::from_str(&text)
        .map_err(|e| LlmError::Configuration(format!("invalid roster {}: {e}", path.display())))?;
    for cfg in &mut roster {
        if cfg.name.is_empty() {
            cfg.name = cfg.model_id.clone();
        }
        cfg.validate()?;
    }
    Ok(roster)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// The wire body of a chat-completions request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// The only way requests are built: one user message, nothing else.
    pub fn single_turn(config: &LlmConfig, prompt: &str) -> Self {
        ChatRequest {
            model: config.model_id.clone(),
            messages: vec![ChatMessage { role: Role::User, content: prompt.to_string() }],
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_output_tokens,
        }
    }
}

/// One request/response pair with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request_prompt: String,
    /// Messages exactly as sent.
    pub messages: Vec<ChatMessage>,
    pub response_text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub retry_count: u32,
    pub timestamp: DateTime<Utc>,
}

impl ChatExchange {
    /// Single user message and no system message.
    pub fn is_single_turn(&self) -> bool {
        self.messages.len() == 1 && self.messages[0].role == Role::User && self.messages[0].content == self.request_prompt
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    /// Transient or provider-side failure; the task is recorded as an error
    /// and the run continues.
    #[error("provider error: {0}")]
    Provider(String),
    /// Misconfiguration (bad credentials, unknown model); aborts the run.
    #[error("configuration error: {0}")]
    Configuration(String),
}

impl LlmError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, LlmError::Configuration(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, config: &LlmConfig, prompt: &str) -> Result<ChatExchange, LlmError>;
}

/// Exponential backoff with jitter. Successive delays never shrink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_secs(1), cap: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn backoff(&self) -> Backoff {
        Backoff { policy: *self, attempt: 0, previous: Duration::ZERO }
    }
}

#[derive(Debug, Clone)]
pub struct Backoff {
    policy: RetryPolicy,
    attempt: u32,
    previous: Duration,
}

impl Backoff {
    /// Delay before the next attempt: uniformly in [ceiling/2, ceiling] where
    /// ceiling = min(cap, base·2^n), floored at the previous delay.
    pub fn next_delay(&mut self, rng: &mut impl Rng) -> Duration {
        let factor = 2u32.saturating_pow(self.attempt.min(30));
        let ceiling = self.policy.base.saturating_mul(factor).min(self.policy.cap);
        let jitter: f64 = rng.random_range(0.5..=1.0);
        let delay = ceiling.mul_f64(jitter).max(self.previous);
        self.attempt += 1;
        self.previous = delay;
        delay
    }
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

enum Attempt {
    Done(String, Option<WireUsage>),
    Retry(String),
    Fatal(LlmError),
}

/// Client for `POST {endpoint_url}/chat/completions`.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    keys: HashMap<String, String>,
    retry: RetryPolicy,
}

impl HttpProvider {
    /// Resolves every model's credentials up front so a missing key fails
    /// before any work starts.
    pub fn new(models: &[LlmConfig]) -> Result<Self, LlmError> {
        let mut keys = HashMap::new();
        for cfg in models {
            cfg.validate()?;
            if let Some(var) = &cfg.api_key_env {
                let key = std::env::var(var).map_err(|_| {
                    LlmError::Configuration(format!("{}: environment variable {var} is not set", cfg.model_id))
                })?;
                keys.insert(cfg.model_id.clone(), key);
            }
        }
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Configuration(format!("http client: {e}")))?;
        Ok(HttpProvider { client, keys, retry: RetryPolicy::default() })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, config: &LlmConfig, body: &ChatRequest) -> Attempt {
        let url = format!("{}/chat/completions", config.endpoint_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).timeout(Duration::from_secs(config.timeout_seconds)).json(body);
        if let Some(key) = self.keys.get(&config.model_id) {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        let text = resp.text().unwrap_or_default();
        if status.is_client_error() {
            return Attempt::Fatal(LlmError::Configuration(format!("{}: HTTP {status}: {text}", config.model_id)));
        }
        if text.trim().is_empty() {
            return Attempt::Fatal(LlmError::Provider("empty response body".into()));
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(LlmError::Provider(format!("malformed response: {e}"))),
        };
        match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
            Some(content) if !content.is_empty() => Attempt::Done(content, parsed.usage),
            _ => Attempt::Fatal(LlmError::Provider("response has no message content".into())),
        }
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, config: &LlmConfig, prompt: &str) -> Result<ChatExchange, LlmError> {
        if prompt.is_empty() {
            return Err(LlmError::Provider("empty prompt".into()));
        }
        let body = ChatRequest::single_turn(config, prompt);
        let mut backoff = self.retry.backoff();
        let mut rng = rand::rng();
        let started = Instant::now();
        let mut retries = 0;
        loop {
            match self.attempt(config, &body) {
                Attempt::Done(text, usage) => {
                    return Ok(ChatExchange {
                        request_prompt: prompt.to_string(),
                        messages: body.messages,
                        response_text: text,
                        model_id: config.model_id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        prompt_tokens: usage.as_ref().and_then(|u| u.prompt_tokens),
                        completion_tokens: usage.as_ref().and_then(|u| u.completion_tokens),
                        retry_count: retries,
                        timestamp: Utc::now(),
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if retries >= config.max_retries {
                        return Err(LlmError::Provider(format!("{reason} after {retries} retries")));
                    }
                    let delay = backoff.next_delay(&mut rng);
                    log::debug!("{}: {reason}; retrying in {delay:?}", config.model_id);
                    std::thread::sleep(delay);
                    retries += 1;
                }
            }
        }
    }
}
