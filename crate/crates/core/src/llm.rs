//! Minimal blocking chat-completion client.
//!
//! Speaks the widely used `POST {base_url}/chat/completions` JSON format. The
//! bearer token is read from `NAVMEM_API_KEY`. Transport failures, 429 and
//! 5xx responses are retried with exponential backoff; the number of requests
//! in flight across threads is capped.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const API_KEY_ENV: &str = "NAVMEM_API_KEY";

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

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChatError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl ChatError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ChatError::Transport(_) => true,
            ChatError::Status { status, .. } => *status == 429 || *status >= 500,
            ChatError::Decode(_) => false,
        }
    }
}

/// Anything that turns a conversation into one assistant reply.
pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ChatError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: None,
            max_in_flight: 8,
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            timeout_secs: 120,
        }
    }
}

impl ChatConfig {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Counting semaphore for the in-flight cap.
#[derive(Debug)]
struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("gate poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpChatClient {
    config: ChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpChatClient {
    /// Client with the bearer token taken from `NAVMEM_API_KEY`, if set.
    pub fn new(config: ChatConfig) -> Self {
        Self::with_api_key(config, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_api_key(config: ChatConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let gate = Gate::new(config.max_in_flight);
        Self {
            config,
            api_key,
            agent,
            gate,
        }
    }

    pub fn config(&self) -> &ChatConfig {
        &self.config
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, ChatError> {
        let _permit = self.gate.acquire();
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ChatError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ChatError::Status { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ChatError::Decode(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or(ChatError::Decode(text))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let body = self.request_body(messages);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    log::warn!(
                        "chat request failed ({e}); retry {} of {}",
                        attempt + 1,
                        self.config.max_retries
                    );
                    thread::sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Replays canned replies in order and records every request. Once the
/// script runs out the last reply repeats.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    replies: Vec<Result<String, ChatError>>,
    state: Mutex<(usize, Vec<Vec<ChatMessage>>)>,
}

impl ScriptedClient {
    pub fn new(replies: Vec<Result<String, ChatError>>) -> Self {
        Self {
            replies,
            state: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().expect("script poisoned").1.clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let mut state = self.state.lock().expect("script poisoned");
        let idx = state.0.min(self.replies.len().saturating_sub(1));
        state.0 += 1;
        state.1.push(messages.to_vec());
        self.replies
            .get(idx)
            .cloned()
            .unwrap_or_else(|| Err(ChatError::Transport("no scripted reply".into())))
    }
}
