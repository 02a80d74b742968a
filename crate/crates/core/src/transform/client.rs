//! Model clients: the trait the engine calls and an HTTP chat-completion client.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::{LlmRequest, LlmResponse};

/// Where a call sits within a transformation application.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallMeta {
    pub transformation: String,
    pub pass: usize,
    pub call: usize,
    pub attempt: u32,
    /// Trial number for reliability runs; 1 for ordinary applications.
    pub trial: u32,
    /// Short hash of the target region's text before the call.
    pub input_hash: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("client configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("no mock response for {0}")]
    NoFixture(String),
}

pub trait LlmClient: Send + Sync {
    fn model_tag(&self) -> &str;

    fn complete(&self, request: &LlmRequest, meta: &CallMeta) -> Result<LlmResponse, ClientError>;
}

/// Process-wide count of in-flight model calls.
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

static IN_FLIGHT: InFlight = InFlight { count: Mutex::new(0), freed: Condvar::new() };

struct InFlightGuard;

impl InFlightGuard {
    fn acquire(limit: usize) -> Self {
        let mut n = IN_FLIGHT.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= limit.max(1) {
            n = IN_FLIGHT.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InFlightGuard
    }
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        let mut n = IN_FLIGHT.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        IN_FLIGHT.freed.notify_all();
    }
}

pub const ENV_URL: &str = "PEAK_LLM_URL";
pub const ENV_MODEL: &str = "PEAK_LLM_MODEL";
pub const ENV_TOKEN: &str = "PEAK_LLM_TOKEN";
pub const ENV_MAX_IN_FLIGHT: &str = "PEAK_LLM_MAX_IN_FLIGHT";

#[derive(Clone, Debug)]
pub struct LiveConfig {
    /// Base URL; requests go to `<base>/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub max_in_flight: usize,
    pub timeout: Duration,
    /// Directory for the JSONL audit log, if any.
    pub audit_dir: Option<PathBuf>,
}

impl LiveConfig {
    pub fn from_env() -> Result<Self, ClientError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base_url = var(ENV_URL).ok_or_else(|| ClientError::Config(format!("{ENV_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| ClientError::Config(format!("{ENV_MODEL} is not set")))?;
        let max_in_flight = match var(ENV_MAX_IN_FLIGHT) {
            Some(v) => v.parse().map_err(|_| ClientError::Config(format!("{ENV_MAX_IN_FLIGHT} must be a positive integer")))?,
            None => 4,
        };
        Ok(LiveConfig {
            base_url,
            model,
            token: var(ENV_TOKEN),
            max_in_flight,
            timeout: Duration::from_secs(600),
            audit_dir: None,
        })
    }
}

/// Chat-completion client over HTTP(S).
pub struct LiveClient {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveClient {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        LiveClient { config, agent }
    }

    fn redact(&self, text: &str) -> String {
        match &self.config.token {
            Some(t) => text.replace(t.as_str(), "[REDACTED]"),
            None => text.to_owned(),
        }
    }

    fn audit(&self, meta: &CallMeta, body: &Value, outcome: Result<&str, &str>) {
        let Some(dir) = &self.config.audit_dir else { return };
        let entry = json!({
            "time": chrono::Utc::now().to_rfc3339(),
            "meta": meta,
            "url": self.endpoint(),
            "authorization": self.config.token.as_ref().map(|_| "Bearer [REDACTED]"),
            "request": body,
            "response": outcome.ok(),
            "error": outcome.err(),
        });
        let line = self.redact(&entry.to_string());
        let write = fs::create_dir_all(dir).and_then(|_| {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("llm-audit.jsonl"))?;
            writeln!(f, "{line}")
        });
        if let Err(e) = write {
            tracing::warn!("could not write the model audit log: {e}");
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn with_audit_dir(mut self, dir: PathBuf) -> Self {
        self.config.audit_dir = Some(dir);
        self
    }
}

impl LlmClient for LiveClient {
    fn model_tag(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &LlmRequest, meta: &CallMeta) -> Result<LlmResponse, ClientError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": request.user },
            ],
        });
        let _slot = InFlightGuard::acquire(self.config.max_in_flight);
        let mut req = self.agent.post(&self.endpoint());
        if let Some(t) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let result = req
            .send_json(&body)
            .map_err(|e| ClientError::Transport(self.redact(&e.to_string())))
            .and_then(|mut resp| resp.body_mut().read_json::<Value>().map_err(|e| ClientError::Protocol(e.to_string())))
            .and_then(|v| {
                v.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| ClientError::Protocol("missing choices[0].message.content".into()))
            });
        match &result {
            Ok(text) => self.audit(meta, &body, Ok(text)),
            Err(e) => self.audit(meta, &body, Err(&e.to_string())),
        }
        result.map(|raw_text| LlmResponse { raw_text })
    }
}
