//! Model clients: a scripted mock and a minimal HTTP completion client.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::Sample;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TOKEN_ENV: &str = "CDA_MODEL_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("bad response body: {0}")]
    Decode(String),
    #[error("mock script is empty")]
    EmptyScript,
}

#[async_trait]
pub trait ModelClient: Send + Sync {
    fn name(&self) -> &str;
    fn runner(&self) -> &str;
    async fn complete(&self, prompt: &str) -> Result<String, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub delay_ms: u64,
    pub response_text: String,
}

/// Replays a script in order, wrapping around at the end. Two mocks built
/// from the same script answer the same call sequence identically.
#[derive(Debug)]
pub struct MockClient {
    name: String,
    runner: String,
    script: Vec<ScriptEntry>,
    cursor: AtomicUsize,
}

impl MockClient {
    pub fn new(name: impl Into<String>, runner: impl Into<String>, script: Vec<ScriptEntry>) -> Self {
        Self {
            name: name.into(),
            runner: runner.into(),
            script,
            cursor: AtomicUsize::new(0),
        }
    }

    /// Parses a JSON array of `{delay_ms, response_text}`.
    pub fn from_json(
        name: impl Into<String>,
        runner: impl Into<String>,
        json: &str,
    ) -> Result<Self, serde_json::Error> {
        Ok(Self::new(name, runner, serde_json::from_str(json)?))
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::Relaxed)
    }
}

#[async_trait]
impl ModelClient for MockClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn runner(&self) -> &str {
        &self.runner
    }

    async fn complete(&self, _prompt: &str) -> Result<String, ModelError> {
        if self.script.is_empty() {
            return Err(ModelError::EmptyScript);
        }
        let i = self.cursor.fetch_add(1, Ordering::Relaxed) % self.script.len();
        let entry = &self.script[i];
        tokio::time::sleep(Duration::from_millis(entry.delay_ms)).await;
        Ok(entry.response_text.clone())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// POSTs `{"prompt": ...}` to one endpoint and expects `{"text": ...}`.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    name: String,
    runner: String,
    endpoint: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl RemoteClient {
    pub fn new(
        name: impl Into<String>,
        runner: impl Into<String>,
        endpoint: impl Into<String>,
        token: Option<String>,
    ) -> Self {
        Self {
            name: name.into(),
            runner: runner.into(),
            endpoint: endpoint.into(),
            token,
            http: reqwest::Client::new(),
        }
    }

    /// Bearer token from `CDA_MODEL_TOKEN`, if set.
    pub fn from_env(
        name: impl Into<String>,
        runner: impl Into<String>,
        endpoint: impl Into<String>,
    ) -> Self {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::new(name, runner, endpoint, token)
    }
}

#[async_trait]
impl ModelClient for RemoteClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn runner(&self) -> &str {
        &self.runner
    }

    async fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        let mut req = self.http.post(&self.endpoint).json(&CompletionRequest { prompt });
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| ModelError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ModelError::Status(status.as_u16()));
        }
        let body: CompletionResponse = resp
            .json()
            .await
            .map_err(|e| ModelError::Decode(e.to_string()))?;
        Ok(body.text)
    }
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub text: String,
    pub latency_s: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub error: ModelError,
    pub latency_s: f64,
}

impl From<&Result<Response, Failure>> for Sample<f64> {
    fn from(r: &Result<Response, Failure>) -> Self {
        match r {
            Ok(ok) => Sample::Success {
                latency_s: ok.latency_s,
                token_count: ok.token_count,
            },
            Err(f) => Sample::Failure {
                latency_s: f.latency_s,
            },
        }
    }
}

/// Sends one prompt and times the full response. The call is dropped when
/// `timeout` elapses.
pub async fn request(
    client: &dyn ModelClient,
    prompt: &str,
    timeout: Duration,
) -> Result<Response, Failure> {
    let started = Instant::now();
    let outcome = tokio::time::timeout(timeout, client.complete(prompt)).await;
    let latency_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok(Ok(text)) => Ok(Response {
            token_count: token_count(&text),
            text,
            latency_s,
        }),
        Ok(Err(error)) => Err(Failure { error, latency_s }),
        Err(_) => Err(Failure {
            error: ModelError::Timeout(timeout),
            latency_s,
        }),
    }
}
