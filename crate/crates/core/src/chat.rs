//! OpenAI-compatible chat-completions transport with cassette record/replay.
//!
//! Requests are plain JSON bodies. A cassette is a line-delimited JSON file of
//! `{key, request, response}` entries keyed by the SHA-256 of the request body,
//! so replay resolves by content regardless of call order.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Http {
        status: u16,
        body: String,
        retry_after_secs: Option<u64>,
    },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed completion: {0}")]
    Decode(String),
    #[error("cassette has no entry for request {0}")]
    CassetteMiss(String),
    #[error("cassette I/O: {0}")]
    Cassette(String),
    #[error("bad request input: {0}")]
    Input(String),
}

impl TransportError {
    /// Whether another attempt could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Http { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
            _ => false,
        }
    }

    pub fn retry_after_secs(&self) -> Option<u64> {
        match self {
            TransportError::Http { retry_after_secs, .. } => *retry_after_secs,
            _ => None,
        }
    }
}

#[async_trait]
pub trait ChatTransport: Send + Sync {
    async fn send(&self, body: &Value) -> Result<Value, TransportError>;

    /// Cheap reachability check used by health endpoints.
    async fn probe(&self) -> Result<(), TransportError> {
        Ok(())
    }
}

/// Endpoint settings as they appear in config files. The API key itself is
/// read from the environment variable named by `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

impl EndpointConfig {
    pub fn api_key(&self) -> Option<String> {
        self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}

pub struct HttpTransport {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(Self {
            client,
            base_url: cfg.base_url.trim_end_matches('/').to_owned(),
            api_key: cfg.api_key(),
        })
    }

    fn authed(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.api_key {
            Some(k) => req.bearer_auth(k),
            None => req,
        }
    }
}

#[async_trait]
impl ChatTransport for HttpTransport {
    async fn send(&self, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}/chat/completions", self.base_url);
        let resp = self
            .authed(self.client.post(url).json(body))
            .send()
            .await
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let retry_after_secs = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok());
        let text = resp.text().await.map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Http {
                status: status.as_u16(),
                body: text,
                retry_after_secs,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }

    async fn probe(&self) -> Result<(), TransportError> {
        let url = format!("{}/models", self.base_url);
        let resp = self
            .authed(self.client.get(url).timeout(Duration::from_secs(5)))
            .send()
            .await
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(TransportError::Http {
                status: resp.status().as_u16(),
                body: String::new(),
                retry_after_secs: None,
            })
        }
    }
}

/// SHA-256 over the canonical (key-sorted) JSON encoding of a request.
pub fn request_key(body: &Value) -> String {
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: Value,
    pub response: Value,
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>, TransportError> {
    let file = File::open(path).map_err(|e| TransportError::Cassette(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TransportError::Cassette(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| TransportError::Cassette(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Serves responses from a cassette; unknown requests are a hard miss.
pub struct ReplayTransport {
    entries: HashMap<String, Value>,
}

impl ReplayTransport {
    pub fn open(path: &Path) -> Result<Self, TransportError> {
        Ok(Self::from_entries(read_cassette(path)?))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key, e.response)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[async_trait]
impl ChatTransport for ReplayTransport {
    async fn send(&self, body: &Value) -> Result<Value, TransportError> {
        let key = request_key(body);
        self.entries.get(&key).cloned().ok_or(TransportError::CassetteMiss(key))
    }
}

/// Forwards to an inner transport and appends every successful exchange.
pub struct RecordingTransport<T> {
    inner: T,
    path: PathBuf,
    sink: Mutex<File>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn create(inner: T, path: impl Into<PathBuf>) -> Result<Self, TransportError> {
        let path = path.into();
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TransportError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path,
            sink: Mutex::new(sink),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[async_trait]
impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    async fn send(&self, body: &Value) -> Result<Value, TransportError> {
        let response = self.inner.send(body).await?;
        let entry = CassetteEntry {
            key: request_key(body),
            request: body.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| TransportError::Cassette(e.to_string()))?;
        let mut sink = self.sink.lock().unwrap();
        writeln!(sink, "{line}").map_err(|e| TransportError::Cassette(e.to_string()))?;
        Ok(response)
    }

    async fn probe(&self) -> Result<(), TransportError> {
        self.inner.probe().await
    }
}

/// How a transport built from config treats its cassette file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// Live calls only.
    #[default]
    Off,
    /// Live calls, appended to the cassette.
    Record,
    /// Cassette only; a miss is an error.
    Replay,
}

impl std::str::FromStr for CassetteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown cassette mode {other:?} (off, record, replay)")),
        }
    }
}

/// Builds the transport for an endpoint, wrapped for recording or replaced
/// by a replay as `mode` asks.
pub fn build_transport(
    cfg: &EndpointConfig,
    mode: CassetteMode,
    cassette: Option<&Path>,
) -> Result<Arc<dyn ChatTransport>, TransportError> {
    let need_path = || cassette.ok_or_else(|| TransportError::Cassette("cassette mode needs a cassette path".into()));
    Ok(match mode {
        CassetteMode::Off => Arc::new(HttpTransport::new(cfg)?),
        CassetteMode::Record => Arc::new(RecordingTransport::create(HttpTransport::new(cfg)?, need_path()?)?),
        CassetteMode::Replay => Arc::new(ReplayTransport::open(need_path()?)?),
    })
}

/// Image attached to a user turn.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// Passed through as-is (http(s) or data URL).
    Url(String),
    /// Read from disk and inlined as a base64 data URL.
    Path(PathBuf),
}

impl ImageInput {
    pub fn from_ref(image_ref: &str) -> Self {
        if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
            ImageInput::Url(image_ref.to_owned())
        } else {
            ImageInput::Path(PathBuf::from(image_ref))
        }
    }

    pub fn to_url(&self) -> std::io::Result<String> {
        match self {
            ImageInput::Url(u) => Ok(u.clone()),
            ImageInput::Path(p) => {
                let bytes = std::fs::read(p)?;
                let mime = match p
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref()
                {
                    Some("png") => "image/png",
                    Some("webp") => "image/webp",
                    Some("gif") => "image/gif",
                    _ => "image/jpeg",
                };
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(format!("data:{mime};base64,{data}"))
            }
        }
    }
}

/// Builds a single-turn chat-completions body.
pub fn single_turn_body(cfg: &EndpointConfig, text: &str, image_url: Option<&str>, seed: Option<u64>) -> Value {
    let content = match image_url {
        Some(url) => json!([
            { "type": "image_url", "image_url": { "url": url } },
            { "type": "text", "text": text },
        ]),
        None => json!(text),
    };
    let mut body = json!({
        "model": cfg.model,
        "messages": [{ "role": "user", "content": content }],
    });
    let obj = body.as_object_mut().unwrap();
    if let Some(t) = cfg.temperature {
        obj.insert("temperature".into(), json!(t));
    }
    if let Some(m) = cfg.max_tokens {
        obj.insert("max_tokens".into(), json!(m));
    }
    if let Some(s) = seed {
        obj.insert("seed".into(), json!(s));
    }
    body
}

/// Text of the first choice of a chat-completions response.
pub fn completion_text(resp: &Value) -> Result<String, TransportError> {
    resp.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))
}

/// Text of the user turn of a single-turn body, for mocks and debugging.
pub fn user_text(body: &Value) -> Option<&str> {
    let content = body.pointer("/messages/0/content")?;
    match content {
        Value::String(s) => Some(s),
        Value::Array(parts) => parts
            .iter()
            .find(|p| p["type"] == "text")
            .and_then(|p| p["text"].as_str()),
        _ => None,
    }
}

pub fn completion_response(text: &str) -> Value {
    json!({
        "object": "chat.completion",
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": text }, "finish_reason": "stop" }],
    })
}

/// Sends with bounded retries on retryable failures. Returns the outcome and
/// the number of attempts made.
pub async fn send_with_retries(
    transport: &dyn ChatTransport,
    body: &Value,
    max_retries: u32,
    backoff: Duration,
) -> (Result<Value, TransportError>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.send(body).await {
            Ok(v) => return (Ok(v), attempt),
            Err(e) if e.is_retryable() && attempt <= max_retries => {
                let wait = e
                    .retry_after_secs()
                    .map(Duration::from_secs)
                    .unwrap_or(backoff * attempt)
                    .min(Duration::from_secs(30));
                tracing::warn!(attempt, error = %e, "chat request failed, retrying");
                tokio::time::sleep(wait).await;
            }
            Err(e) => return (Err(e), attempt),
        }
    }
}
