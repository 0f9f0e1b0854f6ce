//! Batched reward scoring over HTTP.
//!
//! `POST /v1/rewards` scores a batch of responses against their ground truths
//! and optionally attaches group-normalized advantages. `GET /v1/health`
//! reports uptime and whether the judge endpoint answers. All state is fixed
//! at startup; a request never observes another request.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::decompression::RequestDecompressionLayer;
use tracebox_core::chat::{build_transport, CassetteMode, EndpointConfig, TransportError};
use tracebox_core::geometry::{BBox, ImageDims};
use tracebox_core::judge::{ChatJudge, Judge, Verdict};
use tracebox_core::parser::{parse_response, OptionLetter, ParsedResponse};
use tracebox_core::rewards::{
    compute_advantages, reward_spec_hash, score_batch, ExpectedAnswer, GroundTruth, RewardBreakdown, RewardError,
    DEFAULT_ADVANTAGE_EPSILON,
};
use tracebox_core::template::PromptTemplate;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MAX_BATCH: usize = 1024;
const DEFAULT_RETRY_AFTER_SECS: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Concurrent judge calls per request.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_deadline")]
    pub deadline_secs: u64,
    /// Environment variable holding the bearer token. No auth when unset.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default)]
    pub judge: Option<JudgeSettings>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSettings {
    pub endpoint: EndpointConfig,
    /// Judge prompt file; the bundled prompt when absent.
    #[serde(default)]
    pub prompt: Option<PathBuf>,
    #[serde(default)]
    pub cassette_mode: CassetteMode,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_max_batch() -> usize {
    MAX_BATCH
}

fn default_in_flight() -> usize {
    16
}

fn default_deadline() -> u64 {
    60
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            max_batch: MAX_BATCH,
            max_in_flight: default_in_flight(),
            deadline_secs: default_deadline(),
            auth_token_env: None,
            judge: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Toml(PathBuf, toml::de::Error),
    #[error("max_batch must be between 1 and {MAX_BATCH}, got {0}")]
    MaxBatch(usize),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("judge: {0}")]
    Judge(#[from] TransportError),
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.into(), e))?;
        toml::from_str(&text).map_err(|e| ConfigError::Toml(path.into(), e))
    }
}

/// Immutable per-process state shared by all handlers.
pub struct AppState {
    judge: Option<Arc<dyn Judge>>,
    spec_hash: String,
    auth_token: Option<String>,
    max_batch: usize,
    max_in_flight: usize,
    deadline: Duration,
    started: Instant,
}

impl AppState {
    /// Builds the state from config, connecting the judge if one is set.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ConfigError> {
        let (judge, prompt) = match &cfg.judge {
            Some(j) => {
                let template = match &j.prompt {
                    Some(p) => PromptTemplate::load(p).map_err(|e| ConfigError::Io(p.clone(), e))?,
                    None => PromptTemplate::judge_v1(),
                };
                let transport = build_transport(&j.endpoint, j.cassette_mode, j.cassette.as_deref())?;
                let judge = ChatJudge::new(transport, j.endpoint.clone(), template.clone());
                (Some(Arc::new(judge) as Arc<dyn Judge>), template)
            }
            None => (None, PromptTemplate::judge_v1()),
        };
        let auth_token = match &cfg.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingToken(var.clone()))?),
            None => None,
        };
        Self::new(cfg, judge, &prompt.text, auth_token)
    }

    /// State with an explicit judge, for embedding and tests.
    pub fn new(
        cfg: &ServiceConfig,
        judge: Option<Arc<dyn Judge>>,
        judge_prompt: &str,
        auth_token: Option<String>,
    ) -> Result<Self, ConfigError> {
        if cfg.max_batch == 0 || cfg.max_batch > MAX_BATCH {
            return Err(ConfigError::MaxBatch(cfg.max_batch));
        }
        Ok(Self {
            judge,
            spec_hash: reward_spec_hash(judge_prompt),
            auth_token,
            max_batch: cfg.max_batch,
            max_in_flight: cfg.max_in_flight.max(1),
            deadline: Duration::from_secs(cfg.deadline_secs),
            started: Instant::now(),
        })
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Mcq,
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireGroundTruth {
    pub answer_kind: AnswerKind,
    pub answer: String,
    #[serde(default)]
    pub boxes: Vec<BBox>,
    /// Only used to flag predicted boxes outside the image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ImageDims>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeSet<OptionLetter>>,
}

impl WireGroundTruth {
    pub fn to_ground_truth(&self) -> Result<GroundTruth, String> {
        let expected = match self.answer_kind {
            AnswerKind::Mcq => {
                let answer: OptionLetter = self.answer.parse()?;
                if let Some(opts) = &self.options {
                    if !opts.contains(&answer) {
                        return Err(format!("answer {answer} is not among the options"));
                    }
                }
                ExpectedAnswer::Mcq {
                    answer,
                    options: self.options.clone(),
                }
            }
            AnswerKind::OpenEnded => ExpectedAnswer::OpenEnded {
                answer: self.answer.clone(),
            },
        };
        Ok(GroundTruth {
            expected,
            question: self.question.clone(),
            target_boxes: self.boxes.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardItem {
    pub response_text: String,
    pub ground_truth: WireGroundTruth,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestOptions {
    /// Allow judge calls for open-ended items. Defaults to on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub items: Vec<RewardItem>,
    #[serde(default)]
    pub options: RequestOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub format_ok: bool,
    pub n_boxes: usize,
    pub skipped_boxes: usize,
    pub choice: Option<OptionLetter>,
    pub judge_verdict: Option<Verdict>,
    /// Predicted boxes not inside the image; `None` without `dims`.
    pub out_of_bounds_boxes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub reward: RewardBreakdown,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub reward_spec_hash: String,
    pub judge_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResponse {
    pub items: Vec<ItemResult>,
    pub meta: Meta,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("{message}")]
    BadRequest { message: String, index: Option<usize> },
    #[error("batch of {0} items exceeds the limit of {1}")]
    TooLarge(usize, usize),
    #[error("item {0} needs a judge but judging is {1}")]
    JudgeUnavailable(usize, &'static str),
    #[error("judge failed: {message}")]
    JudgeFailed { message: String, retry_after: u64 },
    #[error("request exceeded the {0} s deadline")]
    Deadline(u64),
}

impl ApiError {
    fn bad(message: impl Into<String>, index: Option<usize>) -> Self {
        ApiError::BadRequest {
            message: message.into(),
            index,
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::TooLarge(..) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::JudgeUnavailable(..) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::JudgeFailed { .. } => StatusCode::BAD_GATEWAY,
            ApiError::Deadline(_) => StatusCode::GATEWAY_TIMEOUT,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::BadRequest { .. } => "schema",
            ApiError::TooLarge(..) => "batch_too_large",
            ApiError::JudgeUnavailable(..) => "judge_required",
            ApiError::JudgeFailed { .. } => "judge_upstream",
            ApiError::Deadline(_) => "deadline",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": { "code": self.code(), "message": self.to_string() } });
        let index = match &self {
            ApiError::BadRequest { index, .. } => *index,
            ApiError::JudgeUnavailable(i, _) => Some(*i),
            _ => None,
        };
        if let Some(i) = index {
            body["error"]["index"] = json!(i);
        }
        let mut resp = (self.status(), Json(body)).into_response();
        match &self {
            ApiError::JudgeFailed { retry_after, .. } => {
                resp.headers_mut()
                    .insert(header::RETRY_AFTER, HeaderValue::from(*retry_after));
            }
            ApiError::Unauthorized => {
                resp.headers_mut()
                    .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            }
            _ => {}
        }
        resp
    }
}

/// Decodes a request body, reporting the first offending item by index.
pub fn decode_request(body: &[u8]) -> Result<RewardRequest, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("invalid JSON: {e}"), None))?;
    let Value::Object(mut obj) = value else {
        return Err(ApiError::bad("body must be a JSON object", None));
    };
    if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "items" | "options")) {
        return Err(ApiError::bad(format!("unknown field {k:?}"), None));
    }
    let options = match obj.remove("options") {
        Some(v) => serde_json::from_value(v).map_err(|e| ApiError::bad(format!("options: {e}"), None))?,
        None => RequestOptions::default(),
    };
    let Some(Value::Array(raw_items)) = obj.remove("items") else {
        return Err(ApiError::bad("items must be an array", None));
    };
    let items = raw_items
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let item: RewardItem =
                serde_json::from_value(v).map_err(|e| ApiError::bad(format!("item {i}: {e}"), Some(i)))?;
            item.ground_truth
                .to_ground_truth()
                .map_err(|e| ApiError::bad(format!("item {i}: {e}"), Some(i)))?;
            Ok(item)
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(RewardRequest { items, options })
}

fn out_of_bounds(boxes: &[BBox], dims: ImageDims) -> usize {
    let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
    boxes
        .iter()
        .filter(|b| b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > w || b.y2() > h)
        .count()
}

/// Scores a validated request. This is the whole endpoint minus transport,
/// auth and deadline handling.
pub async fn score_request(
    req: &RewardRequest,
    judge: Option<&dyn Judge>,
    max_in_flight: usize,
    max_batch: usize,
) -> Result<Vec<ItemResult>, ApiError> {
    let n = req.items.len();
    if n == 0 {
        return Err(ApiError::bad("items must not be empty", None));
    }
    if n > max_batch {
        return Err(ApiError::TooLarge(n, max_batch));
    }
    if let Some(g) = req.options.group_size {
        if g < 2 {
            return Err(ApiError::bad(format!("group_size must be at least 2, got {g}"), None));
        }
        if !n.is_multiple_of(g) {
            return Err(ApiError::bad(
                format!("batch of {n} is not divisible by group_size {g}"),
                None,
            ));
        }
    }
    let judging = req.options.judge.unwrap_or(true);
    let mut prepared: Vec<(ParsedResponse, GroundTruth)> = Vec::with_capacity(n);
    for (i, item) in req.items.iter().enumerate() {
        let gt = item
            .ground_truth
            .to_ground_truth()
            .map_err(|e| ApiError::bad(format!("item {i}: {e}"), Some(i)))?;
        if gt.needs_judge() {
            if !judging {
                return Err(ApiError::JudgeUnavailable(i, "disabled for this request"));
            }
            if judge.is_none() {
                return Err(ApiError::JudgeUnavailable(i, "not configured"));
            }
        }
        prepared.push((parse_response(&item.response_text), gt));
    }

    let scored = score_batch(&prepared, judge, max_in_flight)
        .await
        .map_err(|e| match e {
            RewardError::Judge(j) => ApiError::JudgeFailed {
                retry_after: j.retry_after_secs().unwrap_or(DEFAULT_RETRY_AFTER_SECS),
                message: j.to_string(),
            },
            other => ApiError::bad(other.to_string(), None),
        })?;

    let advantages = match req.options.group_size {
        Some(g) => {
            let totals: Vec<f64> = scored.iter().map(|s| s.breakdown.total).collect();
            let mut out = Vec::with_capacity(n);
            for chunk in totals.chunks(g) {
                out.extend(
                    compute_advantages(chunk, DEFAULT_ADVANTAGE_EPSILON)
                        .map_err(|e| ApiError::bad(e.to_string(), None))?,
                );
            }
            Some(out)
        }
        None => None,
    };

    Ok(scored
        .into_iter()
        .zip(&prepared)
        .zip(&req.items)
        .enumerate()
        .map(|(i, ((s, (parsed, _)), item))| ItemResult {
            reward: s.breakdown,
            diagnostics: Diagnostics {
                format_ok: parsed.format_ok,
                n_boxes: parsed.boxes.len(),
                skipped_boxes: parsed.skipped_boxes,
                choice: parsed.choice,
                judge_verdict: s.verdict,
                out_of_bounds_boxes: item.ground_truth.dims.map(|d| out_of_bounds(&parsed.boxes, d)),
            },
            advantage: advantages.as_ref().map(|a| a[i]),
        })
        .collect())
}

fn check_auth(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.auth_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(ApiError::Unauthorized)
    }
}

async fn rewards_handler(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let started = Instant::now();
    let result = async {
        check_auth(&state, &headers)?;
        let req = decode_request(&body)?;
        let n = req.items.len();
        let items = tokio::time::timeout(
            state.deadline,
            score_request(&req, state.judge.as_deref(), state.max_in_flight, state.max_batch),
        )
        .await
        .map_err(|_| ApiError::Deadline(state.deadline.as_secs()))??;
        Ok::<_, ApiError>((n, items))
    }
    .await;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok((n, items)) => {
            let mean = |f: fn(&ItemResult) -> f64| items.iter().map(f).sum::<f64>() / n as f64;
            tracing::info!(
                target: "access",
                path = "/v1/rewards",
                status = 200,
                batch_size = n,
                latency_ms,
                mean_total = mean(|r| r.reward.total),
                mean_acc = mean(|r| f64::from(r.reward.acc)),
                mean_format = mean(|r| f64::from(r.reward.format)),
                mean_iou = mean(|r| r.reward.iou),
            );
            let meta = Meta {
                version: VERSION.into(),
                reward_spec_hash: state.spec_hash.clone(),
                judge_model: state.judge.as_ref().map(|j| j.model_id().to_owned()),
            };
            Json(RewardResponse { items, meta }).into_response()
        }
        Err(e) => {
            tracing::info!(
                target: "access",
                path = "/v1/rewards",
                status = e.status().as_u16(),
                latency_ms,
                error = %e,
            );
            e.into_response()
        }
    }
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<Value> {
    let judge = match &state.judge {
        None => json!({ "configured": false }),
        Some(j) => {
            let probe = tokio::time::timeout(Duration::from_secs(5), j.probe()).await;
            let error = match probe {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e.to_string()),
                Err(_) => Some("probe timed out".to_owned()),
            };
            json!({
                "configured": true,
                "model": j.model_id(),
                "reachable": error.is_none(),
                "error": error,
            })
        }
    };
    let degraded = judge["reachable"] == json!(false);
    Json(json!({
        "status": if degraded { "degraded" } else { "ok" },
        "version": VERSION,
        "uptime_secs": state.started.elapsed().as_secs_f64(),
        "reward_spec_hash": state.spec_hash,
        "judge": judge,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/rewards", post(rewards_handler))
        .route("/v1/health", get(health_handler))
        .layer(RequestDecompressionLayer::new())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(text: &str, answer: &str, boxes: &str) -> Value {
        serde_json::from_str(&format!(
            r#"{{"response_text": {}, "ground_truth": {{"answer_kind": "mcq", "answer": "{answer}", "boxes": {boxes}}}}}"#,
            serde_json::to_string(text).unwrap()
        ))
        .unwrap()
    }

    #[test]
    fn schema_errors_name_the_item() {
        let good = item("<answer>A</answer>", "A", "[]");
        let bad = item("<answer>A</answer>", "A", "[[5, 5, 1, 1]]");
        let body = json!({ "items": [good.clone(), good.clone(), good, bad] });
        match decode_request(body.to_string().as_bytes()) {
            Err(ApiError::BadRequest {
                index: Some(3),
                message,
            }) => assert!(message.contains("item 3"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mcq_answer_must_be_a_letter() {
        let body = json!({ "items": [item("x", "Z", "[]")] });
        assert!(matches!(
            decode_request(body.to_string().as_bytes()),
            Err(ApiError::BadRequest { index: Some(0), .. })
        ));
    }

    #[tokio::test]
    async fn canonical_correct_response_scores_three() {
        let req = decode_request(
            json!({ "items": [item("<think>see [0,0,10,10]</think><answer>A</answer>", "A", "[[0,0,10,10]]")] })
                .to_string()
                .as_bytes(),
        )
        .unwrap();
        let out = score_request(&req, None, 4, MAX_BATCH).await.unwrap();
        assert_eq!(out[0].reward.total, 3.0);
        assert_eq!(out[0].advantage, None);
    }

    #[tokio::test]
    async fn group_of_two_gets_opposite_advantages() {
        let req = decode_request(
            json!({
                "items": [
                    item("<answer>B</answer>", "A", "[]"),
                    item("<think>x</think><answer>A</answer>", "A", "[]"),
                ],
                "options": { "group_size": 2 }
            })
            .to_string()
            .as_bytes(),
        )
        .unwrap();
        let out = score_request(&req, None, 4, MAX_BATCH).await.unwrap();
        assert_eq!((out[0].reward.total, out[1].reward.total), (0.0, 2.0));
        assert!((out[0].advantage.unwrap() + 1.0).abs() < 1e-5);
        assert!((out[1].advantage.unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: ServiceConfig = toml::from_str(
            r#"
            bind = "0.0.0.0:9000"
            [judge]
            cassette_mode = "replay"
            cassette = "judge.jsonl"
            [judge.endpoint]
            base_url = "http://localhost:8000/v1"
            model = "judge-7b"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.max_batch, MAX_BATCH);
        assert_eq!(cfg.judge.unwrap().cassette_mode, CassetteMode::Replay);
        assert!(toml::from_str::<ServiceConfig>("bogus = 1").is_err());
    }
}
