//! Judge model client for open-ended answers.
//!
//! One single-turn prompt per verdict; the judge is asked for a one-word
//! reply and anything other than `correct` / `incorrect` is reported as
//! non-conforming rather than guessed.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{
    completion_text, send_with_retries, single_turn_body, ChatTransport, EndpointConfig, TransportError,
};
use crate::template::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "raw")]
pub enum Verdict {
    Correct,
    Incorrect,
    NonConforming(String),
}

impl Verdict {
    pub fn parse(reply: &str) -> Self {
        let norm: String = reply
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        match norm.as_str() {
            "correct" => Verdict::Correct,
            "incorrect" => Verdict::Incorrect,
            _ => Verdict::NonConforming(reply.to_owned()),
        }
    }

    pub fn score(&self) -> u8 {
        matches!(self, Verdict::Correct) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeQuery<'a> {
    pub question: &'a str,
    pub reference: &'a str,
    pub prediction: &'a str,
}

#[derive(Debug, Clone, Error)]
#[error("judge call failed after {attempts} attempt(s): {source}")]
pub struct JudgeError {
    pub source: TransportError,
    pub attempts: u32,
}

impl JudgeError {
    pub fn retry_after_secs(&self) -> Option<u64> {
        self.source.retry_after_secs()
    }
}

#[async_trait]
pub trait Judge: Send + Sync {
    fn model_id(&self) -> &str;

    async fn judge(&self, query: &JudgeQuery<'_>) -> Result<Verdict, JudgeError>;

    async fn probe(&self) -> Result<(), JudgeError> {
        Ok(())
    }
}

/// Judge backed by a chat-completions transport.
pub struct ChatJudge {
    transport: Arc<dyn ChatTransport>,
    endpoint: EndpointConfig,
    template: PromptTemplate,
    backoff: Duration,
}

impl ChatJudge {
    pub fn new(transport: Arc<dyn ChatTransport>, endpoint: EndpointConfig, template: PromptTemplate) -> Self {
        Self {
            transport,
            endpoint,
            template,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn prompt(&self, q: &JudgeQuery<'_>) -> String {
        self.template.render(&[
            ("question", q.question),
            ("reference", q.reference),
            ("prediction", q.prediction),
        ])
    }
}

#[async_trait]
impl Judge for ChatJudge {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }

    async fn judge(&self, query: &JudgeQuery<'_>) -> Result<Verdict, JudgeError> {
        let body = single_turn_body(&self.endpoint, &self.prompt(query), None, None);
        let (result, attempts) =
            send_with_retries(self.transport.as_ref(), &body, self.endpoint.max_retries, self.backoff).await;
        let reply = result
            .and_then(|r| completion_text(&r))
            .map_err(|source| JudgeError { source, attempts })?;
        let verdict = Verdict::parse(&reply);
        if let Verdict::NonConforming(raw) = &verdict {
            tracing::warn!(reply = %raw, "judge reply did not conform to the verdict protocol");
        }
        Ok(verdict)
    }

    async fn probe(&self) -> Result<(), JudgeError> {
        if self.endpoint.model.trim().is_empty() || reqwest::Url::parse(&self.endpoint.base_url).is_err() {
            return Err(JudgeError {
                source: TransportError::Network(format!("invalid judge endpoint {:?}", self.endpoint.base_url)),
                attempts: 0,
            });
        }
        self.transport
            .probe()
            .await
            .map_err(|source| JudgeError { source, attempts: 1 })
    }
}
