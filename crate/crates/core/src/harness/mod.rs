//! Benchmark loading, model evaluation and per-question scoring.

pub mod report;

pub use report::{build_report, CategoryRow, EvalReport, Histogram, ProtocolRow, ReportError, HISTOGRAM_BINS};

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{completion_text, single_turn_body, ChatTransport, EndpointConfig, ImageInput, TransportError};
use crate::geometry::{dual_iou_reward, BBox, ImageDims};
use crate::parser::{parse_response, OptionLetter, ParsedResponse};
use crate::template::PromptTemplate;
use crate::verdicts::HasId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Perception,
    Reasoning,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Perception, Protocol::Reasoning];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Perception => "Perception",
            Protocol::Reasoning => "Reasoning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Attributes,
    Material,
    #[serde(rename = "Physical State")]
    PhysicalState,
    #[serde(rename = "Object Retrieval")]
    ObjectRetrieval,
    #[serde(rename = "OCR")]
    Ocr,
    #[serde(rename = "Perspective Transform")]
    PerspectiveTransform,
    Ordering,
    #[serde(rename = "Contact & Occlusion")]
    ContactOcclusion,
    #[serde(rename = "Spatial Containment")]
    SpatialContainment,
    Comparison,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Attributes,
        Category::Material,
        Category::PhysicalState,
        Category::ObjectRetrieval,
        Category::Ocr,
        Category::PerspectiveTransform,
        Category::Ordering,
        Category::ContactOcclusion,
        Category::SpatialContainment,
        Category::Comparison,
    ];

    pub fn protocol(self) -> Protocol {
        match self {
            Category::Attributes
            | Category::Material
            | Category::PhysicalState
            | Category::ObjectRetrieval
            | Category::Ocr => Protocol::Perception,
            _ => Protocol::Reasoning,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Attributes => "Attributes",
            Category::Material => "Material",
            Category::PhysicalState => "Physical State",
            Category::ObjectRetrieval => "Object Retrieval",
            Category::Ocr => "OCR",
            Category::PerspectiveTransform => "Perspective Transform",
            Category::Ordering => "Ordering",
            Category::ContactOcclusion => "Contact & Occlusion",
            Category::SpatialContainment => "Spatial Containment",
            Category::Comparison => "Comparison",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub letter: OptionLetter,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub id: String,
    #[serde(rename = "image_ref", alias = "image")]
    pub image: String,
    pub dims: ImageDims,
    pub category: Category,
    pub protocol: Protocol,
    pub question: String,
    pub options: Vec<OptionEntry>,
    pub answer: OptionLetter,
    pub target_boxes: Vec<BBox>,
}

impl BenchmarkSample {
    pub fn letters(&self) -> BTreeSet<OptionLetter> {
        self.options.iter().map(|o| o.letter).collect()
    }

    /// Checks the invariants serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if !(2..=6).contains(&self.options.len()) {
            return Err(format!("{} options, expected 2 to 6", self.options.len()));
        }
        let letters = self.letters();
        if letters.len() != self.options.len() {
            return Err("duplicate option letters".into());
        }
        if !letters.contains(&self.answer) {
            return Err(format!("answer {} is not among the options", self.answer));
        }
        if self.target_boxes.is_empty() {
            return Err("no target boxes".into());
        }
        if self.category.protocol() != self.protocol {
            return Err(format!(
                "category {} belongs to {}, not {}",
                self.category,
                self.category.protocol(),
                self.protocol
            ));
        }
        Ok(())
    }
}

impl HasId for BenchmarkSample {
    fn id(&self) -> String {
        self.id.clone()
    }
}

const MAX_REPORTED_ERRORS: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid dataset:\n{}", .0.iter().map(|(l, m)| format!("  line {l}: {m}")).collect::<Vec<_>>().join("\n"))]
    Schema(Vec<(usize, String)>),
}

pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let file = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(file))
}

/// Parses line-delimited samples, stopping after the first ten bad lines.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let checked = serde_json::from_str::<BenchmarkSample>(&line)
            .map_err(|e| e.to_string())
            .and_then(|s| s.validate().map(|_| s))
            .and_then(|s| {
                if seen.insert(s.id.clone()) {
                    Ok(s)
                } else {
                    Err(format!("duplicate id {:?}", s.id))
                }
            });
        match checked {
            Ok(s) => samples.push(s),
            Err(msg) => {
                errors.push((lineno, msg));
                if errors.len() == MAX_REPORTED_ERRORS {
                    break;
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(samples)
    } else {
        Err(DatasetError::Schema(errors))
    }
}

/// Dual IoU of the extracted boxes against the targets; zero without boxes.
pub fn question_iou(parsed: &ParsedResponse, gt_boxes: &[BBox]) -> f64 {
    dual_iou_reward(&parsed.boxes, gt_boxes)
        .map(|d| d.combined)
        .unwrap_or(0.0)
}

/// Recall-only variant, reported alongside for comparison.
pub fn question_iou_recall(parsed: &ParsedResponse, gt_boxes: &[BBox]) -> f64 {
    dual_iou_reward(&parsed.boxes, gt_boxes)
        .map(|d| d.recall)
        .unwrap_or(0.0)
}

pub fn render_prompt(template: &PromptTemplate, sample: &BenchmarkSample) -> String {
    let options = sample
        .options
        .iter()
        .map(|o| format!("{}. {}", o.letter, o.text))
        .collect::<Vec<_>>()
        .join("\n");
    template.render(&[
        ("question", &sample.question),
        ("options", &options),
        ("width", &sample.dims.width().to_string()),
        ("height", &sample.dims.height().to_string()),
    ])
}

/// The model under test.
#[async_trait]
pub trait ModelClient: Send + Sync {
    fn model_id(&self) -> &str;

    async fn complete(&self, sample: &BenchmarkSample, prompt: &str, seed: u64) -> Result<String, TransportError>;
}

/// Model client over a chat-completions transport. Local image paths are
/// base64-inlined, URLs passed through.
pub struct ChatModelClient {
    transport: Arc<dyn ChatTransport>,
    endpoint: EndpointConfig,
}

impl ChatModelClient {
    pub fn new(transport: Arc<dyn ChatTransport>, endpoint: EndpointConfig) -> Self {
        Self { transport, endpoint }
    }

    pub fn request_body(
        &self,
        sample: &BenchmarkSample,
        prompt: &str,
        seed: u64,
    ) -> Result<serde_json::Value, TransportError> {
        let url = ImageInput::from_ref(&sample.image)
            .to_url()
            .map_err(|e| TransportError::Input(format!("{}: {e}", sample.image)))?;
        Ok(single_turn_body(&self.endpoint, prompt, Some(&url), Some(seed)))
    }
}

#[async_trait]
impl ModelClient for ChatModelClient {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }

    async fn complete(&self, sample: &BenchmarkSample, prompt: &str, seed: u64) -> Result<String, TransportError> {
        let body = self.request_body(sample, prompt, seed)?;
        completion_text(&self.transport.send(&body).await?)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            max_retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub parsed: ParsedResponse,
    pub choice: Option<OptionLetter>,
    pub correct: bool,
    pub question_iou: f64,
    pub question_iou_recall: f64,
    /// Transport failed on every attempt; scored incorrect with zero IoU.
    pub unanswered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
    pub latency_secs: f64,
}

pub fn score_response(sample: &BenchmarkSample, raw: &str) -> (ParsedResponse, Option<OptionLetter>, bool, f64, f64) {
    let parsed = parse_response(raw);
    let choice = parsed.choice_among(&sample.letters());
    let correct = choice == Some(sample.answer);
    let iou = question_iou(&parsed, &sample.target_boxes);
    let recall = question_iou_recall(&parsed, &sample.target_boxes);
    (parsed, choice, correct, iou, recall)
}

async fn evaluate_one(
    model: &dyn ModelClient,
    sample: &BenchmarkSample,
    template: &PromptTemplate,
    seed: u64,
    opts: &EvalOptions,
) -> EvalRecord {
    let prompt = render_prompt(template, sample);
    let started = Instant::now();
    let mut attempts = 0;
    let outcome = loop {
        attempts += 1;
        match model.complete(sample, &prompt, seed).await {
            Ok(text) => break Ok(text),
            Err(e) if e.is_retryable() && attempts <= opts.max_retries => {
                tracing::warn!(id = %sample.id, attempt = attempts, error = %e, "model call failed, retrying");
                tokio::time::sleep(opts.backoff * attempts).await;
            }
            Err(e) => break Err(e),
        }
    };
    let latency_secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(text) => {
            let (parsed, choice, correct, question_iou, question_iou_recall) = score_response(sample, &text);
            EvalRecord {
                id: sample.id.clone(),
                parsed,
                choice,
                correct,
                question_iou,
                question_iou_recall,
                unanswered: false,
                error: None,
                attempts,
                latency_secs,
            }
        }
        Err(e) => {
            tracing::error!(id = %sample.id, error = %e, "sample left unanswered");
            EvalRecord {
                id: sample.id.clone(),
                parsed: parse_response(""),
                choice: None,
                correct: false,
                question_iou: 0.0,
                question_iou_recall: 0.0,
                unanswered: true,
                error: Some(e.to_string()),
                attempts,
                latency_secs,
            }
        }
    }
}

/// Queries the model on every sample with bounded parallelism. Records come
/// back in sample order.
pub async fn evaluate(
    model: &dyn ModelClient,
    samples: &[BenchmarkSample],
    template: &PromptTemplate,
    seed: u64,
    opts: &EvalOptions,
) -> Vec<EvalRecord> {
    let futs: Vec<_> = samples
        .iter()
        .map(|s| evaluate_one(model, s, template, seed, opts))
        .collect();
    stream::iter(futs).buffered(opts.max_in_flight.max(1)).collect().await
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"id":"q1","image":"img/1.jpg","dims":{"width":100,"height":80},"category":"Physical State","protocol":"Perception","question":"Is the cup broken?","options":[{"letter":"A","text":"yes"},{"letter":"B","text":"no"}],"answer":"B","target_boxes":[[10,10,20,20]]}"#;

    fn with(field: &str, value: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(GOOD).unwrap();
        v[field] = serde_json::from_str(value).unwrap();
        v.to_string()
    }

    #[test]
    fn loads_well_formed_lines() {
        let text = format!("{GOOD}\n\n{}\n{}\n", with("id", r#""q2""#), with("id", r#""q3""#));
        let samples = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].category, Category::PhysicalState);
    }

    #[test]
    fn rejects_answer_outside_options() {
        let text = format!("{GOOD}\n{}\n", with("answer", r#""C""#));
        match parse_dataset(text.as_bytes()) {
            Err(DatasetError::Schema(errs)) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].0, 2);
                assert!(errs[0].1.contains("answer C"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_degenerate_box() {
        let text = with("target_boxes", "[[5,5,5,9]]");
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn rejects_protocol_mismatch_and_duplicates() {
        let text = format!("{}\n{GOOD}\n{GOOD}\n", with("protocol", r#""Reasoning""#));
        let Err(DatasetError::Schema(errs)) = parse_dataset(text.as_bytes()) else {
            panic!()
        };
        assert_eq!(errs.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn stops_after_ten_errors() {
        let bad = with("answer", r#""F""#);
        let text = vec![bad; 25].join("\n");
        let Err(DatasetError::Schema(errs)) = parse_dataset(text.as_bytes()) else {
            panic!()
        };
        assert_eq!(errs.len(), 10);
    }

    #[test]
    fn question_iou_without_boxes_is_zero() {
        let gt = [BBox::new(0., 0., 1., 1.).unwrap()];
        assert_eq!(question_iou(&parse_response("Answer: A"), &gt), 0.0);
        assert_eq!(
            question_iou(&parse_response("<think>[0,0,1,1]</think><answer>A</answer>"), &gt),
            1.0
        );
    }

    #[test]
    fn prompt_lists_options() {
        let s: BenchmarkSample = serde_json::from_str(GOOD).unwrap();
        let p = render_prompt(&PromptTemplate::eval_v1(), &s);
        assert!(p.starts_with("Is the cup broken?"));
        assert!(p.contains("A. yes\nB. no"));
        assert!(p.contains("100x80"));
    }

    #[test]
    fn category_protocols() {
        let perception = Category::ALL
            .iter()
            .filter(|c| c.protocol() == Protocol::Perception)
            .count();
        assert_eq!(perception, 5);
        assert_eq!(
            serde_json::to_string(&Category::ContactOcclusion).unwrap(),
            r#""Contact & Occlusion""#
        );
    }
}
