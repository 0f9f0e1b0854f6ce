//! Test support: a unit-cell rasterization oracle for IoU, the bundled
//! benchmark fixture and scripted chat models.
//!
//! Nothing here calls into the geometry module; the oracle counts grid cells
//! so it stays independent of the closed-form IoU it checks.

use std::collections::HashMap;
use std::path::PathBuf;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tracebox_core::chat::{completion_response, user_text, ChatTransport, EndpointConfig, TransportError};
use tracebox_core::geometry::{BBox, ImageDims};
use tracebox_core::harness::{load_dataset, render_prompt, BenchmarkSample};
use tracebox_core::parser::render_box;
use tracebox_core::pipeline::{AnnotatedObject, ImageAnnotation, NormalizedTrajectory, Step, Trajectory};
use tracebox_core::template::PromptTemplate;

/// Integer box `[x1, y1, x2, y2]` with `0 <= x1 < x2 <= 128`, same for y.
pub type IntBox = [i64; 4];

const GRID: i64 = 128;

/// The unit cells covered by a box, one bit per cell, one word per row.
fn raster(b: &IntBox) -> Vec<u128> {
    assert!(
        b[0] >= 0 && b[1] >= 0 && b[2] <= GRID && b[3] <= GRID && b[0] < b[2] && b[1] < b[3],
        "box {b:?} outside the raster grid"
    );
    let mut row = 0u128;
    for x in b[0]..b[2] {
        row |= 1 << x;
    }
    (0..GRID).map(|y| if y >= b[1] && y < b[3] { row } else { 0 }).collect()
}

fn count(cells: impl Iterator<Item = u128>) -> u32 {
    cells.map(u128::count_ones).sum()
}

/// IoU by counting the unit cells each box covers.
pub fn raster_iou(a: &IntBox, b: &IntBox) -> f64 {
    let (ra, rb) = (raster(a), raster(b));
    let inter = count(ra.iter().zip(&rb).map(|(x, y)| x & y));
    let union = count(ra.iter().zip(&rb).map(|(x, y)| x | y));
    f64::from(inter) / f64::from(union)
}

/// `(recall, precision, combined)` by brute force over all pairs. Empty
/// predictions score zero.
pub fn raster_dual(preds: &[IntBox], gts: &[IntBox]) -> (f64, f64, f64) {
    if preds.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut recall = 0.0;
    for g in gts {
        let mut best = 0.0f64;
        for p in preds {
            best = best.max(raster_iou(p, g));
        }
        recall += best;
    }
    recall /= gts.len() as f64;
    let mut precision = 0.0;
    for p in preds {
        let mut best = 0.0f64;
        for g in gts {
            best = best.max(raster_iou(g, p));
        }
        precision += best;
    }
    precision /= preds.len() as f64;
    (recall, precision, (recall + precision) / 2.0)
}

pub fn random_int_box(rng: &mut impl Rng, max: i64) -> IntBox {
    let x1 = rng.random_range(0..max);
    let x2 = rng.random_range(x1 + 1..=max);
    let y1 = rng.random_range(0..max);
    let y2 = rng.random_range(y1 + 1..=max);
    [x1, y1, x2, y2]
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random trajectory with 1..=5 integer boxes, each at most 40% of the
/// image side, interleaved with short text steps.
pub fn random_trajectory(rng: &mut impl Rng, id: &str) -> Trajectory {
    let (w, h) = (rng.random_range(200..2000u32), rng.random_range(200..2000u32));
    let mut steps = vec![Step::Text {
        text: "Looking at the image.".into(),
    }];
    for k in 0..rng.random_range(1..=5) {
        let bw = rng.random_range(1..=w * 2 / 5);
        let bh = rng.random_range(1..=h * 2 / 5);
        let x = rng.random_range(0..=w - bw);
        let y = rng.random_range(0..=h - bh);
        let bbox = BBox::new(x.into(), y.into(), (x + bw).into(), (y + bh).into()).unwrap();
        steps.push(Step::Box { bbox });
        steps.push(Step::Text {
            text: format!("object {k} is here."),
        });
    }
    Trajectory {
        id: id.to_owned(),
        image: format!("images/{id}.jpg"),
        dims: ImageDims::new(w, h).unwrap(),
        question: "What is shown?".into(),
        steps,
        answer: "B".into(),
        decoy_step: None,
        extra: Default::default(),
    }
}

/// Random normalized-coordinate record; returns it with the normalized boxes
/// in order of appearance.
pub fn random_normalized(rng: &mut impl Rng, id: &str) -> (NormalizedTrajectory, Vec<[f64; 4]>) {
    let mut reasoning = String::from("First");
    let mut boxes = Vec::new();
    for _ in 0..rng.random_range(0..=4) {
        let x1: f64 = rng.random_range(0.0..0.9);
        let y1: f64 = rng.random_range(0.0..0.9);
        let b = [
            x1,
            y1,
            rng.random_range(x1 + 0.01..=1.0),
            rng.random_range(y1 + 0.01..=1.0),
        ];
        reasoning.push_str(&format!(
            " the region [{}, {}, {}, {}] matters,",
            b[0], b[1], b[2], b[3]
        ));
        boxes.push(b);
    }
    reasoning.push_str(" done.");
    let rec = NormalizedTrajectory {
        id: id.to_owned(),
        image: format!("images/{id}.jpg"),
        width: rng.random_range(1..4000),
        height: rng.random_range(1..4000),
        question: "Where?".into(),
        reasoning,
        answer: "A".into(),
        extra: Default::default(),
    };
    (rec, boxes)
}

/// Annotation with a few categories whose instance counts straddle 5..=10.
pub fn random_annotation(rng: &mut impl Rng, id: &str) -> ImageAnnotation {
    let dims = ImageDims::new(1000, 800).unwrap();
    let mut objects = Vec::new();
    for cat in ["car", "pedestrian", "bus"] {
        for _ in 0..rng.random_range(0..=12) {
            let x: f64 = rng.random_range(0..950).into();
            let y: f64 = rng.random_range(0..750).into();
            objects.push(AnnotatedObject {
                category: cat.into(),
                bbox: BBox::new(x, y, x + 40.0, y + 40.0).unwrap(),
            });
        }
    }
    ImageAnnotation {
        id: id.to_owned(),
        image: format!("images/{id}.jpg"),
        dims,
        objects,
        extra: Default::default(),
    }
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

/// The 40-question synthetic benchmark: four questions per category, answer
/// letters cycling A..D so exactly ten answers are A.
pub fn bench40() -> Vec<BenchmarkSample> {
    load_dataset(&fixture_path("bench40.jsonl")).expect("bundled fixture loads")
}

/// Answers correctly and cites exactly the target boxes.
pub fn oracle_response(s: &BenchmarkSample) -> String {
    let boxes: Vec<String> = s.target_boxes.iter().map(render_box).collect();
    format!(
        "<think>The relevant objects are at {}.</think><answer>{}</answer>",
        boxes.join(" and "),
        s.answer
    )
}

pub fn always_a_response(_: &BenchmarkSample) -> String {
    "<think>I cannot tell, guessing.</think><answer>A</answer>".to_owned()
}

/// No tags, no boxes, but a recoverable answer.
pub fn untagged_response(s: &BenchmarkSample) -> String {
    format!("Answer: {}", s.answer)
}

pub fn mock_endpoint(model: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: "http://127.0.0.1:9/v1".into(),
        model: model.into(),
        api_key_env: None,
        timeout_secs: 5,
        max_retries: 0,
        max_tokens: Some(512),
        temperature: Some(0.0),
    }
}

/// Chat transport that answers each benchmark prompt with a scripted reply.
pub struct ScriptedModel {
    replies: HashMap<String, String>,
}

impl ScriptedModel {
    pub fn new(
        samples: &[BenchmarkSample],
        template: &PromptTemplate,
        reply: impl Fn(&BenchmarkSample) -> String,
    ) -> Self {
        Self {
            replies: samples.iter().map(|s| (render_prompt(template, s), reply(s))).collect(),
        }
    }
}

#[async_trait]
impl ChatTransport for ScriptedModel {
    async fn send(&self, body: &Value) -> Result<Value, TransportError> {
        let prompt = user_text(body).ok_or_else(|| TransportError::Decode("no user text".into()))?;
        let reply = self
            .replies
            .get(prompt)
            .ok_or_else(|| TransportError::Decode(format!("unscripted prompt: {prompt:.40}")))?;
        Ok(completion_response(reply))
    }
}
