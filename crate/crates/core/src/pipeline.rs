//! Seeded dataset construction: coordinate conversion, multi-box filtering,
//! reflective decoy injection and counting-question generation.
//!
//! Every random choice is drawn from an RNG derived from `(seed, record id)`,
//! so a record's output does not depend on processing order or parallelism.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{iou, BBox, GeometryError, ImageDims};
use crate::harness::OptionEntry;
use crate::parser::{find_quadruples, render_box, OptionLetter};
use crate::rewards::GroundTruth;
use crate::verdicts::HasId;

pub const REFLECTION_MARKER: &str = "Wait, this box seems to be wrong";

/// Share of multi-box trajectories that receive a decoy by default (4.7K of 35K).
pub const DEFAULT_REFLECTION_FRACTION: f64 = 4.7 / 35.0;

pub const COUNT_RANGE: std::ops::RangeInclusive<usize> = 5..=10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("normalized box {0:?} must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")]
    BadNormalized([f64; 4]),
    #[error("trajectory {0:?} has no boxes to perturb")]
    NoBoxes(String),
    #[error("cannot place decoy in {id:?} after {attempts} attempts")]
    CannotPlaceDecoy { id: String, attempts: usize },
}

/// Deterministic per-record RNG.
pub fn record_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormalizedBox([f64; 4]);

impl NormalizedBox {
    pub fn new(rx1: f64, ry1: f64, rx2: f64, ry2: f64) -> Result<Self, PipelineError> {
        let v = [rx1, ry1, rx2, ry2];
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if v.iter().all(|x| unit(*x)) && rx1 < rx2 && ry1 < ry2 {
            Ok(Self(v))
        } else {
            Err(PipelineError::BadNormalized(v))
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        self.0
    }
}

impl TryFrom<[f64; 4]> for NormalizedBox {
    type Error = PipelineError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        NormalizedBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormalizedBox> for [f64; 4] {
    fn from(b: NormalizedBox) -> Self {
        b.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    None,
    /// Round each coordinate half away from zero.
    Nearest,
}

/// Scales `[rx1, ry1, rx2, ry2]` to `[W rx1, H ry1, W rx2, H ry2]`.
pub fn denormalize(b: NormalizedBox, dims: ImageDims, rounding: Rounding) -> Result<BBox, PipelineError> {
    let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
    let [rx1, ry1, rx2, ry2] = b.0;
    let mut v = [w * rx1, h * ry1, w * rx2, h * ry2];
    if rounding == Rounding::Nearest {
        v = v.map(f64::round);
    }
    Ok(BBox::try_from(v)?)
}

/// Inverse of [`denormalize`]; fails for boxes outside the image.
pub fn normalize(b: &BBox, dims: ImageDims) -> Result<NormalizedBox, PipelineError> {
    let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
    NormalizedBox::new(b.x1() / w, b.y1() / h, b.x2() / w, b.y2() / h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Step {
    Box {
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Text {
        text: String,
    },
}

/// A reasoning trajectory with interleaved boxes in absolute pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    #[serde(rename = "image_ref", alias = "image")]
    pub image: String,
    pub dims: ImageDims,
    pub question: String,
    pub steps: Vec<Step>,
    pub answer: String,
    /// Step index of an injected decoy box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_step: Option<usize>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl HasId for Trajectory {
    fn id(&self) -> String {
        self.id.clone()
    }
}

impl Trajectory {
    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.steps.iter().filter_map(|s| match s {
            Step::Box { bbox } => Some(bbox),
            Step::Text { .. } => None,
        })
    }

    pub fn box_count(&self) -> usize {
        self.boxes().count()
    }

    /// Flattens the steps into a think/answer training target.
    pub fn render(&self) -> String {
        let think: Vec<String> = self
            .steps
            .iter()
            .map(|s| match s {
                Step::Box { bbox } => render_box(bbox),
                Step::Text { text } => text.clone(),
            })
            .collect();
        format!("<think>{}</think><answer>{}</answer>", think.join(" "), self.answer)
    }
}

/// Input record with normalized boxes written inline in the reasoning text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTrajectory {
    pub id: String,
    #[serde(rename = "image_ref", alias = "image")]
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub question: String,
    pub reasoning: String,
    pub answer: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Converts a normalized-coordinate record into an absolute-pixel trajectory.
/// Quadruples that are not valid normalized boxes stay in the text.
pub fn denormalize_trajectory(rec: NormalizedTrajectory, rounding: Rounding) -> Result<Trajectory, PipelineError> {
    let dims = ImageDims::new(rec.width, rec.height)?;
    let mut steps = Vec::new();
    let mut cursor = 0;
    let push_text = |steps: &mut Vec<Step>, s: &str| {
        let s = s.trim();
        if !s.is_empty() {
            steps.push(Step::Text { text: s.to_owned() });
        }
    };
    for (span, quad) in find_quadruples(&rec.reasoning) {
        let Ok(nb) = NormalizedBox::try_from(quad) else {
            continue;
        };
        push_text(&mut steps, &rec.reasoning[cursor..span.start]);
        steps.push(Step::Box {
            bbox: denormalize(nb, dims, rounding)?,
        });
        cursor = span.end;
    }
    push_text(&mut steps, &rec.reasoning[cursor..]);
    Ok(Trajectory {
        id: rec.id,
        image: rec.image,
        dims,
        question: rec.question,
        steps,
        answer: rec.answer,
        decoy_step: None,
        extra: rec.extra,
    })
}

/// Keeps trajectories with more than one box, in input order.
pub fn filter_multibox(trajectories: Vec<Trajectory>) -> Vec<Trajectory> {
    trajectories.into_iter().filter(|t| t.box_count() >= 2).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyConfig {
    pub iou_ceiling: f64,
    pub max_attempts: usize,
    /// Decoy side lengths as a fraction of the image sides.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
}

impl Default for DecoyConfig {
    fn default() -> Self {
        Self {
            iou_ceiling: 0.1,
            max_attempts: 1000,
            min_side_frac: 0.02,
            max_side_frac: 0.2,
        }
    }
}

fn sample_decoy(rng: &mut ChaCha8Rng, dims: ImageDims, cfg: &DecoyConfig) -> BBox {
    let side = |rng: &mut ChaCha8Rng, full: u32| -> u32 {
        let frac = rng.random_range(cfg.min_side_frac..=cfg.max_side_frac);
        ((frac * f64::from(full)).round() as u32).clamp(1, full)
    };
    let (w, h) = (side(rng, dims.width()), side(rng, dims.height()));
    let x1 = rng.random_range(0..=dims.width() - w);
    let y1 = rng.random_range(0..=dims.height() - h);
    BBox::new(f64::from(x1), f64::from(y1), f64::from(x1 + w), f64::from(y1 + h)).expect("positive side lengths")
}

/// Inserts one integer-pixel decoy box at a random position among the
/// existing boxes, immediately followed by the reflection marker. The decoy
/// overlaps every original box with IoU below `iou_ceiling` (or not at all).
pub fn inject_reflection(t: &Trajectory, seed: u64, cfg: &DecoyConfig) -> Result<Trajectory, PipelineError> {
    let box_steps: Vec<usize> = t
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Step::Box { .. }))
        .map(|(i, _)| i)
        .collect();
    if box_steps.is_empty() {
        return Err(PipelineError::NoBoxes(t.id.clone()));
    }
    let originals: Vec<BBox> = t.boxes().copied().collect();
    let mut rng = record_rng(seed, &t.id);

    let slot = rng.random_range(0..=box_steps.len());
    let at = match box_steps.get(slot) {
        Some(i) => *i,
        None => box_steps[box_steps.len() - 1] + 1,
    };

    let acceptable = |d: &BBox| {
        originals.iter().all(|o| {
            let v = iou(d, o);
            v < cfg.iou_ceiling || v == 0.0
        })
    };
    let decoy = (0..cfg.max_attempts)
        .map(|_| sample_decoy(&mut rng, t.dims, cfg))
        .find(acceptable)
        .ok_or_else(|| PipelineError::CannotPlaceDecoy {
            id: t.id.clone(),
            attempts: cfg.max_attempts,
        })?;

    let mut out = t.clone();
    out.steps.insert(at, Step::Box { bbox: decoy });
    out.steps.insert(
        at + 1,
        Step::Text {
            text: REFLECTION_MARKER.to_owned(),
        },
    );
    out.decoy_step = Some(at);
    Ok(out)
}

/// Whether a record is drawn into the reflective subset.
pub fn selected_for_reflection(seed: u64, id: &str, fraction: f64) -> bool {
    // separate stream from the decoy draws
    let mut rng = record_rng(seed ^ 0x5eed_5e1e_c7ed, id);
    rng.random::<f64>() < fraction
}

/// Object annotations for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub id: String,
    #[serde(rename = "image_ref", alias = "image")]
    pub image: String,
    pub dims: ImageDims,
    pub objects: Vec<AnnotatedObject>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub category: String,
    pub bbox: BBox,
}

const VISDRONE_CATEGORIES: [&str; 12] = [
    "ignored region",
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
    "others",
];

/// Parses a VisDrone detection annotation file
/// (`left,top,width,height,score,category,truncation,occlusion` per line).
/// Ignored regions, the catch-all class, zero-score rows and zero-area boxes
/// are dropped.
pub fn parse_visdrone(id: &str, image: &str, dims: ImageDims, text: &str) -> Result<ImageAnnotation, String> {
    let mut objects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .filter(|f| !f.trim().is_empty())
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        if fields.len() < 6 {
            return Err(format!("line {}: expected at least 6 fields", i + 1));
        }
        let (left, top, w, h, score, cat) = (fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]);
        let cat = cat as usize;
        if score == 0.0 || cat == 0 || cat >= 11 {
            continue;
        }
        let Ok(bbox) = BBox::new(left, top, left + w, top + h) else {
            continue;
        };
        objects.push(AnnotatedObject {
            category: VISDRONE_CATEGORIES[cat].to_owned(),
            bbox,
        });
    }
    Ok(ImageAnnotation {
        id: id.to_owned(),
        image: image.to_owned(),
        dims,
        objects,
        extra: Map::new(),
    })
}

/// A multiple-choice counting question, serialized with the benchmark's
/// field names so it can feed the reward and evaluation stages directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingSample {
    pub id: String,
    #[serde(rename = "image_ref", alias = "image")]
    pub image: String,
    pub dims: ImageDims,
    pub object_category: String,
    pub question: String,
    pub gt_count: usize,
    pub options: Vec<OptionEntry>,
    pub answer: OptionLetter,
    pub target_boxes: Vec<BBox>,
}

impl HasId for CountingSample {
    fn id(&self) -> String {
        self.id.clone()
    }
}

impl CountingSample {
    pub fn option_counts(&self) -> Vec<usize> {
        self.options.iter().filter_map(|o| o.text.parse().ok()).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut gt = GroundTruth::mcq(self.answer, self.target_boxes.clone());
        gt.question = self.question.clone();
        if let crate::rewards::ExpectedAnswer::Mcq { options, .. } = &mut gt.expected {
            *options = Some(self.options.iter().map(|o| o.letter).collect());
        }
        gt
    }
}

/// Turns one image's annotations into a counting question, or `None` when no
/// category has between 5 and 10 instances. Distractors are three distinct
/// counts drawn from `gt ± {1, 2, 3}`.
pub fn make_counting_mcq(ann: &ImageAnnotation, seed: u64) -> Option<CountingSample> {
    let mut groups: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    for o in &ann.objects {
        groups.entry(o.category.as_str()).or_default().push(o.bbox);
    }
    let qualifying: Vec<(&str, Vec<BBox>)> = groups
        .into_iter()
        .filter(|(_, boxes)| COUNT_RANGE.contains(&boxes.len()))
        .collect();
    let mut rng = record_rng(seed, &ann.id);
    let (category, boxes) = qualifying.choose(&mut rng)?.clone();
    let gt = boxes.len();

    let mut candidates: Vec<usize> = (1..=3)
        .flat_map(|d| [gt.checked_sub(d), Some(gt + d)])
        .flatten()
        .collect();
    candidates.shuffle(&mut rng);
    let mut counts = vec![gt];
    counts.extend(candidates.into_iter().take(3));
    counts.shuffle(&mut rng);

    let answer_idx = counts.iter().position(|c| *c == gt).expect("gt is among the options");
    let options = counts
        .iter()
        .enumerate()
        .map(|(i, c)| OptionEntry {
            letter: OptionLetter::from_index(i).expect("four options"),
            text: c.to_string(),
        })
        .collect();
    Some(CountingSample {
        id: format!("{}:{}", ann.id, category),
        image: ann.image.clone(),
        dims: ann.dims,
        object_category: category.to_owned(),
        question: format!("How many {category} are in the image?"),
        gt_count: gt,
        options,
        answer: OptionLetter::from_index(answer_idx).expect("four options"),
        target_boxes: boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    fn traj(id: &str, boxes: &[[f64; 4]]) -> Trajectory {
        let mut steps = vec![Step::Text { text: "look".into() }];
        for b in boxes {
            steps.push(Step::Box {
                bbox: BBox::try_from(*b).unwrap(),
            });
            steps.push(Step::Text { text: "then".into() });
        }
        Trajectory {
            id: id.into(),
            image: "x.jpg".into(),
            dims: dims(640, 480),
            question: "q".into(),
            steps,
            answer: "A".into(),
            decoy_step: None,
            extra: Map::new(),
        }
    }

    #[test]
    fn denormalize_examples() {
        let full = NormalizedBox::new(0., 0., 1., 1.).unwrap();
        assert_eq!(
            denormalize(full, dims(100, 50), Rounding::None).unwrap().to_array(),
            [0., 0., 100., 50.]
        );
        let b = NormalizedBox::new(0.25, 0.2, 0.75, 0.8).unwrap();
        let abs = denormalize(b, dims(100, 50), Rounding::None).unwrap();
        assert_eq!(abs.to_array(), [25., 10., 75., 40.]);
        let back = normalize(&abs, dims(100, 50)).unwrap().to_array();
        for (x, y) in back.iter().zip(b.to_array()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn rounding_mode() {
        let b = NormalizedBox::new(0.105, 0.0, 0.5, 0.5).unwrap();
        let r = denormalize(b, dims(10, 10), Rounding::Nearest).unwrap();
        assert_eq!(r.to_array(), [1., 0., 5., 5.]);
        let tiny = NormalizedBox::new(0.1, 0.1, 0.12, 0.5).unwrap();
        assert!(denormalize(tiny, dims(10, 10), Rounding::Nearest).is_err());
    }

    #[test]
    fn bad_normalized_boxes() {
        assert!(NormalizedBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(NormalizedBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(normalize(&BBox::new(0., 0., 200., 10.).unwrap(), dims(100, 100)).is_err());
    }

    #[test]
    fn trajectory_from_normalized_text() {
        let rec: NormalizedTrajectory = serde_json::from_value(serde_json::json!({
            "id": "v1", "image": "a.jpg", "width": 200, "height": 100,
            "question": "q", "answer": "cat", "source": "gqa",
            "reasoning": "The cat [0.1, 0.2, 0.3, 0.4] sits near (0.5,0.5,1,1); ignore [1, 2, 30, 40]."
        }))
        .unwrap();
        let t = denormalize_trajectory(rec, Rounding::None).unwrap();
        assert_eq!(t.box_count(), 2);
        assert_eq!(t.boxes().next().unwrap().to_array(), [20., 20., 60., 40.]);
        assert_eq!(t.extra["source"], "gqa");
        assert!(matches!(&t.steps[4], Step::Text { text } if text.contains("[1, 2, 30, 40]")));
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["source"], "gqa");
        assert_eq!(json["steps"][1]["box"][0], 20.0);
    }

    #[test]
    fn multibox_filter() {
        let ts = vec![
            traj("0", &[]),
            traj("1", &[[0., 0., 1., 1.]]),
            traj("2", &[[0., 0., 1., 1.], [2., 2., 3., 3.]]),
            traj("3", &[[0., 0., 1., 1.], [2., 2., 3., 3.], [4., 4., 5., 5.]]),
        ];
        let kept: Vec<String> = filter_multibox(ts).into_iter().map(|t| t.id).collect();
        assert_eq!(kept, vec!["2", "3"]);
        assert!(filter_multibox(vec![traj("a", &[[0., 0., 1., 1.]])]).is_empty());
    }

    #[test]
    fn reflection_single_box() {
        let t = traj("r", &[[100., 100., 200., 200.]]);
        let out = inject_reflection(&t, 3, &DecoyConfig::default()).unwrap();
        assert_eq!(out.box_count(), 2);
        let at = out.decoy_step.unwrap();
        let Step::Box { bbox: decoy } = &out.steps[at] else {
            panic!()
        };
        assert!(iou(decoy, &BBox::new(100., 100., 200., 200.).unwrap()) < 0.1);
        assert_eq!(
            out.steps[at + 1],
            Step::Text {
                text: REFLECTION_MARKER.into()
            }
        );
        assert_eq!(out.render().matches(REFLECTION_MARKER).count(), 1);
        let originals: Vec<_> = t.boxes().collect();
        let kept: Vec<_> = out
            .steps
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != at)
            .filter_map(|(_, s)| match s {
                Step::Box { bbox } => Some(bbox),
                _ => None,
            })
            .collect();
        assert_eq!(originals, kept);
        assert_eq!(inject_reflection(&t, 3, &DecoyConfig::default()).unwrap(), out);
    }

    #[test]
    fn reflection_errors() {
        assert!(matches!(
            inject_reflection(&traj("e", &[]), 1, &DecoyConfig::default()),
            Err(PipelineError::NoBoxes(_))
        ));
        // every decoy overlaps a full-image box
        let crowded = traj("c", &[[0., 0., 640., 480.]]);
        let strict = DecoyConfig {
            iou_ceiling: 0.0,
            max_attempts: 50,
            ..DecoyConfig::default()
        };
        assert!(matches!(
            inject_reflection(&crowded, 1, &strict),
            Err(PipelineError::CannotPlaceDecoy { .. })
        ));
    }

    fn annotation(counts: &[(&str, usize)]) -> ImageAnnotation {
        let mut objects = Vec::new();
        for (cat, n) in counts {
            for i in 0..*n {
                let x = i as f64 * 10.0;
                objects.push(AnnotatedObject {
                    category: (*cat).into(),
                    bbox: BBox::new(x, 0., x + 5., 5.).unwrap(),
                });
            }
        }
        ImageAnnotation {
            id: "img".into(),
            image: "img.jpg".into(),
            dims: dims(1000, 1000),
            objects,
            extra: Map::new(),
        }
    }

    #[test]
    fn counting_examples() {
        let s = make_counting_mcq(&annotation(&[("car", 7), ("bus", 2)]), 9).unwrap();
        assert_eq!(s.gt_count, 7);
        assert_eq!(s.object_category, "car");
        assert_eq!(s.options[s.answer.index()].text, "7");
        assert_eq!(s.target_boxes.len(), 7);
        assert_eq!(s.question, "How many car are in the image?");

        assert_eq!(make_counting_mcq(&annotation(&[("car", 3), ("van", 12)]), 9), None);
        let again = make_counting_mcq(&annotation(&[("car", 7), ("bus", 2)]), 9).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn visdrone_parsing() {
        let text =
            "684,8,273,116,0,0,0,0\n406,119,265,70,1,4,0,0\n10,10,0,5,1,4,0,0\n1,2,3,4,1,11,0,0\n5,5,5,5,1,1,0,1\n";
        let ann = parse_visdrone("0001", "0001.jpg", dims(1360, 765), text).unwrap();
        assert_eq!(ann.objects.len(), 2);
        assert_eq!(ann.objects[0].category, "car");
        assert_eq!(ann.objects[0].bbox.to_array(), [406., 119., 671., 189.]);
        assert_eq!(ann.objects[1].category, "pedestrian");
        assert!(parse_visdrone("x", "x", dims(1, 1), "1,2,three,4,1,1").is_err());
    }

    #[test]
    fn record_rng_depends_on_seed_and_id() {
        let a: u64 = record_rng(1, "a").random();
        assert_eq!(a, record_rng(1, "a").random::<u64>());
        assert_ne!(a, record_rng(2, "a").random::<u64>());
        assert_ne!(a, record_rng(1, "b").random::<u64>());
    }
}
