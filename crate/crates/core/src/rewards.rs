//! Per-response reward composition and group-relative advantages.
//!
//! The total reward is `acc + format + iou`, where `iou` is the mean of the
//! dual IoU recall and precision terms. Samples without ground-truth boxes
//! contribute zero on every IoU component.

use std::collections::BTreeSet;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{dual_iou_reward, BBox, DualIou};
use crate::judge::{Judge, JudgeError, JudgeQuery, Verdict};
use crate::parser::{OptionLetter, ParsedResponse, PARSER_VERSION};

pub const FORMULA_VERSION: &str = "acc+format+dual-iou/v1";
pub const DEFAULT_ADVANTAGE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Error)]
pub enum RewardError {
    #[error("judge required for open-ended answer but none is available")]
    JudgeRequired,
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("group too small: {0} response(s), need at least 2")]
    GroupTooSmall(usize),
    #[error("reward for response {index} is not finite")]
    NonFiniteReward { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "answer_kind", rename_all = "snake_case")]
pub enum ExpectedAnswer {
    Mcq {
        answer: OptionLetter,
        /// Letters offered by the question; all six when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<BTreeSet<OptionLetter>>,
    },
    OpenEnded {
        answer: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub expected: ExpectedAnswer,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub target_boxes: Vec<BBox>,
}

impl GroundTruth {
    pub fn mcq(answer: OptionLetter, target_boxes: Vec<BBox>) -> Self {
        Self {
            expected: ExpectedAnswer::Mcq { answer, options: None },
            question: String::new(),
            target_boxes,
        }
    }

    pub fn open_ended(question: impl Into<String>, answer: impl Into<String>, target_boxes: Vec<BBox>) -> Self {
        Self {
            expected: ExpectedAnswer::OpenEnded { answer: answer.into() },
            question: question.into(),
            target_boxes,
        }
    }

    /// Whether the IoU term applies.
    pub fn has_boxes(&self) -> bool {
        !self.target_boxes.is_empty()
    }

    pub fn needs_judge(&self) -> bool {
        matches!(self.expected, ExpectedAnswer::OpenEnded { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: u8,
    pub format: u8,
    pub iou_recall: f64,
    pub iou_precision: f64,
    pub iou: f64,
    pub total: f64,
}

/// A breakdown plus the judge verdict it was derived from, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub breakdown: RewardBreakdown,
    pub verdict: Option<Verdict>,
}

pub fn format_reward(parsed: &ParsedResponse) -> u8 {
    parsed.format_ok as u8
}

/// Exact-match accuracy for multiple-choice answers. `None` for open-ended
/// ground truths, which need a judge.
pub fn mcq_accuracy(parsed: &ParsedResponse, gt: &GroundTruth) -> Option<u8> {
    match &gt.expected {
        ExpectedAnswer::Mcq { answer, options } => {
            let allowed = options
                .clone()
                .unwrap_or_else(|| OptionLetter::ALL.into_iter().collect());
            Some((parsed.choice_among(&allowed) == Some(*answer)) as u8)
        }
        ExpectedAnswer::OpenEnded { .. } => None,
    }
}

pub async fn accuracy_reward(
    parsed: &ParsedResponse,
    gt: &GroundTruth,
    judge: Option<&dyn Judge>,
) -> Result<(u8, Option<Verdict>), RewardError> {
    if let Some(acc) = mcq_accuracy(parsed, gt) {
        return Ok((acc, None));
    }
    let ExpectedAnswer::OpenEnded { answer } = &gt.expected else {
        unreachable!()
    };
    let judge = judge.ok_or(RewardError::JudgeRequired)?;
    let verdict = judge
        .judge(&JudgeQuery {
            question: &gt.question,
            reference: answer,
            prediction: parsed.answer_text().trim(),
        })
        .await?;
    Ok((verdict.score(), Some(verdict)))
}

/// IoU terms for a response; zero when the sample carries no boxes.
pub fn iou_terms(parsed: &ParsedResponse, gt: &GroundTruth) -> DualIou {
    if !gt.has_boxes() {
        return DualIou::ZERO;
    }
    dual_iou_reward(&parsed.boxes, &gt.target_boxes).unwrap_or(DualIou::ZERO)
}

/// Assembles a breakdown once accuracy is known.
pub fn compose(parsed: &ParsedResponse, gt: &GroundTruth, acc: u8) -> RewardBreakdown {
    let format = format_reward(parsed);
    let dual = iou_terms(parsed, gt);
    RewardBreakdown {
        acc,
        format,
        iou_recall: dual.recall,
        iou_precision: dual.precision,
        iou: dual.combined,
        total: f64::from(acc) + f64::from(format) + dual.combined,
    }
}

pub async fn total_reward(
    parsed: &ParsedResponse,
    gt: &GroundTruth,
    judge: Option<&dyn Judge>,
) -> Result<Scored, RewardError> {
    let (acc, verdict) = accuracy_reward(parsed, gt, judge).await?;
    Ok(Scored {
        breakdown: compose(parsed, gt, acc),
        verdict,
    })
}

/// Scores a batch with at most `max_in_flight` concurrent judge calls.
/// Output order matches input order; any judge failure fails the batch.
pub async fn score_batch(
    items: &[(ParsedResponse, GroundTruth)],
    judge: Option<&dyn Judge>,
    max_in_flight: usize,
) -> Result<Vec<Scored>, RewardError> {
    // futures are built eagerly so the stream holds no borrowing closure
    let futs: Vec<_> = items
        .iter()
        .map(|(parsed, gt)| total_reward(parsed, gt, judge))
        .collect();
    stream::iter(futs).buffered(max_in_flight.max(1)).try_collect().await
}

/// Group-normalized advantages: `(r - mean) / (std + epsilon)` with the
/// population standard deviation. A constant group yields all zeros.
pub fn compute_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    if let Some(index) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(RewardError::NonFiniteReward { index });
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// The responses sampled for one prompt.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub responses: Vec<(ParsedResponse, RewardBreakdown)>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(responses: Vec<(ParsedResponse, RewardBreakdown)>) -> Self {
        Self {
            responses,
            advantages: Vec::new(),
        }
    }

    pub fn compute_advantages(&mut self, epsilon: f64) -> Result<&[f64], RewardError> {
        let totals: Vec<f64> = self.responses.iter().map(|(_, b)| b.total).collect();
        self.advantages = compute_advantages(&totals, epsilon)?;
        Ok(&self.advantages)
    }
}

/// Identifies the reward definition: formula, parser and judge prompt.
pub fn reward_spec_hash(judge_prompt: &str) -> String {
    let prompt_hash = hex::encode(Sha256::digest(judge_prompt.as_bytes()));
    let material = format!("{FORMULA_VERSION}\n{PARSER_VERSION}\n{prompt_hash}");
    hex::encode(Sha256::digest(material.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgeError;
    use crate::parser::parse_response;
    use async_trait::async_trait;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    struct FixedJudge(Verdict);

    #[async_trait]
    impl Judge for FixedJudge {
        fn model_id(&self) -> &str {
            "fixed"
        }
        async fn judge(&self, _: &JudgeQuery<'_>) -> Result<Verdict, JudgeError> {
            Ok(self.0.clone())
        }
    }

    #[tokio::test]
    async fn mcq_accuracy_cases() {
        let gt = GroundTruth::mcq(OptionLetter::B, vec![]);
        let p = parse_response("<think>x</think><answer>B</answer>");
        assert_eq!(accuracy_reward(&p, &gt, None).await.unwrap().0, 1);
        let p = parse_response("<think>x</think><answer>no idea</answer>");
        assert_eq!(accuracy_reward(&p, &gt, None).await.unwrap().0, 0);
    }

    #[tokio::test]
    async fn open_ended_needs_judge() {
        let gt = GroundTruth::open_ended("what?", "red hydrant", vec![]);
        let p = parse_response("<think>x</think><answer>a red fire hydrant</answer>");
        assert!(matches!(
            accuracy_reward(&p, &gt, None).await,
            Err(RewardError::JudgeRequired)
        ));
        let j = FixedJudge(Verdict::Correct);
        assert_eq!(accuracy_reward(&p, &gt, Some(&j)).await.unwrap().0, 1);
        let j = FixedJudge(Verdict::NonConforming("maybe".into()));
        let (acc, verdict) = accuracy_reward(&p, &gt, Some(&j)).await.unwrap();
        assert_eq!(acc, 0);
        assert!(matches!(verdict, Some(Verdict::NonConforming(_))));
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(format_reward(&parse_response("<think>a</think><answer>B</answer>")), 1);
        assert_eq!(format_reward(&parse_response("<think>a</think><answer>B")), 0);
        assert_eq!(
            format_reward(&parse_response("<think>a</think><think>b</think><answer>B</answer>")),
            0
        );
    }

    #[test]
    fn total_reward_examples() {
        let g1 = bx(0., 0., 10., 10.);
        let g2 = bx(50., 50., 60., 60.);
        let gt = GroundTruth::mcq(OptionLetter::B, vec![g1, g2]);

        let p = parse_response("<think>[0, 0, 10, 10] [50, 50, 60, 60]</think><answer>B</answer>");
        let b = compose(&p, &gt, mcq_accuracy(&p, &gt).unwrap());
        assert_eq!(b.total, 3.0);

        let p = parse_response("<think>no boxes</think><answer>B</answer>");
        let b = compose(&p, &gt, mcq_accuracy(&p, &gt).unwrap());
        assert_eq!((b.acc, b.format, b.iou, b.total), (1, 1, 0.0, 2.0));

        let p = parse_response("<think>[0, 0, 10, 10]</think><answer>C</answer>");
        let b = compose(&p, &gt, mcq_accuracy(&p, &gt).unwrap());
        assert_eq!((b.acc, b.format, b.iou_recall, b.iou_precision), (0, 1, 0.5, 1.0));
        assert_eq!(b.total, 1.75);
    }

    #[test]
    fn boxless_samples_score_zero_iou() {
        let gt = GroundTruth::mcq(OptionLetter::A, vec![]);
        let p = parse_response("<think>[0, 0, 10, 10]</think><answer>A</answer>");
        let b = compose(&p, &gt, 1);
        assert_eq!((b.iou_recall, b.iou_precision, b.iou, b.total), (0.0, 0.0, 0.0, 2.0));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[2.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        let a = compute_advantages(&[0.0, 2.0], 1e-12).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-9 && (a[1] - 1.0).abs() < 1e-9);
        let a = compute_advantages(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        let b = compute_advantages(&[11.0, 12.0, 13.0], 1e-6).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(matches!(
            compute_advantages(&[1.0], 1e-6),
            Err(RewardError::GroupTooSmall(1))
        ));
        assert!(matches!(
            compute_advantages(&[1.0, f64::NAN], 1e-6),
            Err(RewardError::NonFiniteReward { index: 1 })
        ));
    }

    #[test]
    fn rollout_group_fills_advantages() {
        let gt = GroundTruth::mcq(OptionLetter::A, vec![]);
        let responses = [
            "<think>x</think><answer>A</answer>",
            "<think>x</think><answer>B</answer>",
        ]
        .iter()
        .map(|r| {
            let p = parse_response(r);
            let b = compose(&p, &gt, mcq_accuracy(&p, &gt).unwrap());
            (p, b)
        })
        .collect();
        let mut g = RolloutGroup::new(responses);
        let a = g.compute_advantages(DEFAULT_ADVANTAGE_EPSILON).unwrap().to_vec();
        assert!(a[0] > 0.0 && a[1] < 0.0);
        assert_eq!(g.advantages.len(), 2);
    }

    #[test]
    fn spec_hash_depends_on_prompt() {
        assert_ne!(reward_spec_hash("a"), reward_spec_hash("b"));
        assert_eq!(reward_spec_hash("a"), reward_spec_hash("a"));
    }

    #[test]
    fn ground_truth_wire_shape() {
        let gt: GroundTruth = serde_json::from_str(
            r#"{"answer_kind":"mcq","answer":"C","options":["A","B","C","D"],"target_boxes":[[0,0,1,1]]}"#,
        )
        .unwrap();
        assert!(!gt.needs_judge());
        assert!(gt.has_boxes());
        let gt: GroundTruth =
            serde_json::from_str(r#"{"answer_kind":"open_ended","answer":"a cat","question":"what?"}"#).unwrap();
        assert!(gt.needs_judge());
    }
}
