use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BenchmarkSample, Category, EvalRecord, Protocol};
use crate::geometry::relative_area;
use crate::parser::OptionLetter;
use crate::template::TemplateProvenance;

pub const HISTOGRAM_BINS: usize = 20;
const BIN_WIDTH: f64 = 1.0 / HISTOGRAM_BINS as f64;

const IOU_DEFINITION: &str = "question IoU = (recall + precision) / 2 of extracted boxes against target boxes, \
     0 when no box is extracted; miou_recall_only uses the recall term alone";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("no records to report on")]
    Empty,
    #[error("records do not align with samples: {0}")]
    Misaligned(String),
}

/// Fixed-width histogram over [0, 1]; values at or above 1 land in the top bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            bin_width: BIN_WIDTH,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl Histogram {
    pub fn add(&mut self, v: f64) {
        let bin = ((v.max(0.0) * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: Category,
    pub protocol: Protocol,
    pub total: usize,
    pub correct: usize,
    /// Percent; `None` when the category has no questions.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub protocol: Protocol,
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHistograms {
    pub all: Histogram,
    pub correct: Histogram,
    pub incorrect: Histogram,
    pub perception: Histogram,
    pub reasoning: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub answer_letters: BTreeMap<OptionLetter, usize>,
    pub instances_per_question: BTreeMap<usize, usize>,
    /// Per-question mean relative target area.
    pub relative_area_histogram: Histogram,
    pub mean_relative_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<TemplateProvenance>,
    pub total: usize,
    pub correct: usize,
    pub unanswered: usize,
    pub format_ok: usize,
    pub overall_accuracy: f64,
    pub per_category: Vec<CategoryRow>,
    pub per_protocol: Vec<ProtocolRow>,
    pub miou: f64,
    pub miou_recall_only: f64,
    pub mean_iou_correct: Option<f64>,
    pub mean_iou_incorrect: Option<f64>,
    /// Probability that a correct answer carries a higher question IoU than an
    /// incorrect one (ties count half).
    pub iou_correctness_auc: Option<f64>,
    pub histograms: IouHistograms,
    pub distribution: DistributionStats,
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let wins: f64 = pos
        .iter()
        .flat_map(|p| {
            neg.iter().map(move |n| {
                if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                }
            })
        })
        .sum();
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn build_report(records: &[EvalRecord], samples: &[BenchmarkSample]) -> Result<EvalReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    if records.len() != samples.len() {
        return Err(ReportError::Misaligned(format!(
            "{} records for {} samples",
            records.len(),
            samples.len()
        )));
    }
    let by_id: HashMap<&str, &BenchmarkSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = HashMap::new();

    let mut cat_counts: BTreeMap<Category, (usize, usize)> = Category::ALL.iter().map(|c| (*c, (0, 0))).collect();
    let mut hist = IouHistograms {
        all: Histogram::default(),
        correct: Histogram::default(),
        incorrect: Histogram::default(),
        perception: Histogram::default(),
        reasoning: Histogram::default(),
    };
    let (mut ious, mut recalls) = (Vec::new(), Vec::new());
    let (mut ious_correct, mut ious_incorrect) = (Vec::new(), Vec::new());
    let (mut unanswered, mut format_ok) = (0, 0);

    for r in records {
        let sample = by_id
            .get(r.id.as_str())
            .ok_or_else(|| ReportError::Misaligned(format!("unknown sample id {:?}", r.id)))?;
        if seen.insert(r.id.as_str(), ()).is_some() {
            return Err(ReportError::Misaligned(format!("duplicate record for {:?}", r.id)));
        }
        let entry = cat_counts.get_mut(&sample.category).unwrap();
        entry.0 += 1;
        entry.1 += r.correct as usize;
        unanswered += r.unanswered as usize;
        format_ok += r.parsed.format_ok as usize;

        ious.push(r.question_iou);
        recalls.push(r.question_iou_recall);
        hist.all.add(r.question_iou);
        if r.correct {
            hist.correct.add(r.question_iou);
            ious_correct.push(r.question_iou);
        } else {
            hist.incorrect.add(r.question_iou);
            ious_incorrect.push(r.question_iou);
        }
        match sample.protocol {
            Protocol::Perception => hist.perception.add(r.question_iou),
            Protocol::Reasoning => hist.reasoning.add(r.question_iou),
        }
    }

    let per_category: Vec<CategoryRow> = cat_counts
        .iter()
        .map(|(c, (total, correct))| CategoryRow {
            category: *c,
            protocol: c.protocol(),
            total: *total,
            correct: *correct,
            accuracy: percent(*correct, *total),
        })
        .collect();
    let per_protocol = Protocol::ALL
        .iter()
        .map(|p| {
            let (total, correct) = per_category
                .iter()
                .filter(|row| row.protocol == *p)
                .fold((0, 0), |(t, c), row| (t + row.total, c + row.correct));
            ProtocolRow {
                protocol: *p,
                total,
                correct,
                accuracy: percent(correct, total),
            }
        })
        .collect();

    let total = records.len();
    let correct = ious_correct.len();

    let mut answer_letters: BTreeMap<OptionLetter, usize> = BTreeMap::new();
    let mut instances_per_question: BTreeMap<usize, usize> = BTreeMap::new();
    let mut area_hist = Histogram::default();
    let mut areas = Vec::with_capacity(samples.len());
    for s in samples {
        *answer_letters.entry(s.answer).or_default() += 1;
        *instances_per_question.entry(s.target_boxes.len()).or_default() += 1;
        let area = s.target_boxes.iter().map(|b| relative_area(b, s.dims)).sum::<f64>() / s.target_boxes.len() as f64;
        area_hist.add(area);
        areas.push(area);
    }

    Ok(EvalReport {
        iou_definition: IOU_DEFINITION.to_owned(),
        model: None,
        prompt_template: None,
        total,
        correct,
        unanswered,
        format_ok,
        overall_accuracy: 100.0 * correct as f64 / total as f64,
        per_category,
        per_protocol,
        miou: mean(&ious).unwrap_or(0.0),
        miou_recall_only: mean(&recalls).unwrap_or(0.0),
        mean_iou_correct: mean(&ious_correct),
        mean_iou_incorrect: mean(&ious_incorrect),
        iou_correctness_auc: auc(&ious_correct, &ious_incorrect),
        histograms: hist,
        distribution: DistributionStats {
            answer_letters,
            instances_per_question,
            relative_area_histogram: area_hist,
            mean_relative_area: mean(&areas).unwrap_or(0.0),
        },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn with_provenance(mut self, model: Option<String>, prompt: Option<TemplateProvenance>) -> Self {
        self.model = model;
        self.prompt_template = prompt;
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn category_csv(&self) -> String {
        let mut out = String::from("category,protocol,total,correct,accuracy\n");
        for row in &self.per_category {
            let acc = row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{acc}",
                row.category, row.protocol, row.total, row.correct
            )
            .unwrap();
        }
        for row in &self.per_protocol {
            let acc = row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
            writeln!(out, "(all),{},{},{},{acc}", row.protocol, row.total, row.correct).unwrap();
        }
        writeln!(
            out,
            "(all),(all),{},{},{:.4}",
            self.total, self.correct, self.overall_accuracy
        )
        .unwrap();
        out
    }

    /// Long-format histogram table: `histogram,bin_start,bin_end,count`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("histogram,bin_start,bin_end,count\n");
        let h = &self.histograms;
        let named = [
            ("iou_all", &h.all),
            ("iou_correct", &h.correct),
            ("iou_incorrect", &h.incorrect),
            ("iou_perception", &h.perception),
            ("iou_reasoning", &h.reasoning),
            ("relative_area", &self.distribution.relative_area_histogram),
        ];
        for (name, hist) in named {
            for (i, count) in hist.counts.iter().enumerate() {
                let lo = i as f64 * hist.bin_width;
                let hi = (i + 1) as f64 * hist.bin_width;
                writeln!(out, "{name},{lo:.2},{hi:.2},{count}").unwrap();
            }
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("# Evaluation report\n\n");
        if let Some(m) = &self.model {
            writeln!(out, "- model: `{m}`").unwrap();
        }
        if let Some(p) = &self.prompt_template {
            writeln!(out, "- prompt template: `{}` (sha256 `{}`)", p.name, p.sha256).unwrap();
        }
        writeln!(out, "- IoU definition: {}", self.iou_definition).unwrap();
        writeln!(
            out,
            "- questions: {} (unanswered {}, well-formed {})\n",
            self.total, self.unanswered, self.format_ok
        )
        .unwrap();
        writeln!(out, "| Overall | mIoU | mIoU (recall) |").unwrap();
        writeln!(out, "|---|---|---|").unwrap();
        writeln!(
            out,
            "| {:.1} | {:.1} | {:.1} |\n",
            self.overall_accuracy,
            100.0 * self.miou,
            100.0 * self.miou_recall_only
        )
        .unwrap();
        writeln!(out, "| Category | Protocol | Correct / Total | Accuracy |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        for row in &self.per_category {
            writeln!(
                out,
                "| {} | {} | {} / {} | {} |",
                row.category,
                row.protocol,
                row.correct,
                row.total,
                fmt_opt(row.accuracy)
            )
            .unwrap();
        }
        for row in &self.per_protocol {
            writeln!(
                out,
                "| (all) | {} | {} / {} | {} |",
                row.protocol,
                row.correct,
                row.total,
                fmt_opt(row.accuracy)
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "Mean question IoU: correct {} / incorrect {}; IoU-correctness AUC {}.",
            self.mean_iou_correct
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            self.mean_iou_incorrect
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            self.iou_correctness_auc
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
        )
        .unwrap();
        writeln!(
            out,
            "Mean relative target area: {:.4}.",
            self.distribution.mean_relative_area
        )
        .unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_binning() {
        let mut h = Histogram::default();
        for v in [0.0, 0.049, 0.05, 0.5, 0.99, 1.0, 1.7] {
            h.add(v);
        }
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[19], 3);
        assert_eq!(h.total(), 7);
    }

    #[test]
    fn auc_orders_groups() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(auc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(auc(&[], &[0.5]), None);
    }

    #[test]
    fn empty_records_error() {
        assert_eq!(build_report(&[], &[]), Err(ReportError::Empty));
    }
}
