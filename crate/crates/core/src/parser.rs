//! Structured view of raw model output.
//!
//! A well-formed response is exactly one `<think>` block followed by exactly
//! one `<answer>` block, with nothing but whitespace around them. Boxes are
//! absolute-pixel quadruples written either as `[x1, y1, x2, y2]`,
//! `(x1, y1, x2, y2)` or `"bbox_2d": [x1, y1, x2, y2]`.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Bumped whenever extraction rules change; part of the reward-spec hash.
pub const PARSER_VERSION: &str = "parser-v1";

const NUM: &str = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?";

static QUAD_RE: LazyLock<Regex> = LazyLock::new(|| {
    let body = format!(r"\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*");
    Regex::new(&format!(r"\[{body}\]|\({body}\)")).unwrap()
});

static FORMAT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)\A\s*<think>(.*)</think>\s*<answer>(.*)</answer>\s*\z").unwrap());

static DELIMITED_CHOICE_RES: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"[\(\[]\s*([A-F])\s*[\)\]]",
        r"(?i:answer|option|choice)(?:\s+is)?\s*[:\-]?\s*\**\s*[\(\[]?([A-F])\b",
        r"(?:^|\s)([A-F])[.:)](?:\s|$)",
        r"\*\*([A-F])\*\*",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});

static STANDALONE_CHOICE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-F])\b").unwrap());

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

/// A multiple-choice option label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptionLetter {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl OptionLetter {
    pub const ALL: [OptionLetter; 6] = [
        OptionLetter::A,
        OptionLetter::B,
        OptionLetter::C,
        OptionLetter::D,
        OptionLetter::E,
        OptionLetter::F,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for OptionLetter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if ('A'..='F').contains(&c) => Ok(Self::ALL[(c as u8 - b'A') as usize]),
            _ => Err(format!("not an option letter: {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub raw: String,
    pub think: Option<String>,
    pub answer: Option<String>,
    pub boxes: Vec<BBox>,
    pub choice: Option<OptionLetter>,
    pub format_ok: bool,
    /// Quadruples that looked like boxes but failed validation.
    pub skipped_boxes: usize,
}

impl ParsedResponse {
    /// The text a choice should be read from: the answer block when present,
    /// otherwise the whole response.
    pub fn answer_text(&self) -> &str {
        self.answer.as_deref().unwrap_or(&self.raw)
    }

    /// Re-reads the choice restricted to the letters a question actually offers.
    pub fn choice_among(&self, allowed: &BTreeSet<OptionLetter>) -> Option<OptionLetter> {
        extract_choice(self.answer_text(), allowed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxExtraction {
    pub boxes: Vec<BBox>,
    pub skipped_invalid: usize,
}

/// Every bracketed or parenthesized four-number group, with its byte span.
pub fn find_quadruples(text: &str) -> Vec<(Range<usize>, [f64; 4])> {
    QUAD_RE
        .captures_iter(text)
        .filter_map(|caps| {
            let nums: Vec<f64> = caps
                .iter()
                .skip(1)
                .flatten()
                .filter_map(|m| m.as_str().parse().ok())
                .collect();
            let quad: [f64; 4] = nums.try_into().ok()?;
            Some((caps.get(0)?.range(), quad))
        })
        .collect()
}

pub fn extract_boxes(text: &str) -> BoxExtraction {
    let mut out = BoxExtraction::default();
    for (_, quad) in find_quadruples(text) {
        match BBox::try_from(quad) {
            Ok(b) => out.boxes.push(b),
            Err(_) => out.skipped_invalid += 1,
        }
    }
    out
}

pub fn extract_choice(answer_text: &str, allowed: &BTreeSet<OptionLetter>) -> Option<OptionLetter> {
    let allowed_letter = |s: &str| s.parse::<OptionLetter>().ok().filter(|l| allowed.contains(l));

    if let Some(l) = allowed_letter(answer_text) {
        return Some(l);
    }

    let delimited: BTreeSet<OptionLetter> = DELIMITED_CHOICE_RES
        .iter()
        .flat_map(|re| re.captures_iter(answer_text))
        .filter_map(|c| allowed_letter(c.get(1)?.as_str()))
        .collect();
    if !delimited.is_empty() {
        return single(delimited);
    }

    let standalone: BTreeSet<OptionLetter> = STANDALONE_CHOICE_RE
        .captures_iter(answer_text)
        .filter_map(|c| allowed_letter(c.get(1)?.as_str()))
        .collect();
    single(standalone)
}

fn single(set: BTreeSet<OptionLetter>) -> Option<OptionLetter> {
    if set.len() == 1 {
        set.into_iter().next()
    } else {
        None
    }
}

fn block<'a>(raw: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = raw.find(open)? + open.len();
    let rest = &raw[start..];
    Some(match rest.find(close) {
        Some(end) => &rest[..end],
        None => rest,
    })
}

fn is_well_formed(raw: &str) -> bool {
    TAGS.iter().all(|t| raw.matches(t).count() == 1) && FORMAT_RE.is_match(raw)
}

pub fn parse_response(raw: &str) -> ParsedResponse {
    let format_ok = is_well_formed(raw);
    let think = block(raw, "<think>", "</think>").map(str::to_owned);
    let answer = block(raw, "<answer>", "</answer>").map(|s| s.trim().to_owned());

    let box_source = match (&think, format_ok) {
        (Some(t), true) => t.as_str(),
        _ => raw,
    };
    let BoxExtraction { boxes, skipped_invalid } = extract_boxes(box_source);

    let all: BTreeSet<OptionLetter> = OptionLetter::ALL.into_iter().collect();
    let choice = extract_choice(answer.as_deref().unwrap_or(raw), &all);

    ParsedResponse {
        raw: raw.to_owned(),
        think,
        answer,
        boxes,
        choice,
        format_ok,
        skipped_boxes: skipped_invalid,
    }
}

/// Piece of reasoning text in a synthesized response.
#[derive(Debug, Clone, PartialEq)]
pub enum ThinkPart {
    Text(String),
    Box(BBox),
}

pub fn render_box(b: &BBox) -> String {
    format!("[{}, {}, {}, {}]", b.x1(), b.y1(), b.x2(), b.y2())
}

/// Canonical serializer: think parts with boxes as `[x1, y1, x2, y2]`, then
/// the answer block.
pub fn render_response(think: &[ThinkPart], answer: &str) -> String {
    let mut out = String::from("<think>");
    for part in think {
        match part {
            ThinkPart::Text(t) => out.push_str(t),
            ThinkPart::Box(b) => out.push_str(&render_box(b)),
        }
    }
    out.push_str("</think><answer>");
    out.push_str(answer);
    out.push_str("</answer>");
    out
}

/// One line of a parser conformance corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCase {
    pub raw: String,
    pub expected_boxes: Vec<[f64; 4]>,
    pub expected_choice: Option<OptionLetter>,
    pub expected_format_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub passed: usize,
    /// `(line number, mismatch description)`.
    pub failures: Vec<(usize, String)>,
}

impl ConformanceReport {
    pub fn total(&self) -> usize {
        self.passed + self.failures.len()
    }

    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn check_case(case: &ConformanceCase) -> Result<(), String> {
    let p = parse_response(&case.raw);
    let boxes: Vec<[f64; 4]> = p.boxes.iter().map(BBox::to_array).collect();
    let mut problems = Vec::new();
    if boxes != case.expected_boxes {
        problems.push(format!("boxes {boxes:?} != {:?}", case.expected_boxes));
    }
    if p.choice != case.expected_choice {
        problems.push(format!("choice {:?} != {:?}", p.choice, case.expected_choice));
    }
    if p.format_ok != case.expected_format_ok {
        problems.push(format!("format_ok {} != {}", p.format_ok, case.expected_format_ok));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Runs every case of a line-delimited corpus. Unparseable lines count as
/// failures.
pub fn run_conformance(reader: impl std::io::BufRead) -> std::io::Result<ConformanceReport> {
    let mut report = ConformanceReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<ConformanceCase>(&line)
            .map_err(|e| format!("bad fixture: {e}"))
            .and_then(|c| check_case(&c));
        match outcome {
            Ok(()) => report.passed += 1,
            Err(msg) => report.failures.push((i + 1, msg)),
        }
    }
    Ok(report)
}
