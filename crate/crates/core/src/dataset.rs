//! Loading, verification and summary statistics for grounded VQA datasets.
//!
//! Records are JSONL with the fields
//! `image_ref, question, caption, boxes, answer, source, category, subtask`.
//! A box is either `[x1,y1,x2,y2]` or four `[x,y]` points, which are reduced
//! to their enclosing rectangle.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::box_geometry::{union_iou, BoxSet, Rect};
use crate::error::{Error, Result};
use crate::reward_engine::GoldTarget;
use crate::scalar::Scalar;
use crate::text_metrics::tokenize;

/// Minimum union IoU against a reference annotation.
pub const MIN_REFERENCE_IOU: f64 = 0.8;

/// Default inclusive caption length bounds, in words.
pub const CAPTION_WORD_BOUNDS: (usize, usize) = (10, 20);

/// Top-level task category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Perception,
    Reasoning,
    Multilingual,
}

impl Category {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "perception" => Some(Category::Perception),
            "reasoning" => Some(Category::Reasoning),
            "multilingual" => Some(Category::Multilingual),
            _ => None,
        }
    }

    /// Known subtasks of the category.
    pub fn subtasks(self) -> &'static [&'static str] {
        match self {
            Category::Perception => &[
                "Document Text Recognition",
                "Scene Text Recognition",
                "Object Recognition and Detection",
            ],
            Category::Reasoning => &[
                "Scene Text-based VQA",
                "Text Description Generation",
                "Document Understanding",
                "Infographic Understanding",
                "General VQA",
                "Spatial and Relational Reasoning",
            ],
            Category::Multilingual => &["Chinese Text Detection", "Multilingual Text Detection"],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One annotated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct VerifySample<T> {
    pub image_ref: String,
    pub question: String,
    pub caption: String,
    pub boxes: BoxSet<T>,
    pub answer: String,
    pub source: String,
    pub category: String,
    pub subtask: String,
}

impl<T: Scalar> VerifySample<T> {
    pub fn gold(&self) -> GoldTarget<T> {
        GoldTarget {
            caption: self.caption.clone(),
            boxes: self.boxes.clone(),
            answer: self.answer.clone(),
        }
    }

    pub fn caption_words(&self) -> usize {
        tokenize(&self.caption).word_count()
    }

    /// Taxonomy warnings (unknown category or subtask). Not errors: the
    /// taxonomy may grow.
    pub fn taxonomy_warnings(&self) -> Vec<String> {
        match Category::parse(&self.category) {
            None => vec![format!("unknown category '{}'", self.category)],
            Some(c) => {
                if c.subtasks().iter().any(|s| s.eq_ignore_ascii_case(self.subtask.trim())) {
                    Vec::new()
                } else {
                    vec![format!("unknown subtask '{}' for category {c}", self.subtask)]
                }
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawBox {
    Corners([f64; 4]),
    Points([[f64; 2]; 4]),
}

#[derive(Deserialize)]
struct RawSample {
    image_ref: String,
    question: String,
    caption: String,
    boxes: Vec<RawBox>,
    answer: String,
    source: String,
    category: String,
    subtask: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// A problem found on one input line. Error-level lines yield no sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "line {}: {sev}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport<T> {
    pub samples: Vec<VerifySample<T>>,
    /// Source line (1-based) of each sample.
    pub sample_lines: Vec<usize>,
    pub diagnostics: Vec<Diagnostic>,
}

impl<T> LoadReport<T> {
    pub fn errors(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error).count()
    }
}

fn parse_line<T: Scalar>(line: &str) -> std::result::Result<VerifySample<T>, String> {
    let raw: RawSample = serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
    let mut rects = Vec::with_capacity(raw.boxes.len());
    for (k, b) in raw.boxes.iter().enumerate() {
        let r = match b {
            RawBox::Corners(c) => Rect::normalize(c.map(T::lit)),
            RawBox::Points(p) => Rect::enclosing(p.map(|xy| xy.map(T::lit))),
        };
        rects.push(r.map_err(|e| format!("box {k}: {e}"))?);
    }
    let sample = VerifySample {
        image_ref: raw.image_ref,
        question: raw.question,
        caption: raw.caption,
        boxes: BoxSet::new(rects),
        answer: raw.answer,
        source: raw.source,
        category: raw.category,
        subtask: raw.subtask,
    };
    if sample.caption.trim().is_empty() {
        return Err("empty caption".into());
    }
    if sample.boxes.is_empty() {
        return Err("no boxes".into());
    }
    if sample.answer.trim().is_empty() {
        return Err("empty answer".into());
    }
    Ok(sample)
}

/// Parses JSONL records from a reader. Blank lines are skipped; malformed
/// lines are reported, never silently dropped.
pub fn load_from_reader<T: Scalar, R: BufRead>(reader: R) -> Result<LoadReport<T>> {
    let mut report = LoadReport {
        samples: Vec::new(),
        sample_lines: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut non_blank = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        non_blank += 1;
        match parse_line::<T>(&line) {
            Ok(s) => {
                for w in s.taxonomy_warnings() {
                    report.diagnostics.push(Diagnostic {
                        line: lineno,
                        severity: Severity::Warning,
                        message: w,
                    });
                }
                report.samples.push(s);
                report.sample_lines.push(lineno);
            }
            Err(message) => report.diagnostics.push(Diagnostic {
                line: lineno,
                severity: Severity::Error,
                message,
            }),
        }
    }
    if non_blank == 0 {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    Ok(report)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<LoadReport<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    load_from_reader(BufReader::new(file))
}

/// Writes samples as JSONL.
pub fn save<T: Scalar + Serialize, W: Write>(samples: &[VerifySample<T>], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reason a sample failed verification.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum VerifyFailure {
    Bbox { iou: f64 },
    CaptionLength { words: usize, lo: usize, hi: usize },
    EmptyAnswer,
}

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyFailure::Bbox { iou } => write!(f, "bbox: IoU {iou:.4} below {MIN_REFERENCE_IOU}"),
            VerifyFailure::CaptionLength { words, lo, hi } => {
                write!(f, "caption length: {words} words outside [{lo}, {hi}]")
            }
            VerifyFailure::EmptyAnswer => write!(f, "answer: empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub failures: Vec<VerifyFailure>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Quality checks: box agreement with a reference annotation, caption
/// length, non-empty answer.
pub fn verify<T: Scalar>(
    sample: &VerifySample<T>,
    reference_boxes: Option<&BoxSet<T>>,
    caption_word_bounds: (usize, usize),
) -> VerifyOutcome {
    let mut failures = Vec::new();
    if let Some(reference) = reference_boxes {
        let iou = union_iou(&sample.boxes, reference);
        if iou < T::lit(MIN_REFERENCE_IOU) {
            failures.push(VerifyFailure::Bbox { iou: iou.to_f64_lossy() });
        }
    }
    let words = sample.caption_words();
    let (lo, hi) = caption_word_bounds;
    if words < lo || words > hi {
        failures.push(VerifyFailure::CaptionLength { words, lo, hi });
    }
    if sample.answer.trim().is_empty() {
        failures.push(VerifyFailure::EmptyAnswer);
    }
    VerifyOutcome { failures }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceStats {
    pub samples: usize,
    pub avg_boxes: f64,
    pub avg_caption_words: f64,
}

/// Size and annotation density of a sample collection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub avg_boxes: f64,
    pub avg_caption_words: f64,
    pub per_source: BTreeMap<String, SourceStats>,
}

/// Exact means over the given samples, overall and per source.
pub fn stats<T: Scalar>(samples: &[VerifySample<T>]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to summarize".into()));
    }
    let mut sums: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let (mut boxes, mut words) = (0usize, 0usize);
    for s in samples {
        let (b, w) = (s.boxes.len(), s.caption_words());
        boxes += b;
        words += w;
        let e = sums.entry(s.source.clone()).or_default();
        e.0 += 1;
        e.1 += b;
        e.2 += w;
    }
    let n = samples.len() as f64;
    Ok(DatasetStats {
        samples: samples.len(),
        avg_boxes: boxes as f64 / n,
        avg_caption_words: words as f64 / n,
        per_source: sums
            .into_iter()
            .map(|(k, (c, b, w))| {
                (
                    k,
                    SourceStats {
                        samples: c,
                        avg_boxes: b as f64 / c as f64,
                        avg_caption_words: w as f64 / c as f64,
                    },
                )
            })
            .collect(),
    })
}
