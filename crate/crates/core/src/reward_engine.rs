//! Parsing of structured generations and the composite verifiable reward.
//!
//! A generation is expected to contain three tagged regions:
//!
//! ```text
//! <caption>...</caption><bbox>[[x1,y1,x2,y2], ...]</bbox><answer>...</answer>
//! ```
//!
//! in the order dictated by an [`OutputMode`]. Parsing never fails; missing or
//! malformed regions are recorded as absent and score zero on their channel.
//! The format reward is an independent channel and does not gate the others.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::box_geometry::{union_iou, BoxSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text_metrics::caption_reward;

/// One of the three tagged regions of a generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Caption,
    Bbox,
    Answer,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Caption, Field::Bbox, Field::Answer];

    pub fn tag(self) -> &'static str {
        match self {
            Field::Caption => "caption",
            Field::Bbox => "bbox",
            Field::Answer => "answer",
        }
    }

    fn open(self) -> String {
        format!("<{}>", self.tag())
    }

    fn close(self) -> String {
        format!("</{}>", self.tag())
    }
}

/// Expected order of the tagged regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutputMode {
    /// Caption, then boxes, then answer.
    #[default]
    #[serde(alias = "caption-first", alias = "caption_box_answer")]
    CaptionBoxAnswer,
    /// Boxes, then answer, then caption; permits stopping after the answer.
    #[serde(alias = "bbox-first", alias = "box_answer_caption")]
    BoxAnswerCaption,
}

impl OutputMode {
    pub fn canonical_order(self) -> [Field; 3] {
        match self {
            OutputMode::CaptionBoxAnswer => [Field::Caption, Field::Bbox, Field::Answer],
            OutputMode::BoxAnswerCaption => [Field::Bbox, Field::Answer, Field::Caption],
        }
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputMode::CaptionBoxAnswer => write!(f, "caption-first"),
            OutputMode::BoxAnswerCaption => write!(f, "bbox-first"),
        }
    }
}

impl FromStr for OutputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "caption-first" | "caption-box-answer" | "captionboxanswer" => Ok(OutputMode::CaptionBoxAnswer),
            "bbox-first" | "box-answer-caption" | "boxanswercaption" | "reverse" => {
                Ok(OutputMode::BoxAnswerCaption)
            }
            other => Err(Error::InvalidConfig(format!("unknown output mode '{other}'"))),
        }
    }
}

/// The parsed caption / box-set / answer triple of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutput<T> {
    pub caption: Option<String>,
    pub boxes: Option<BoxSet<T>>,
    pub answer: Option<String>,
    /// Present fields in the order their opening tags appear.
    pub ordering: Vec<Field>,
    /// Number of parsed box quadruples dropped as degenerate.
    pub dropped_boxes: usize,
    /// True when every tag (open and close) occurs exactly once.
    pub tags_unique: bool,
    pub raw: String,
}

impl<T: Scalar> StructuredOutput<T> {
    pub fn is_present(&self, f: Field) -> bool {
        match f {
            Field::Caption => self.caption.is_some(),
            Field::Bbox => self.boxes.is_some(),
            Field::Answer => self.answer.is_some(),
        }
    }

    /// Canonical rendering of the present fields in observed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for &f in &self.ordering {
            let body = match f {
                Field::Caption => self.caption.clone(),
                Field::Bbox => self.boxes.as_ref().map(BoxSet::render),
                Field::Answer => self.answer.clone(),
            };
            if let Some(body) = body {
                out.push_str(&f.open());
                out.push_str(&body);
                out.push_str(&f.close());
            }
        }
        out
    }
}

/// Body and opening offset of the first well-formed region for `field`.
fn first_region(raw: &str, field: Field) -> Option<(usize, &str)> {
    let open = field.open();
    let close = field.close();
    let start = raw.find(&open)?;
    let body_start = start + open.len();
    let end = raw[body_start..].find(&close)?;
    Some((start, &raw[body_start..body_start + end]))
}

/// Parses the `[[x1,y1,x2,y2], ...]` grammar. Returns `None` when the body is
/// not a list of numeric quadruples.
pub fn parse_box_list<T: Scalar>(body: &str) -> Option<(BoxSet<T>, usize)> {
    let quads: Vec<[f64; 4]> = serde_json::from_str(body.trim()).ok()?;
    let raw = quads.into_iter().map(|q| q.map(T::lit));
    Some(BoxSet::from_raw_lossy(raw))
}

/// Extracts the first occurrence of each tagged region. Never fails.
pub fn parse_structured<T: Scalar>(raw: &str, _mode: OutputMode) -> StructuredOutput<T> {
    let caption = first_region(raw, Field::Caption);
    let bbox = first_region(raw, Field::Bbox);
    let answer = first_region(raw, Field::Answer);

    let (boxes, dropped_boxes) = match bbox.and_then(|(_, body)| parse_box_list::<T>(body)) {
        Some((b, d)) => (Some(b), d),
        None => (None, 0),
    };

    let mut present: Vec<(usize, Field)> = Vec::with_capacity(3);
    if let Some((pos, _)) = caption {
        present.push((pos, Field::Caption));
    }
    if boxes.is_some() {
        present.push((bbox.map(|b| b.0).unwrap_or_default(), Field::Bbox));
    }
    if let Some((pos, _)) = answer {
        present.push((pos, Field::Answer));
    }
    present.sort_by_key(|p| p.0);

    let tags_unique = Field::ALL
        .iter()
        .all(|f| raw.matches(&f.open()).count() == 1 && raw.matches(&f.close()).count() == 1);

    StructuredOutput {
        caption: caption.map(|(_, b)| b.trim().to_owned()),
        boxes,
        answer: answer.map(|(_, b)| b.trim().to_owned()),
        ordering: present.into_iter().map(|p| p.1).collect(),
        dropped_boxes,
        tags_unique,
        raw: raw.to_owned(),
    }
}

/// 1 iff all fields are present, each tag occurs once, and the observed order
/// matches the mode's canonical order.
pub fn format_reward<T: Scalar>(out: &StructuredOutput<T>, mode: OutputMode) -> T {
    let ok = out.tags_unique && out.ordering.as_slice() == mode.canonical_order();
    if ok {
        T::one()
    } else {
        T::zero()
    }
}

fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-insensitive, trimmed exact match.
pub fn accuracy_reward<T: Scalar>(predicted: Option<&str>, gold: &str) -> T {
    match predicted {
        Some(p) if normalize_answer(p) == normalize_answer(gold) => T::one(),
        _ => T::zero(),
    }
}

/// Gold annotations needed to score one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GoldTarget<T> {
    pub caption: String,
    pub boxes: BoxSet<T>,
    pub answer: String,
}

/// Number of reward channels.
pub const NUM_COMPONENTS: usize = 4;

/// Channel names in weight order.
pub const COMPONENT_NAMES: [&str; NUM_COMPONENTS] = ["caption", "bbox", "accuracy", "format"];

/// Simplex weights over (caption, bbox, accuracy, format).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RewardWeights<T>([T; NUM_COMPONENTS]);

impl<T: Scalar> RewardWeights<T> {
    /// Validates nonnegativity and unit sum.
    pub fn new(w: [T; NUM_COMPONENTS]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidWeights(format!("weights must be finite and nonnegative, got {w:?}")));
        }
        let sum: T = w.iter().copied().sum();
        if (sum - T::one()).abs() > T::simplex_tolerance() {
            return Err(Error::InvalidWeights(format!("weights must sum to 1, got sum {sum}")));
        }
        Ok(RewardWeights(w))
    }

    pub fn from_slice(w: &[T]) -> Result<Self> {
        let arr: [T; NUM_COMPONENTS] = w.try_into().map_err(|_| {
            Error::InvalidWeights(format!("expected {NUM_COMPONENTS} weights, got {}", w.len()))
        })?;
        Self::new(arr)
    }

    /// All weights `1/4`.
    pub fn equal() -> Self {
        RewardWeights([T::lit(0.25); NUM_COMPONENTS])
    }

    /// Answer correctness only.
    pub fn accuracy_only() -> Self {
        RewardWeights([T::zero(), T::zero(), T::one(), T::zero()])
    }

    /// Box, accuracy and format channels without the caption.
    pub fn bbox_only() -> Self {
        RewardWeights([T::zero(), T::lit(0.5), T::lit(0.25), T::lit(0.25)])
    }

    /// Looks up a named preset: `equal`, `accuracy-only`, `bbox-only`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "equal" | "composite" => Some(Self::equal()),
            "accuracy-only" | "acc-only" => Some(Self::accuracy_only()),
            "bbox-only" => Some(Self::bbox_only()),
            _ => None,
        }
    }

    pub fn as_array(&self) -> [T; NUM_COMPONENTS] {
        self.0
    }
}

impl<T: Scalar> Default for RewardWeights<T> {
    fn default() -> Self {
        Self::equal()
    }
}

impl<T: Scalar> TryFrom<[T; 4]> for RewardWeights<T> {
    type Error = Error;
    fn try_from(w: [T; 4]) -> Result<Self> {
        Self::new(w)
    }
}

impl<T: Scalar> From<RewardWeights<T>> for [T; 4] {
    fn from(w: RewardWeights<T>) -> Self {
        w.0
    }
}

impl<T: Scalar> FromStr for RewardWeights<T> {
    type Err = Error;
    /// Accepts a preset name or four comma-separated reals.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = Self::preset(s.trim()) {
            return Ok(p);
        }
        let parts = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::InvalidWeights(format!("'{p}': {e}")))
            })
            .collect::<Result<Vec<T>>>()?;
        Self::from_slice(&parts)
    }
}

/// Per-channel rewards and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RewardBreakdown<T> {
    pub r_caption: T,
    pub r_bbox: T,
    pub r_acc: T,
    pub r_format: T,
    pub weights: RewardWeights<T>,
    pub total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    /// Combines raw component values with weights.
    pub fn from_components(components: [T; NUM_COMPONENTS], weights: RewardWeights<T>) -> Self {
        let total = components
            .iter()
            .zip(weights.0.iter())
            .map(|(&r, &w)| r * w)
            .sum();
        let [r_caption, r_bbox, r_acc, r_format] = components;
        RewardBreakdown {
            r_caption,
            r_bbox,
            r_acc,
            r_format,
            weights,
            total,
        }
    }

    pub fn components(&self) -> [T; NUM_COMPONENTS] {
        [self.r_caption, self.r_bbox, self.r_acc, self.r_format]
    }
}

/// Scores every channel and combines them with `weights`.
pub fn compose_reward<T: Scalar>(
    out: &StructuredOutput<T>,
    gold: &GoldTarget<T>,
    weights: RewardWeights<T>,
    mode: OutputMode,
) -> RewardBreakdown<T> {
    let r_caption = out
        .caption
        .as_deref()
        .map(|c| caption_reward(c, &gold.caption))
        .unwrap_or_else(T::zero);
    let r_bbox = out
        .boxes
        .as_ref()
        .map(|b| union_iou(b, &gold.boxes))
        .unwrap_or_else(T::zero);
    let r_acc = accuracy_reward(out.answer.as_deref(), &gold.answer);
    let r_format = format_reward(out, mode);
    RewardBreakdown::from_components([r_caption, r_bbox, r_acc, r_format], weights)
}

/// Parses and scores a raw generation in one call.
pub fn score_raw<T: Scalar>(
    raw: &str,
    gold: &GoldTarget<T>,
    weights: RewardWeights<T>,
    mode: OutputMode,
) -> RewardBreakdown<T> {
    compose_reward(&parse_structured(raw, mode), gold, weights, mode)
}
