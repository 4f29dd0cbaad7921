//! Axis-aligned rectangle algebra and the union-IoU box reward.
//!
//! Areas of rectangle unions are computed exactly with a coordinate-compressed
//! sweep over x: between consecutive distinct x edges the covered y-extent is
//! constant, so each strip contributes `width * merged_interval_length`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Stability term added to the union area in [`union_iou`].
pub const IOU_EPS: f64 = 1e-6;

/// Axis-aligned rectangle with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[T; 4]", try_from = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Rect<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Why a raw coordinate quadruple could not become a [`Rect`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectRejection {
    NonFinite,
    ZeroWidth,
    ZeroHeight,
}

impl fmt::Display for RectRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RectRejection::NonFinite => write!(f, "non-finite coordinate"),
            RectRejection::ZeroWidth => write!(f, "zero-width box"),
            RectRejection::ZeroHeight => write!(f, "zero-height box"),
        }
    }
}

impl std::error::Error for RectRejection {}

impl<T: Scalar> Rect<T> {
    /// Reorders swapped corners; rejects zero-area or non-finite input.
    pub fn normalize(raw: [T; 4]) -> Result<Self, RectRejection> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(RectRejection::NonFinite);
        }
        let [a, b, c, d] = raw;
        if a == c {
            return Err(RectRejection::ZeroWidth);
        }
        if b == d {
            return Err(RectRejection::ZeroHeight);
        }
        Ok(Rect {
            x1: a.min(c),
            y1: b.min(d),
            x2: a.max(c),
            y2: b.max(d),
        })
    }

    /// Enclosing rectangle of a four-point (quadrilateral) annotation.
    pub fn enclosing(points: [[T; 2]; 4]) -> Result<Self, RectRejection> {
        let mut x1 = T::infinity();
        let mut y1 = T::infinity();
        let mut x2 = T::neg_infinity();
        let mut y2 = T::neg_infinity();
        for [x, y] in points {
            if !x.is_finite() || !y.is_finite() {
                return Err(RectRejection::NonFinite);
            }
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
        Self::normalize([x1, y1, x2, y2])
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Rect {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Rect {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    /// Area of the intersection with another rectangle.
    pub fn overlap_area(&self, other: &Rect<T>) -> T {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(T::zero());
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(T::zero());
        w * h
    }
}

impl<T: Scalar> From<Rect<T>> for [T; 4] {
    fn from(r: Rect<T>) -> Self {
        r.to_array()
    }
}

impl<T: Scalar> TryFrom<[T; 4]> for Rect<T> {
    type Error = RectRejection;
    fn try_from(raw: [T; 4]) -> Result<Self, Self::Error> {
        Rect::normalize(raw)
    }
}

/// Free-function form of [`Rect::normalize`].
pub fn normalize_rect<T: Scalar>(raw: [T; 4]) -> Result<Rect<T>, RectRejection> {
    Rect::normalize(raw)
}

/// A possibly empty collection of valid rectangles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct BoxSet<T> {
    rects: Vec<Rect<T>>,
}

impl<T: Scalar> BoxSet<T> {
    pub fn new(rects: Vec<Rect<T>>) -> Self {
        BoxSet { rects }
    }

    pub fn empty() -> Self {
        BoxSet { rects: Vec::new() }
    }

    /// Normalizes every quadruple, dropping rejected ones. Returns the set and
    /// the number of dropped entries.
    pub fn from_raw_lossy<I: IntoIterator<Item = [T; 4]>>(raw: I) -> (Self, usize) {
        let mut dropped = 0;
        let rects = raw
            .into_iter()
            .filter_map(|r| match Rect::normalize(r) {
                Ok(r) => Some(r),
                Err(_) => {
                    dropped += 1;
                    None
                }
            })
            .collect();
        (BoxSet { rects }, dropped)
    }

    /// Strict variant: any rejected quadruple fails the whole set.
    pub fn from_raw<I: IntoIterator<Item = [T; 4]>>(raw: I) -> Result<Self, RectRejection> {
        raw.into_iter()
            .map(Rect::normalize)
            .collect::<Result<Vec<_>, _>>()
            .map(BoxSet::new)
    }

    pub fn rects(&self) -> &[Rect<T>] {
        &self.rects
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn push(&mut self, r: Rect<T>) {
        self.rects.push(r);
    }

    pub fn map(&self, f: impl Fn(&Rect<T>) -> Rect<T>) -> Self {
        BoxSet {
            rects: self.rects.iter().map(f).collect(),
        }
    }

    /// Renders in the `[[x1,y1,x2,y2], ...]` grammar.
    pub fn render(&self) -> String {
        let inner: Vec<String> = self
            .rects
            .iter()
            .map(|r| format!("[{},{},{},{}]", r.x1, r.y1, r.x2, r.y2))
            .collect();
        format!("[{}]", inner.join(", "))
    }
}

impl<T: Scalar> FromIterator<Rect<T>> for BoxSet<T> {
    fn from_iter<I: IntoIterator<Item = Rect<T>>>(iter: I) -> Self {
        BoxSet::new(iter.into_iter().collect())
    }
}

fn sorted_edges<T: Scalar>(rects: impl Iterator<Item = (T, T)>) -> Vec<T> {
    let mut xs: Vec<T> = rects.flat_map(|(a, b)| [a, b]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    xs.dedup();
    xs
}

/// Merges `[lo, hi)` intervals in place; output is sorted and disjoint.
fn merge_intervals<T: Scalar>(iv: &mut Vec<(T, T)>) {
    iv.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite coordinates"));
    let mut out: Vec<(T, T)> = Vec::with_capacity(iv.len());
    for &(lo, hi) in iv.iter() {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    *iv = out;
}

fn covered_length<T: Scalar>(iv: &[(T, T)]) -> T {
    iv.iter().map(|&(lo, hi)| hi - lo).sum()
}

/// Length of the intersection of two sorted, disjoint interval lists.
fn intersect_length<T: Scalar>(a: &[(T, T)], b: &[(T, T)]) -> T {
    let (mut i, mut j) = (0, 0);
    let mut total = T::zero();
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn strip_intervals<T: Scalar>(set: &BoxSet<T>, xl: T, xr: T, out: &mut Vec<(T, T)>) {
    out.clear();
    out.extend(
        set.rects
            .iter()
            .filter(|r| r.x1 <= xl && r.x2 >= xr)
            .map(|r| (r.y1, r.y2)),
    );
    merge_intervals(out);
}

/// Exact area of the union of all rectangles in the set.
pub fn union_area<T: Scalar>(set: &BoxSet<T>) -> T {
    let xs = sorted_edges(set.rects.iter().map(|r| (r.x1, r.x2)));
    let mut iv = Vec::new();
    let mut area = T::zero();
    for w in xs.windows(2) {
        strip_intervals(set, w[0], w[1], &mut iv);
        area += (w[1] - w[0]) * covered_length(&iv);
    }
    area
}

/// Areas of `union(a) ∩ union(b)` and `union(a) ∪ union(b)`.
pub fn overlap_areas<T: Scalar>(a: &BoxSet<T>, b: &BoxSet<T>) -> (T, T) {
    let xs = sorted_edges(a.rects.iter().chain(b.rects.iter()).map(|r| (r.x1, r.x2)));
    let (mut ia, mut ib) = (Vec::new(), Vec::new());
    let (mut inter, mut union) = (T::zero(), T::zero());
    for w in xs.windows(2) {
        let dx = w[1] - w[0];
        strip_intervals(a, w[0], w[1], &mut ia);
        strip_intervals(b, w[0], w[1], &mut ib);
        let la = covered_length(&ia);
        let lb = covered_length(&ib);
        let lab = intersect_length(&ia, &ib);
        inter += dx * lab;
        union += dx * (la + lb - lab);
    }
    (inter, union)
}

/// `A∩ / (A∪ + 1e-6)` between the unions of the two sets.
///
/// An empty prediction scores zero; two empty sets also score zero through
/// the formula itself (`0 / ε`).
pub fn union_iou<T: Scalar>(pred: &BoxSet<T>, gold: &BoxSet<T>) -> T {
    if pred.is_empty() {
        return T::zero();
    }
    let (inter, union) = overlap_areas(pred, gold);
    inter / (union + T::lit(IOU_EPS))
}
