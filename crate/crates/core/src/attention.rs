//! Spatial aggregation of answer-token attention and Region Attention Density.
//!
//! Raw attention is a `(layer, head, answer_token, position)` tensor. The
//! visual positions `[vs_pos, ve_pos)` are cropped, reshaped to an `h × w`
//! patch grid, averaged over every `(layer, head, answer_token)` slice and
//! normalized to unit mass. RAD is the share of that mass falling on patches
//! that overlap ground-truth boxes.

use std::io::{Read, Write};

use crate::box_geometry::{BoxSet, Rect};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape metadata of an attention tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub layers: usize,
    pub heads: usize,
    pub answer_tokens: usize,
    pub seq_len: usize,
    pub vs_pos: usize,
    pub ve_pos: usize,
    pub h: usize,
    pub w: usize,
}

impl AttentionDims {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [self.layers, self.heads, self.answer_tokens, self.seq_len, self.h, self.w];
        if nonzero.contains(&0) {
            return Err(Error::DimensionMismatch(format!("zero-sized dimension in {self:?}")));
        }
        if self.vs_pos >= self.ve_pos || self.ve_pos > self.seq_len {
            return Err(Error::DimensionMismatch(format!(
                "visual span [{}, {}) outside sequence of length {}",
                self.vs_pos, self.ve_pos, self.seq_len
            )));
        }
        if self.ve_pos - self.vs_pos != self.h * self.w {
            return Err(Error::DimensionMismatch(format!(
                "visual span length {} != h*w = {}",
                self.ve_pos - self.vs_pos,
                self.h * self.w
            )));
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.layers * self.heads * self.answer_tokens * self.seq_len
    }

    #[inline]
    pub fn index(&self, layer: usize, head: usize, token: usize, pos: usize) -> usize {
        ((layer * self.heads + head) * self.answer_tokens + token) * self.seq_len + pos
    }
}

/// Row-major attention values, layer-major then head, answer token, position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor<T> {
    dims: AttentionDims,
    values: Vec<T>,
}

impl<T: Scalar> AttentionTensor<T> {
    pub fn new(dims: AttentionDims, values: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.num_values() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values, got {}",
                dims.num_values(),
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::DimensionMismatch("attention values must be finite and nonnegative".into()));
        }
        Ok(AttentionTensor { dims, values })
    }

    pub fn dims(&self) -> &AttentionDims {
        &self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, layer: usize, head: usize, token: usize, pos: usize) -> T {
        self.values[self.dims.index(layer, head, token, pos)]
    }
}

/// `h × w` nonnegative attention mass summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid<T> {
    h: usize,
    w: usize,
    cells: Vec<T>,
}

impl<T: Scalar> AttentionGrid<T> {
    /// Normalizes arbitrary nonnegative cell values to unit mass.
    pub fn from_unnormalized(h: usize, w: usize, cells: Vec<T>) -> Result<Self> {
        if cells.len() != h * w || h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!("{} cells for a {h}x{w} grid", cells.len())));
        }
        if cells.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::DimensionMismatch("grid cells must be finite and nonnegative".into()));
        }
        let total: T = cells.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::Degenerate("attention grid has zero total mass".into()));
        }
        Ok(AttentionGrid {
            h,
            w,
            cells: cells.into_iter().map(|c| c / total).collect(),
        })
    }

    pub fn uniform(h: usize, w: usize) -> Result<Self> {
        Self::from_unnormalized(h, w, vec![T::one(); h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.cells[row * self.w + col]
    }

    /// Comma-separated rows.
    pub fn to_csv(&self) -> String {
        self.cells
            .chunks(self.w)
            .map(|row| row.iter().map(|c| format!("{c}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Coarse ASCII heatmap relative to the grid maximum.
    pub fn to_ascii(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let max = self.cells.iter().copied().fold(T::zero(), T::max);
        self.cells
            .chunks(self.w)
            .map(|row| {
                row.iter()
                    .map(|&c| {
                        let level = if max > T::zero() { (c / max).to_f64_lossy() } else { 0.0 };
                        RAMP[((level * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1)] as char
                    })
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Crop, reshape, average over all slices, normalize.
pub fn aggregate<T: Scalar>(tensor: &AttentionTensor<T>) -> Result<AttentionGrid<T>> {
    let d = tensor.dims;
    let slices = d.layers * d.heads * d.answer_tokens;
    let mut acc = vec![T::zero(); d.h * d.w];
    for s in 0..slices {
        let base = s * d.seq_len + d.vs_pos;
        for (a, &v) in acc.iter_mut().zip(&tensor.values[base..base + d.h * d.w]) {
            *a += v;
        }
    }
    let n = T::from_usize_lossy(slices);
    acc.iter_mut().for_each(|a| *a /= n);
    AttentionGrid::from_unnormalized(d.h, d.w, acc)
}

/// Boolean membership of grid cells in a ground-truth region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::DimensionMismatch(format!("{} mask cells for a {h}x{w} grid", cells.len())));
        }
        Ok(PatchMask { h, w, cells })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

/// Marks cell `(i, j)` iff its pixel rectangle has positive-area overlap
/// with any box.
pub fn boxes_to_mask<T: Scalar>(
    boxes: &BoxSet<T>,
    image_size: (T, T),
    grid: (usize, usize),
) -> Result<PatchMask> {
    let (img_w, img_h) = image_size;
    let (h, w) = grid;
    if !(img_w > T::zero() && img_h > T::zero()) {
        return Err(Error::DimensionMismatch("image size must be positive".into()));
    }
    let cw = img_w / T::from_usize_lossy(w);
    let ch = img_h / T::from_usize_lossy(h);
    let mut cells = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let cell = Rect {
                x1: T::from_usize_lossy(j) * cw,
                y1: T::from_usize_lossy(i) * ch,
                x2: T::from_usize_lossy(j + 1) * cw,
                y2: T::from_usize_lossy(i + 1) * ch,
            };
            cells[i * w + j] = boxes.rects().iter().any(|b| b.overlap_area(&cell) > T::zero());
        }
    }
    PatchMask::new(h, w, cells)
}

/// Share of attention mass on masked cells.
pub fn rad<T: Scalar>(grid: &AttentionGrid<T>, mask: &PatchMask) -> Result<T> {
    if grid.h != mask.h || grid.w != mask.w {
        return Err(Error::DimensionMismatch(format!(
            "grid is {}x{}, mask is {}x{}",
            grid.h, grid.w, mask.h, mask.w
        )));
    }
    let total: T = grid.cells.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::Degenerate("attention grid has zero total mass".into()));
    }
    let inside: T = grid
        .cells
        .iter()
        .zip(&mask.cells)
        .filter(|(_, &m)| m)
        .map(|(&c, _)| c)
        .sum();
    Ok(inside / total)
}

const HEADER_FIELDS: usize = 8;

/// Writes one dump record: eight little-endian `u32` header fields
/// (L, K, N_A, N, vs_pos, ve_pos, h, w) followed by `f32` values.
pub fn write_dump_record<T: Scalar, W: Write>(out: &mut W, tensor: &AttentionTensor<T>) -> Result<()> {
    let d = tensor.dims;
    for v in [d.layers, d.heads, d.answer_tokens, d.seq_len, d.vs_pos, d.ve_pos, d.h, d.w] {
        let v = u32::try_from(v).map_err(|_| Error::MalformedDump(format!("dimension {v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &tensor.values {
        out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads every record of a dump stream.
pub fn read_dump<T: Scalar, R: Read>(mut input: R) -> Result<Vec<AttentionTensor<T>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_dump(&bytes)
}

/// Parses concatenated dump records from a byte buffer.
pub fn parse_dump<T: Scalar>(bytes: &[u8]) -> Result<Vec<AttentionTensor<T>>> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let record = out.len();
        let header_len = HEADER_FIELDS * 4;
        if bytes.len() - off < header_len {
            return Err(Error::MalformedDump(format!("record {record}: truncated header")));
        }
        let mut h = [0usize; HEADER_FIELDS];
        for (k, slot) in h.iter_mut().enumerate() {
            let b = &bytes[off + 4 * k..off + 4 * k + 4];
            *slot = u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        }
        off += header_len;
        let dims = AttentionDims {
            layers: h[0],
            heads: h[1],
            answer_tokens: h[2],
            seq_len: h[3],
            vs_pos: h[4],
            ve_pos: h[5],
            h: h[6],
            w: h[7],
        };
        dims.validate()
            .map_err(|e| Error::MalformedDump(format!("record {record}: {e}")))?;
        let n = dims
            .layers
            .checked_mul(dims.heads)
            .and_then(|v| v.checked_mul(dims.answer_tokens))
            .and_then(|v| v.checked_mul(dims.seq_len))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::MalformedDump(format!("record {record}: size overflow")))?;
        if bytes.len() - off < n {
            return Err(Error::MalformedDump(format!(
                "record {record}: expected {n} payload bytes, {} remain",
                bytes.len() - off
            )));
        }
        let values = bytes[off..off + n]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        off += n;
        let tensor = AttentionTensor::new(dims, values)
            .map_err(|e| Error::MalformedDump(format!("record {record}: {e}")))?;
        out.push(tensor);
    }
    Ok(out)
}
