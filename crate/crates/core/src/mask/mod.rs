//! Binary-mask geometry: dense masks, column-major run-length coding,
//! polygon rasterization, IoU and non-maximum suppression.
//!
//! Run-length counts follow the COCO interchange convention: pixels are
//! enumerated column by column (top to bottom, then left to right) and the
//! first count is always a run of zeros, possibly empty.

mod nms;
mod polygon;

pub use nms::nms;
pub use polygon::rasterize_polygon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("run-length counts sum to {sum}, expected {expected}")]
    Length { sum: u64, expected: u64 },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    Dimension(u32, u32, u32, u32),
    #[error("IoU is undefined for two empty masks")]
    Empty,
    #[error("degenerate polygon: {0}")]
    Degenerate(&'static str),
    #[error("polygon vertex ({0}, {1}) lies outside the {2}x{3} canvas")]
    OutOfBounds(f64, f64, u32, u32),
    #[error("non-maximum suppression input mixes images {0} and {1}")]
    MixedImage(u64, u64),
}

/// Dense binary mask, stored row-major and addressed as (row, column).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        let expected = height as u64 * width as u64;
        if bits.len() as u64 != expected {
            return Err(MaskError::Length {
                sum: bits.len() as u64,
                expected,
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height as usize * width as usize);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Tight bounding box `(x, y, w, h)`; `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for row in 0..self.height {
            for col in 0..self.width {
                if self.get(row, col) {
                    bb = Some(match bb {
                        None => (col, row, col, row),
                        Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col), y1.max(row)),
                    });
                }
            }
        }
        bb.map(|(x0, y0, x1, y1)| BBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }
}

/// Axis-aligned pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn to_array(self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Run-length encoded mask in column-major order, starting with a zero run.
///
/// Serializes as the COCO object form `{"size": [h, w], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleObject", into = "RleObject")]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u64>,
}

impl RleMask {
    /// Builds an RLE from raw counts, validating the total length and
    /// normalising away interior empty runs.
    pub fn new(height: u32, width: u32, counts: Vec<u64>) -> Result<Self, MaskError> {
        let expected = height as u64 * width as u64;
        let sum: u64 = counts.iter().sum();
        if sum != expected {
            return Err(MaskError::Length { sum, expected });
        }
        Ok(Self {
            height,
            width,
            counts: normalize_counts(&counts),
        })
    }

    pub fn empty(height: u32, width: u32) -> Self {
        let total = height as u64 * width as u64;
        Self {
            height,
            width,
            counts: if total == 0 { Vec::new() } else { vec![total] },
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn same_shape(&self, other: &RleMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Half-open column-major index intervals of set pixels.
    pub fn runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c;
            (i % 2 == 1 && c > 0).then_some((start, start + c))
        })
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn bbox(&self) -> Option<BBox> {
        let h = self.height as u64;
        let mut bb: Option<(u64, u64, u64, u64)> = None;
        for (start, end) in self.runs() {
            let (c0, r0) = (start / h, start % h);
            let (c1, r1) = ((end - 1) / h, (end - 1) % h);
            let (rmin, rmax) = if c0 == c1 { (r0, r1) } else { (0, h - 1) };
            bb = Some(match bb {
                None => (c0, rmin, c1, rmax),
                Some((x0, y0, x1, y1)) => (x0.min(c0), y0.min(rmin), x1.max(c1), y1.max(rmax)),
            });
        }
        bb.map(|(x0, y0, x1, y1)| BBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0 + 1) as u32,
            h: (y1 - y0 + 1) as u32,
        })
    }

    /// Number of pixels set in both masks.
    pub fn intersection_area(&self, other: &RleMask) -> Result<u64, MaskError> {
        if !self.same_shape(other) {
            return Err(MaskError::Dimension(self.height, self.width, other.height, other.width));
        }
        let a: Vec<_> = self.runs().collect();
        let b: Vec<_> = other.runs().collect();
        let (mut i, mut j, mut total) = (0, 0, 0u64);
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
        Ok(total)
    }

    /// IoU of two run-length masks; errors like [`mask_iou`].
    pub fn iou(&self, other: &RleMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return Err(MaskError::Empty);
        }
        Ok(inter as f64 / union as f64)
    }

    /// IoU treating two empty masks as non-overlapping.
    pub(crate) fn iou_or_zero(&self, other: &RleMask) -> f64 {
        self.iou(other).unwrap_or(0.0)
    }
}

fn normalize_counts(counts: &[u64]) -> Vec<u64> {
    // Drop empty interior runs by merging their neighbours; the leading zero
    // run is kept even when empty.
    let mut out = vec![0u64];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if (out.len() - 1) % 2 == i % 2 {
            *out.last_mut().unwrap() += c;
        } else {
            out.push(c);
        }
    }
    if out == [0] {
        out.clear();
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleObject {
    size: [u32; 2],
    counts: Vec<u64>,
}

impl TryFrom<RleObject> for RleMask {
    type Error = MaskError;

    fn try_from(obj: RleObject) -> Result<Self, MaskError> {
        RleMask::new(obj.size[0], obj.size[1], obj.counts)
    }
}

impl From<RleMask> for RleObject {
    fn from(rle: RleMask) -> Self {
        RleObject {
            size: [rle.height, rle.width],
            counts: rle.counts,
        }
    }
}

/// Encodes a dense mask into minimal alternating column-major runs.
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for col in 0..w {
        for row in 0..h {
            let bit = mask.get(row, col);
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
    }
    if run > 0 || counts.is_empty() && h as u64 * w as u64 > 0 {
        counts.push(run);
    }
    RleMask {
        height: h,
        width: w,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    let (h, w) = (rle.height, rle.width);
    let expected = h as u64 * w as u64;
    let sum: u64 = rle.counts.iter().sum();
    if sum != expected {
        return Err(MaskError::Length { sum, expected });
    }
    let mut mask = BinaryMask::new(h, w);
    for (start, end) in rle.runs() {
        for idx in start..end {
            let col = (idx / h as u64) as u32;
            let row = (idx % h as u64) as u32;
            mask.set(row, col, true);
        }
    }
    Ok(mask)
}

/// Intersection over union of two dense masks of equal size.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if !a.same_shape(b) {
        return Err(MaskError::Dimension(a.height, a.width, b.height, b.width));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        return Err(MaskError::Empty);
    }
    Ok(inter as f64 / union as f64)
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        rle_encode(mask)
    }
}
