//! Fixed-grid mean pooling of image values inside a box.
//!
//! Each of the `S x S` cells averages the pixels whose centers fall inside it.
//! Cells too small to contain any pixel center fall back to bilinear sampling
//! at the cell center. The feature vector ends with a constant bias of 1.0.

use std::ops::Deref;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BBox};

pub const DEFAULT_GRID_SIZE: usize = 4;

/// Pooled features plus trailing bias; length `C * S * S + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn feature_len(channels: usize, grid_size: usize) -> usize {
    channels * grid_size * grid_size + 1
}

/// Summed-area tables over every channel of one image.
pub struct RoiPooler<'a> {
    img: &'a ImageTensor,
    grid_size: usize,
    // (H + 1) x (W + 1) per channel.
    tables: Vec<Vec<f64>>,
}

impl<'a> RoiPooler<'a> {
    pub fn new(img: &'a ImageTensor, grid_size: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        let (h, w) = (img.height(), img.width());
        let stride = w + 1;
        let tables = (0..img.channels())
            .map(|c| {
                let src = img.channel(c);
                let mut t = vec![0.0; (h + 1) * stride];
                for y in 0..h {
                    let mut row = 0.0;
                    for x in 0..w {
                        row += src[y * w + x];
                        t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + row;
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            img,
            grid_size,
            tables,
        })
    }

    pub fn feature_len(&self) -> usize {
        feature_len(self.img.channels(), self.grid_size)
    }

    fn rect_sum(&self, c: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let t = &self.tables[c];
        let s = self.img.width() + 1;
        t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
    }

    fn bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let (w, h) = (self.img.width(), self.img.height());
        let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let top = self.img.get(c, y0, x0) * (1.0 - fx) + self.img.get(c, y0, x1) * fx;
        let bottom = self.img.get(c, y1, x0) * (1.0 - fx) + self.img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn pool(&self, b: &BBox) -> Result<FeatureVector> {
        let clipped = clip_box(b, &self.img.bounds());
        if !clipped.has_positive_area() {
            return Err(Error::InvalidBox(format!(
                "{:?} has zero area inside the image",
                b.to_array()
            )));
        }
        let s = self.grid_size;
        let cw = clipped.width() / s as f64;
        let ch = clipped.height() / s as f64;
        let cols: Vec<(usize, usize)> = (0..s)
            .map(|k| {
                let lo = clipped.x1 + k as f64 * cw;
                let hi = if k + 1 == s { clipped.x2 } else { lo + cw };
                center_range(lo, hi, self.img.width())
            })
            .collect();
        let rows: Vec<(usize, usize)> = (0..s)
            .map(|k| {
                let lo = clipped.y1 + k as f64 * ch;
                let hi = if k + 1 == s { clipped.y2 } else { lo + ch };
                center_range(lo, hi, self.img.height())
            })
            .collect();

        let mut out = Vec::with_capacity(self.feature_len());
        for c in 0..self.img.channels() {
            for (gy, &(y0, y1)) in rows.iter().enumerate() {
                for (gx, &(x0, x1)) in cols.iter().enumerate() {
                    let n = (y1 - y0) * (x1 - x0);
                    let v = if n > 0 {
                        self.rect_sum(c, y0, y1, x0, x1) / n as f64
                    } else {
                        let cx = clipped.x1 + (gx as f64 + 0.5) * cw;
                        let cy = clipped.y1 + (gy as f64 + 0.5) * ch;
                        self.bilinear(c, cx, cy)
                    };
                    out.push(v);
                }
            }
        }
        out.push(1.0);
        Ok(FeatureVector(out))
    }
}

/// Half-open index range of pixels whose centers `i + 0.5` lie in `[lo, hi)`.
fn center_range(lo: f64, hi: f64, len: usize) -> (usize, usize) {
    let first = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(len);
    (first.min(end), end)
}

/// Pools a single box. Prefer [`RoiPooler`] when pooling many boxes per image.
pub fn roi_pool(img: &ImageTensor, b: &BBox, grid_size: usize) -> Result<FeatureVector> {
    RoiPooler::new(img, grid_size)?.pool(b)
}
