//! Axis-aligned boxes, IoU, and the center-size delta parameterization used by
//! every regression and refinement step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `tw / ww` and `th / wh` before exponentiation.
pub const SCALE_CLAMP: f64 = 4.135166556742356; // ln(1000 / 16)

/// Axis-aligned box in continuous image coordinates, corner form.
///
/// Width is `x2 - x1` exactly; there is no +1 pixel convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::NonFinite("box coordinates"));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidBox(format!(
                "({x1}, {y1}, {x2}, {y2}) has negative extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    /// Builds from center form without validation; callers guarantee `w, h >= 0`.
    fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Lexicographic order on coordinates; used as a content-based tie-break.
    pub fn total_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero-area boxes have IoU 0 with everything,
/// themselves included.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Dense IoU table; rows are proposals, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IoUMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Highest IoU in a row and its column; ties go to the lowest column.
    /// `None` when there are no columns.
    pub fn row_argmax(&self, row: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in self.row(row).iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((j, v)),
            }
        }
        best
    }
}

pub fn iou_matrix(proposals: &[BBox], gts: &[BBox]) -> IoUMatrix {
    let mut data = Vec::with_capacity(proposals.len() * gts.len());
    for p in proposals {
        data.extend(gts.iter().map(|g| iou(p, g)));
    }
    IoUMatrix {
        rows: proposals.len(),
        cols: gts.len(),
        data,
    }
}

/// Per-coordinate scaling applied to encoded deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaWeights {
    pub wx: f64,
    pub wy: f64,
    pub ww: f64,
    pub wh: f64,
}

impl DeltaWeights {
    pub const UNIT: DeltaWeights = DeltaWeights {
        wx: 1.0,
        wy: 1.0,
        ww: 1.0,
        wh: 1.0,
    };

    pub fn new(wx: f64, wy: f64, ww: f64, wh: f64) -> Self {
        Self { wx, wy, ww, wh }
    }
}

impl Default for DeltaWeights {
    fn default() -> Self {
        Self::new(10.0, 10.0, 5.0, 5.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDeltas {
    pub const ZERO: BoxDeltas = BoxDeltas {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_deltas(anchor: &BBox, target: &BBox, weights: &DeltaWeights) -> Result<BoxDeltas> {
    if !anchor.has_positive_area() {
        return Err(Error::InvalidBox(format!(
            "anchor {:?} must have positive width and height",
            anchor.to_array()
        )));
    }
    if !target.has_positive_area() {
        return Err(Error::InvalidBox(format!(
            "target {:?} must have positive width and height",
            target.to_array()
        )));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDeltas {
        tx: weights.wx * (tcx - acx) / aw,
        ty: weights.wy * (tcy - acy) / ah,
        tw: weights.ww * (target.width() / aw).ln(),
        th: weights.wh * (target.height() / ah).ln(),
    })
}

pub fn decode_deltas(
    anchor: &BBox,
    deltas: &BoxDeltas,
    weights: &DeltaWeights,
    clip_region: Option<&BBox>,
) -> Result<BBox> {
    if !deltas.is_finite() {
        return Err(Error::NonFinite("box deltas"));
    }
    if !anchor.has_positive_area() {
        return Err(Error::InvalidBox(format!(
            "anchor {:?} must have positive width and height",
            anchor.to_array()
        )));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let dw = (deltas.tw / weights.ww).min(SCALE_CLAMP);
    let dh = (deltas.th / weights.wh).min(SCALE_CLAMP);
    let cx = acx + deltas.tx / weights.wx * aw;
    let cy = acy + deltas.ty / weights.wy * ah;
    let decoded = BBox::from_center(cx, cy, aw * dw.exp(), ah * dh.exp());
    if !decoded.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("decoded box"));
    }
    Ok(match clip_region {
        Some(bounds) => clip_box(&decoded, bounds),
        None => decoded,
    })
}

/// Clamps each coordinate into `bounds`. A box entirely outside collapses to a
/// zero-area box on the nearest edge.
pub fn clip_box(b: &BBox, bounds: &BBox) -> BBox {
    BBox {
        x1: b.x1.clamp(bounds.x1, bounds.x2),
        y1: b.y1.clamp(bounds.y1, bounds.y2),
        x2: b.x2.clamp(bounds.x1, bounds.x2),
        y2: b.y2.clamp(bounds.y1, bounds.y2),
    }
}
