//! COCO-style recall and precision, IoU histograms, and score-quality
//! diagnostics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, ProposalSet, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pipeline::Detection;

/// `0.50, 0.55, ..., 0.95`, each the nearest double to `n / 100`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Thresholds shown in the proposal comparison table.
pub const TABLE_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARTable {
    pub budget: usize,
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    pub ar: f64,
    pub num_gt: usize,
}

impl ARTable {
    /// Recall at threshold `t` (must be one of the table's thresholds).
    pub fn at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|k| self.recall[k])
    }

    pub fn is_monotone(&self) -> bool {
        self.recall.windows(2).all(|w| w[1] <= w[0])
    }

    /// `AR,AR50,...,AR90` header and one data row with 4-decimal values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,AR");
        for t in TABLE_THRESHOLDS {
            let _ = write!(out, ",AR{}", (t * 100.0).round() as u32);
        }
        let _ = write!(out, "\n{},{:.4}", self.budget, self.ar);
        for t in TABLE_THRESHOLDS {
            let _ = write!(out, ",{:.4}", self.at(t).unwrap_or(f64::NAN));
        }
        out.push('\n');
        out
    }
}

/// Order used wherever proposals or detections are ranked: score
/// descending, then box coordinates, so results never depend on input order.
fn rank_order(sa: f64, ba: &BBox, sb: f64, bb: &BBox) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ba.total_cmp(bb))
}

fn top_proposals(set: &ProposalSet, budget: usize) -> Vec<BBox> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    if let Some(scores) = &set.scores {
        idx.sort_by(|&a, &b| rank_order(scores[a], &set.boxes[a], scores[b], &set.boxes[b]));
    } else {
        idx.sort_by(|&a, &b| set.boxes[a].total_cmp(&set.boxes[b]));
    }
    idx.truncate(budget);
    idx.into_iter().map(|i| set.boxes[i]).collect()
}

/// Number of ground truths matched one-to-one at threshold `t`: each ground
/// truth in turn takes its best unmatched proposal with IoU >= `t`.
fn matched_at(proposals: &[BBox], gts: &[BBox], t: f64) -> usize {
    let mut used = vec![false; proposals.len()];
    let mut matched = 0;
    for g in gts {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in proposals.iter().enumerate() {
            if used[i] {
                continue;
            }
            let v = iou(p, g);
            if v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    matched
}

pub fn average_recall(
    proposals: &BTreeMap<u64, ProposalSet>,
    gts: &BTreeMap<u64, GroundTruth>,
    budget: usize,
) -> Result<ARTable> {
    if budget == 0 {
        return Err(Error::OutOfRange(
            "proposal budget must be at least 1".into(),
        ));
    }
    let thresholds = coco_iou_thresholds();
    let num_gt: usize = gts.values().map(GroundTruth::len).sum();
    if num_gt == 0 {
        return Err(Error::Undefined(
            "recall needs at least one ground truth".into(),
        ));
    }
    let empty = ProposalSet::default();
    let per_image: Vec<Vec<usize>> =
        crate::exec::map(&gts.iter().collect::<Vec<_>>(), |(id, gt)| {
            let top = top_proposals(proposals.get(id).unwrap_or(&empty), budget);
            let boxes = gt.boxes();
            thresholds
                .iter()
                .map(|&t| matched_at(&top, &boxes, t))
                .collect()
        });
    let recall: Vec<f64> = (0..thresholds.len())
        .map(|k| per_image.iter().map(|m| m[k]).sum::<usize>() as f64 / num_gt as f64)
        .collect();
    let ar = recall.iter().sum::<f64>() / recall.len() as f64;
    Ok(ARTable {
        budget,
        thresholds,
        recall,
        ar,
        num_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            AreaRange::All => (0.0, 1e10),
            AreaRange::Small => (0.0, 32.0 * 32.0),
            AreaRange::Medium => (32.0 * 32.0, 96.0 * 96.0),
            AreaRange::Large => (96.0 * 96.0, 1e10),
        }
    }

    fn excludes(self, area: f64) -> bool {
        let (lo, hi) = self.bounds();
        area < lo || area > hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApParams {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over classes with ground truth and over thresholds.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Class-mean AP at each threshold.
    pub per_threshold: Vec<f64>,
    /// Threshold-mean AP per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Per-threshold, per-class 101-point precision; `None` when undefined.
fn precision_table(
    dets: &[&Detection],
    gts: &BTreeMap<u64, GroundTruth>,
    num_classes: usize,
    area: AreaRange,
    params: &ApParams,
) -> Vec<Vec<Option<f64>>> {
    let nt = params.iou_thresholds.len();
    let mut by_image_class: BTreeMap<(u64, usize), Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_image_class
            .entry((d.image_id, d.class_id))
            .or_default()
            .push(d);
    }
    for v in by_image_class.values_mut() {
        v.sort_by(|a, b| rank_order(a.final_score, &a.bbox, b.final_score, &b.bbox));
        v.truncate(params.max_detections);
    }

    let classes: Vec<usize> = (0..num_classes).collect();
    crate::exec::map(&classes, |&c| {
        // (score, box, matched, ignored) per threshold.
        let mut scored: Vec<(f64, BBox, Vec<bool>, Vec<bool>)> = Vec::new();
        let mut npig = 0usize;
        let image_ids: std::collections::BTreeSet<u64> = gts
            .keys()
            .copied()
            .chain(by_image_class.keys().filter(|k| k.1 == c).map(|k| k.0))
            .collect();
        for img in image_ids {
            let mut g: Vec<(BBox, bool)> = gts
                .get(&img)
                .map(|gt| {
                    gt.objects
                        .iter()
                        .filter(|o| o.class_id == c)
                        .map(|o| (o.bbox, area.excludes(o.bbox.area())))
                        .collect()
                })
                .unwrap_or_default();
            g.sort_by_key(|x| x.1);
            npig += g.iter().filter(|x| !x.1).count();
            let d = by_image_class
                .get(&(img, c))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let mut dt_matched = vec![vec![false; nt]; d.len()];
            let mut dt_ignored = vec![vec![false; nt]; d.len()];
            for (ti, &t) in params.iou_thresholds.iter().enumerate() {
                let mut gt_used = vec![false; g.len()];
                for (di, det) in d.iter().enumerate() {
                    let mut best_iou = t.min(1.0 - 1e-10);
                    let mut m: Option<usize> = None;
                    for (gi, (gb, g_ignored)) in g.iter().enumerate() {
                        if gt_used[gi] {
                            continue;
                        }
                        if let Some(mi) = m {
                            if !g[mi].1 && *g_ignored {
                                break;
                            }
                        }
                        let v = iou(&det.bbox, gb);
                        if v < best_iou {
                            continue;
                        }
                        best_iou = v;
                        m = Some(gi);
                    }
                    match m {
                        Some(mi) => {
                            gt_used[mi] = true;
                            dt_matched[di][ti] = true;
                            dt_ignored[di][ti] = g[mi].1;
                        }
                        None => dt_ignored[di][ti] = area.excludes(det.bbox.area()),
                    }
                }
            }
            for (di, det) in d.iter().enumerate() {
                scored.push((
                    det.final_score,
                    det.bbox,
                    dt_matched[di].clone(),
                    dt_ignored[di].clone(),
                ));
            }
        }
        if npig == 0 {
            return vec![None; nt];
        }
        scored.sort_by(|a, b| rank_order(a.0, &a.1, b.0, &b.1));
        (0..nt)
            .map(|ti| Some(interpolated_ap(&scored, ti, npig)))
            .collect()
    })
    .into_iter()
    .fold(
        vec![Vec::with_capacity(num_classes); nt],
        |mut acc, per_t| {
            for (ti, v) in per_t.into_iter().enumerate() {
                acc[ti].push(v);
            }
            acc
        },
    )
}

fn interpolated_ap(scored: &[(f64, BBox, Vec<bool>, Vec<bool>)], ti: usize, npig: usize) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut rc = Vec::with_capacity(scored.len());
    let mut pr = Vec::with_capacity(scored.len());
    for (_, _, matched, ignored) in scored {
        if ignored[ti] {
            continue;
        }
        if matched[ti] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / npig as f64);
        pr.push(tp / (tp + fp + f64::EPSILON));
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        let k = rc.partition_point(|&x| x < rt);
        if k < pr.len() {
            total += pr[k];
        }
    }
    total / 101.0
}

fn mean_defined<'a>(v: impl IntoIterator<Item = &'a Option<f64>>) -> Option<f64> {
    let (s, n) = v
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn average_precision(
    detections: &[Detection],
    gts: &BTreeMap<u64, GroundTruth>,
    num_classes: usize,
    params: &ApParams,
) -> ApSummary {
    let dets: Vec<&Detection> = detections.iter().collect();
    let table = precision_table(&dets, gts, num_classes, AreaRange::All, params);
    let at = |t: f64| {
        params
            .iou_thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .and_then(|k| mean_defined(&table[k]))
    };
    let per_threshold: Vec<f64> = table
        .iter()
        .map(|row| mean_defined(row).unwrap_or(0.0))
        .collect();
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| mean_defined(table.iter().map(|row| &row[c])))
        .collect();
    let ap = mean_defined(table.iter().flatten()).unwrap_or(0.0);
    let area_ap = |a: AreaRange| {
        let t = precision_table(&dets, gts, num_classes, a, params);
        mean_defined(t.iter().flatten())
    };
    ApSummary {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: area_ap(AreaRange::Small),
        ap_medium: area_ap(AreaRange::Medium),
        ap_large: area_ap(AreaRange::Large),
        per_threshold,
        per_class,
    }
}

/// Which proposals a histogram covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    /// Untagged, `original`, or `positive-original` boxes.
    OriginalPositive,
    /// Every box of an augmented set (`positive-original` and `refined`).
    AugmentedPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUHistogram {
    pub population: Population,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl IoUHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("population,lo,hi,count,fraction\n");
        let total = self.total().max(1) as f64;
        let pop = match self.population {
            Population::OriginalPositive => "original-positive",
            Population::AugmentedPositive => "augmented-positive",
        };
        for (k, &c) in self.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{pop},{:.4},{:.4},{c},{:.4}",
                self.edges[k],
                self.edges[k + 1],
                c as f64 / total
            );
        }
        out
    }
}

/// Best-ground-truth IoUs (>= 0.5) of the chosen population.
pub fn positive_ious(
    proposals: &BTreeMap<u64, ProposalSet>,
    gts: &BTreeMap<u64, GroundTruth>,
    population: Population,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let empty = GroundTruth::default();
    for (id, set) in proposals {
        let boxes = gts.get(id).unwrap_or(&empty).boxes();
        for (i, b) in set.boxes.iter().enumerate() {
            let tag = set.provenance.as_ref().map(|p| p[i]);
            let include = match population {
                Population::OriginalPositive => !matches!(tag, Some(Provenance::Refined)),
                Population::AugmentedPositive => match tag {
                    Some(Provenance::Refined) | Some(Provenance::PositiveOriginal) => true,
                    Some(Provenance::Original) => false,
                    None => {
                        return Err(Error::Config(format!(
                            "image {id}: augmented population needs provenance tags"
                        )))
                    }
                },
            };
            if !include {
                continue;
            }
            let best = boxes.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
            if best >= 0.5 {
                out.push(best);
            }
        }
    }
    Ok(out)
}

/// Bins IoU values in `[0.5, 1.0]` into `bins` uniform bins; 1.0 lands in
/// the last bin.
pub fn histogram_of(values: &[f64], population: Population, bins: usize) -> Result<IoUHistogram> {
    if bins == 0 {
        return Err(Error::OutOfRange("histogram needs at least one bin".into()));
    }
    let edges: Vec<f64> = (0..=bins)
        .map(|k| (bins + k) as f64 / (2 * bins) as f64)
        .collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !(0.5..=1.0).contains(&v) {
            continue;
        }
        let k = edges[1..bins].partition_point(|&e| e <= v);
        counts[k] += 1;
    }
    Ok(IoUHistogram {
        population,
        edges,
        counts,
    })
}

pub fn iou_histogram(
    proposals: &BTreeMap<u64, ProposalSet>,
    gts: &BTreeMap<u64, GroundTruth>,
    population: Population,
    bins: usize,
) -> Result<IoUHistogram> {
    histogram_of(
        &positive_ious(proposals, gts, population)?,
        population,
        bins,
    )
}

/// Fraction of `values` strictly above `t`; 0 for an empty slice.
pub fn fraction_above(values: &[f64], t: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > t).count() as f64 / values.len() as f64
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Undefined(
            "rank correlation needs at least 2 points".into(),
        ));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "rank correlation of a constant sequence".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// IoU of each detection with its best same-class ground truth (0 if none).
pub fn detection_ious(detections: &[Detection], gts: &BTreeMap<u64, GroundTruth>) -> Vec<f64> {
    detections
        .iter()
        .map(|d| {
            gts.get(&d.image_id).map_or(0.0, |gt| {
                gt.objects
                    .iter()
                    .filter(|o| o.class_id == d.class_id)
                    .map(|o| iou(&d.bbox, &o.bbox))
                    .fold(0.0, f64::max)
            })
        })
        .collect()
}

pub fn score_iou_correlation(
    detections: &[Detection],
    gts: &BTreeMap<u64, GroundTruth>,
) -> Result<f64> {
    let scores: Vec<f64> = detections.iter().map(|d| d.final_score).collect();
    spearman(&scores, &detection_ious(detections, gts))
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: ApSummary,
    pub ar: Option<ARTable>,
    pub histograms: Vec<IoUHistogram>,
    pub score_iou_spearman: Option<f64>,
    pub num_detections: usize,
}

impl EvalReport {
    pub fn evaluate(
        detections: &[Detection],
        gts: &BTreeMap<u64, GroundTruth>,
        num_classes: usize,
        params: &ApParams,
    ) -> Self {
        let ap = average_precision(detections, gts, num_classes, params);
        let mut as_proposals: BTreeMap<u64, ProposalSet> = BTreeMap::new();
        for d in detections {
            let e = as_proposals
                .entry(d.image_id)
                .or_insert_with(|| ProposalSet {
                    scores: Some(Vec::new()),
                    ..Default::default()
                });
            e.boxes.push(d.bbox);
            e.scores.as_mut().expect("scores").push(d.final_score);
        }
        let ar = average_recall(&as_proposals, gts, params.max_detections).ok();
        EvalReport {
            ap,
            ar,
            histograms: Vec::new(),
            score_iou_spearman: score_iou_correlation(detections, gts).ok(),
            num_detections: detections.len(),
        }
    }

    /// `metric,value` rows with 4-decimal values; undefined metrics are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |name: &str, v: Option<f64>| {
            let _ = match v {
                Some(v) => writeln!(out, "{name},{v:.4}"),
                None => writeln!(out, "{name},"),
            };
        };
        row("AP", Some(self.ap.ap));
        row("AP50", self.ap.ap50);
        row("AP75", self.ap.ap75);
        row("APs", self.ap.ap_small);
        row("APm", self.ap.ap_medium);
        row("APl", self.ap.ap_large);
        for (c, v) in self.ap.per_class.iter().enumerate() {
            row(&format!("AP_class{c}"), *v);
        }
        if let Some(ar) = &self.ar {
            row("AR", Some(ar.ar));
            for t in TABLE_THRESHOLDS {
                row(&format!("AR{}", (t * 100.0).round() as u32), ar.at(t));
            }
        }
        row("spearman_score_iou", self.score_iou_spearman);
        out
    }
}
