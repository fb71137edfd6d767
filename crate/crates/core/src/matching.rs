//! Proposal to ground-truth assignment, foreground/background sampling, and
//! the cascade IoU schedules.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou_matrix, BBox, BoxDeltas, DeltaWeights};

pub const DEFAULT_BATCH_SIZE_PER_IMAGE: usize = 512;
pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalMatch {
    /// Highest-IoU ground truth (lowest index on ties); `None` when the
    /// proposal overlaps nothing.
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
    pub positive: bool,
    /// Ground-truth class for positives, `None` (background) otherwise.
    pub class_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub fg_threshold: f64,
    pub matches: Vec<ProposalMatch>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.matches.iter().filter(|m| m.positive).count()
    }
}

/// Labels each proposal positive iff its best IoU is `>= fg_threshold`.
pub fn match_proposals(
    proposals: &[BBox],
    gt: &GroundTruth,
    fg_threshold: f64,
) -> Result<MatchResult> {
    if !(fg_threshold > 0.0 && fg_threshold <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "foreground threshold {fg_threshold} not in (0, 1]"
        )));
    }
    let ious = iou_matrix(proposals, &gt.boxes());
    let matches = (0..proposals.len())
        .map(|i| {
            let (matched_gt, max_iou) = match ious.row_argmax(i) {
                Some((j, v)) if v > 0.0 => (Some(j), v),
                _ => (None, 0.0),
            };
            let positive = matched_gt.is_some() && max_iou >= fg_threshold;
            ProposalMatch {
                matched_gt,
                max_iou,
                positive,
                class_target: if positive {
                    matched_gt.map(|j| gt.objects[j].class_id)
                } else {
                    None
                },
            }
        })
        .collect();
    Ok(MatchResult {
        fg_threshold,
        matches,
    })
}

/// Training samples drawn from one image's matched proposals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub indices: Vec<usize>,
    pub class_targets: Vec<Option<usize>>,
    /// Present exactly for positives.
    pub delta_targets: Vec<Option<BoxDeltas>>,
    pub iou_targets: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.class_targets.iter().filter(|c| c.is_some()).count()
    }
}

/// How many positives and negatives a batch takes from the given pools.
pub fn sample_quota(
    num_pos: usize,
    num_neg: usize,
    batch_size: usize,
    positive_fraction: f64,
) -> (usize, usize) {
    let quota = ((batch_size as f64) * positive_fraction).ceil() as usize;
    let mut take_pos = num_pos.min(quota).min(batch_size);
    let take_neg = num_neg.min(batch_size - take_pos);
    if take_pos + take_neg < batch_size {
        take_pos = num_pos.min(batch_size - take_neg);
    }
    (take_pos, take_neg)
}

fn pick<R: Rng + ?Sized>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Uniformly subsamples at most `ceil(batch_size * positive_fraction)`
/// positives and fills the rest with negatives. Either class tops up the
/// other when it runs short. Output lists positives then negatives, each in
/// ascending proposal order.
pub fn sample<R: Rng + ?Sized>(
    m: &MatchResult,
    proposals: &[BBox],
    gt: &GroundTruth,
    weights: &DeltaWeights,
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<SampleBatch> {
    if !(positive_fraction > 0.0 && positive_fraction <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "positive fraction {positive_fraction} not in (0, 1]"
        )));
    }
    if proposals.len() != m.len() {
        return Err(Error::DimensionMismatch {
            what: "proposals vs match result",
            expected: m.len(),
            actual: proposals.len(),
        });
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..m.len()).partition(|&i| m.matches[i].positive);
    let (take_pos, take_neg) = sample_quota(pos.len(), neg.len(), batch_size, positive_fraction);
    let mut indices = pick(&pos, take_pos, rng);
    indices.extend(pick(&neg, take_neg, rng));

    let mut batch = SampleBatch::default();
    for &i in &indices {
        let pm = &m.matches[i];
        let delta = match (pm.positive, pm.matched_gt) {
            (true, Some(j)) => Some(encode_deltas(&proposals[i], &gt.objects[j].bbox, weights)?),
            _ => None,
        };
        batch.class_targets.push(pm.class_target);
        batch.delta_targets.push(delta);
        batch.iou_targets.push(pm.max_iou);
    }
    batch.indices = indices;
    Ok(batch)
}

/// Which IoU schedule a three-stage cascade uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSchedule {
    Baseline,
    Apdi,
}

impl FromStr for ThresholdSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "apdi" => Ok(Self::Apdi),
            other => Err(Error::Config(format!(
                "unknown threshold schedule {other:?}"
            ))),
        }
    }
}

pub fn cascade_thresholds(schedule: ThresholdSchedule) -> [f64; 3] {
    match schedule {
        ThresholdSchedule::Baseline => [0.5, 0.6, 0.7],
        ThresholdSchedule::Apdi => [0.5, 0.65, 0.8],
    }
}
