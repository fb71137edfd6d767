//! Proposal augmentation by the detector's own RoI head.
//!
//! During training the current head refines every original proposal (read
//! only, no gradient flows through it); positives among the originals are then
//! concatenated with all refined boxes. Classification trains on the refined
//! boxes, regression on every augmented positive, and the IoU branch on every
//! augmented box with IoU >= 0.3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, ImageTensor, ProposalSet, Provenance};
use crate::error::{Error, Result};
use crate::exec;
use crate::features::RoiPooler;
use crate::geometry::{decode_deltas, encode_deltas, iou_matrix, BBox, BoxDeltas};
use crate::heads::{HeadModel, LossAccumulator, LossReport, LossWeights};
use crate::matching::{self, match_proposals, MatchResult};

pub const DEFAULT_FG_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IOU_BRANCH_THRESHOLD: f64 = 0.3;
pub const DEFAULT_ROUTE_CAP: usize = 512;

/// Applies one regression pass to `boxes`, clipping to the image. Boxes with
/// no area inside the image cannot be pooled and pass through unchanged.
pub fn refine_boxes(
    model: &HeadModel,
    pooler: &RoiPooler<'_>,
    boxes: &[BBox],
    bounds: &BBox,
) -> Result<Vec<BBox>> {
    boxes
        .iter()
        .map(|b| {
            if !crate::geometry::clip_box(b, bounds).has_positive_area() {
                return Ok(*b);
            }
            let f = pooler.pool(b)?;
            let d = model.predict_deltas(&f)?;
            if b.has_positive_area() {
                decode_deltas(b, &d, &model.delta_weights, Some(bounds))
            } else {
                Ok(*b)
            }
        })
        .collect()
}

/// Convenience wrapper that builds the pooler for one image.
pub fn refine(
    model: &HeadModel,
    img: &ImageTensor,
    boxes: &[BBox],
    grid_size: usize,
) -> Result<Vec<BBox>> {
    let pooler = RoiPooler::new(img, grid_size)?;
    check_dims(model, &pooler)?;
    refine_boxes(model, &pooler, boxes, &img.bounds())
}

pub(crate) fn check_dims(model: &HeadModel, pooler: &RoiPooler<'_>) -> Result<()> {
    if model.feature_dim != pooler.feature_len() {
        return Err(Error::DimensionMismatch {
            what: "model feature dimension vs pooled features",
            expected: pooler.feature_len(),
            actual: model.feature_dim,
        });
    }
    Ok(())
}

/// Positive originals followed by every refined original.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedProposals {
    pub boxes: Vec<BBox>,
    pub provenance: Vec<Provenance>,
    /// Index of the original proposal each box derives from.
    pub source: Vec<usize>,
    /// IoU with the best ground truth, recomputed after refinement.
    pub max_iou: Vec<f64>,
    pub matched_gt: Vec<Option<usize>>,
}

impl AugmentedProposals {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_positive_original(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| **p == Provenance::PositiveOriginal)
            .count()
    }

    pub fn to_proposal_set(&self) -> ProposalSet {
        ProposalSet {
            boxes: self.boxes.clone(),
            scores: None,
            provenance: Some(self.provenance.clone()),
        }
    }
}

pub fn augment_proposals(
    originals: &ProposalSet,
    gt: &GroundTruth,
    model: &HeadModel,
    img: &ImageTensor,
    grid_size: usize,
    fg_threshold: f64,
) -> Result<AugmentedProposals> {
    let pooler = RoiPooler::new(img, grid_size)?;
    check_dims(model, &pooler)?;
    augment_with_pooler(
        &originals.boxes,
        gt,
        model,
        &pooler,
        &img.bounds(),
        fg_threshold,
    )
}

pub(crate) fn augment_with_pooler(
    originals: &[BBox],
    gt: &GroundTruth,
    model: &HeadModel,
    pooler: &RoiPooler<'_>,
    bounds: &BBox,
    fg_threshold: f64,
) -> Result<AugmentedProposals> {
    let refined = refine_boxes(model, pooler, originals, bounds)?;
    let original_match = match_proposals(originals, gt, fg_threshold)?;

    let mut boxes = Vec::with_capacity(originals.len() * 2);
    let mut provenance = Vec::with_capacity(boxes.capacity());
    let mut source = Vec::with_capacity(boxes.capacity());
    for (i, m) in original_match.matches.iter().enumerate() {
        if m.positive {
            boxes.push(originals[i]);
            provenance.push(Provenance::PositiveOriginal);
            source.push(i);
        }
    }
    for (i, b) in refined.into_iter().enumerate() {
        boxes.push(b);
        provenance.push(Provenance::Refined);
        source.push(i);
    }
    let ious = iou_matrix(&boxes, &gt.boxes());
    let (matched_gt, max_iou) = (0..boxes.len())
        .map(|i| match ious.row_argmax(i) {
            Some((j, v)) if v > 0.0 => (Some(j), v),
            _ => (None, 0.0),
        })
        .unzip();
    Ok(AugmentedProposals {
        boxes,
        provenance,
        source,
        max_iou,
        matched_gt,
    })
}

/// Where IoU-branch targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouTargetSource {
    #[default]
    Augmented,
    RefinedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingRules {
    pub fg_threshold: f64,
    pub iou_threshold: f64,
    pub iou_source: IouTargetSource,
}

impl Default for RoutingRules {
    fn default() -> Self {
        Self {
            fg_threshold: DEFAULT_FG_THRESHOLD,
            iou_threshold: DEFAULT_IOU_BRANCH_THRESHOLD,
            iou_source: IouTargetSource::Augmented,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Membership {
    pub cls: bool,
    pub reg: bool,
    pub iou: bool,
}

/// Set memberships of one augmented box, a pure function of its provenance
/// and recomputed IoU.
pub fn route_membership(provenance: Provenance, iou: f64, rules: &RoutingRules) -> Membership {
    let refined = provenance == Provenance::Refined;
    let iou_eligible = match rules.iou_source {
        IouTargetSource::Augmented => true,
        IouTargetSource::RefinedOnly => refined,
    };
    Membership {
        cls: refined,
        reg: iou >= rules.fg_threshold,
        iou: iou_eligible && iou >= rules.iou_threshold,
    }
}

/// Indices into an [`AugmentedProposals`] with their targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutedSets {
    /// Candidates for classification; sampled before use.
    pub cls: Vec<usize>,
    pub reg: Vec<(usize, BoxDeltas)>,
    pub iou: Vec<(usize, f64)>,
}

pub fn route_training_samples(
    aug: &AugmentedProposals,
    gt: &GroundTruth,
    rules: &RoutingRules,
    weights: &crate::geometry::DeltaWeights,
) -> Result<RoutedSets> {
    let mut out = RoutedSets::default();
    for i in 0..aug.len() {
        if !aug.boxes[i].has_positive_area() {
            continue;
        }
        let m = route_membership(aug.provenance[i], aug.max_iou[i], rules);
        if m.cls {
            out.cls.push(i);
        }
        if let Some(j) = aug.matched_gt[i] {
            if m.reg {
                out.reg.push((
                    i,
                    encode_deltas(&aug.boxes[i], &gt.objects[j].bbox, weights)?,
                ));
            }
            if m.iou {
                out.iou.push((i, aug.max_iou[i]));
            }
        }
    }
    Ok(out)
}

/// One training image with its precomputed original proposals.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub image: ImageTensor,
    pub gt: GroundTruth,
    pub proposals: ProposalSet,
}

/// Training variants of the single-head detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "apdi")]
    Apdi,
    #[serde(rename = "box-iou-only")]
    BoxIouOnly,
    #[serde(rename = "apdi+box-iou")]
    ApdiBoxIou,
}

impl HeadMode {
    pub fn augments(self) -> bool {
        matches!(self, HeadMode::Apdi | HeadMode::ApdiBoxIou)
    }

    pub fn trains_iou(self) -> bool {
        matches!(self, HeadMode::BoxIouOnly | HeadMode::ApdiBoxIou)
    }
}

/// Per-step training settings shared by every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSettings {
    pub grid_size: usize,
    pub batch_size_per_image: usize,
    pub positive_fraction: f64,
    pub routing: RoutingRules,
    /// Per-image cap on regression and IoU samples.
    pub route_cap: usize,
    pub loss_weights: LossWeights,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            grid_size: crate::features::DEFAULT_GRID_SIZE,
            batch_size_per_image: matching::DEFAULT_BATCH_SIZE_PER_IMAGE,
            positive_fraction: matching::DEFAULT_POSITIVE_FRACTION,
            routing: RoutingRules::default(),
            route_cap: DEFAULT_ROUTE_CAP,
            loss_weights: LossWeights::default(),
        }
    }
}

fn cap<T: Clone, R: Rng + ?Sized>(items: Vec<T>, limit: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= limit {
        return items;
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, items.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| items[k].clone()).collect()
}

/// Restricts a match result to the given indices.
fn sub_match(m: &MatchResult, keep: &[usize]) -> MatchResult {
    MatchResult {
        fg_threshold: m.fg_threshold,
        matches: keep.iter().map(|&i| m.matches[i]).collect(),
    }
}

/// Accumulates the loss terms for one head on one image.
///
/// * `augment = false`: classification and regression follow the standard
///   sampler over `inputs`; the IoU branch (when enabled) sees every input with
///   IoU >= the IoU threshold.
/// * `augment = true`: `inputs` are augmented first with `model` and routed.
#[allow(clippy::too_many_arguments)]
fn accumulate_head<R: Rng + ?Sized>(
    model: &HeadModel,
    pooler: &RoiPooler<'_>,
    bounds: &BBox,
    inputs: &[BBox],
    gt: &GroundTruth,
    settings: &StepSettings,
    augment: bool,
    train_iou: bool,
    rng: &mut R,
) -> Result<(LossAccumulator, Vec<BBox>)> {
    let rules = settings.routing;
    let weights = model.delta_weights;
    let mut acc = LossAccumulator::new(model);
    let total_classes = model.num_classes;

    // Boxes actually fed to the head this step; the next cascade stage
    // consumes their regressed versions.
    type Routed = (
        Vec<BBox>,
        Vec<usize>,
        Vec<(usize, BoxDeltas)>,
        Vec<(usize, f64)>,
    );
    let (boxes, cls_pool, reg, iou_set): Routed = if augment {
        let aug = augment_with_pooler(inputs, gt, model, pooler, bounds, rules.fg_threshold)?;
        let routed = route_training_samples(&aug, gt, &rules, &weights)?;
        (aug.boxes, routed.cls, routed.reg, routed.iou)
    } else {
        let usable: Vec<usize> = (0..inputs.len())
            .filter(|&i| inputs[i].has_positive_area())
            .collect();
        let m = match_proposals(inputs, gt, rules.fg_threshold)?;
        let iou_set = usable
            .iter()
            .filter(|&&i| {
                m.matches[i].matched_gt.is_some() && m.matches[i].max_iou >= rules.iou_threshold
            })
            .map(|&i| (i, m.matches[i].max_iou))
            .collect();
        (inputs.to_vec(), usable, Vec::new(), iou_set)
    };

    let cls_boxes: Vec<BBox> = cls_pool.iter().map(|&i| boxes[i]).collect();
    let cls_match = sub_match(&match_proposals(&boxes, gt, rules.fg_threshold)?, &cls_pool);
    let batch = matching::sample(
        &cls_match,
        &cls_boxes,
        gt,
        &weights,
        settings.batch_size_per_image,
        settings.positive_fraction,
        rng,
    )?;

    let mut feature_cache: Vec<Option<Vec<f64>>> = vec![None; boxes.len()];
    let mut feat = |i: usize| -> Result<Vec<f64>> {
        if feature_cache[i].is_none() {
            feature_cache[i] = Some(pooler.pool(&boxes[i])?.into_inner());
        }
        Ok(feature_cache[i].clone().expect("cached"))
    };

    for (k, &local) in batch.indices.iter().enumerate() {
        let i = cls_pool[local];
        let target = batch.class_targets[k].unwrap_or(total_classes);
        acc.add_cls(model, &feat(i)?, target)?;
        if !augment {
            if let Some(d) = &batch.delta_targets[k] {
                acc.add_reg(model, &feat(i)?, d)?;
            }
        }
    }
    for (i, d) in cap(reg, settings.route_cap, rng) {
        acc.add_reg(model, &feat(i)?, &d)?;
    }
    if train_iou {
        for (i, t) in cap(iou_set, settings.route_cap, rng) {
            acc.add_iou(model, &feat(i)?, t)?;
        }
    }
    Ok((acc, boxes))
}

fn image_rng(seed: u64, step: u64, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(image as u64);
    rng
}

/// One SGD step of a single head over a batch of images.
///
/// `augment_enabled` lets the caller hold augmentation off during warmup.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &HeadModel,
    images: &[&TrainImage],
    mode: HeadMode,
    settings: &StepSettings,
    lr: f64,
    seed: u64,
    step: u64,
    augment_enabled: bool,
) -> Result<(HeadModel, LossReport)> {
    let augment = mode.augments() && augment_enabled;
    let per_image = exec::map_range(images.len(), |k| -> Result<LossAccumulator> {
        let ti = images[k];
        let pooler = RoiPooler::new(&ti.image, settings.grid_size)?;
        check_dims(model, &pooler)?;
        let mut rng = image_rng(seed, step, k);
        let (acc, _) = accumulate_head(
            model,
            &pooler,
            &ti.image.bounds(),
            &ti.proposals.boxes,
            &ti.gt,
            settings,
            augment,
            mode.trains_iou(),
            &mut rng,
        )?;
        Ok(acc)
    });
    let mut total = LossAccumulator::new(model);
    for acc in per_image {
        total.merge(&acc?);
    }
    let (report, grads) = total.finish(&settings.loss_weights);
    Ok((model.sgd_step(&grads, lr)?, report))
}

/// Per-stage settings of a three-head cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSettings {
    pub thresholds: [f64; 3],
    /// Augment the first stage's proposals with the first head.
    pub augment_first: bool,
    pub box_iou: [bool; 3],
    pub stage_weights: [f64; 3],
}

/// Boxes each cascade stage receives for one image. Stage 1 gets the
/// originals (or their augmentation); stage `i + 1` gets stage `i`'s inputs
/// regressed by head `i`.
pub fn cascade_stage_inputs(
    models: &[HeadModel],
    pooler: &RoiPooler<'_>,
    bounds: &BBox,
    originals: &[BBox],
    gt: &GroundTruth,
    cascade: &CascadeSettings,
) -> Result<Vec<Vec<BBox>>> {
    if models.len() != 3 {
        return Err(Error::Config(format!(
            "cascade needs 3 heads, got {}",
            models.len()
        )));
    }
    let first = if cascade.augment_first {
        augment_with_pooler(
            originals,
            gt,
            &models[0],
            pooler,
            bounds,
            cascade.thresholds[0],
        )?
        .boxes
    } else {
        originals.to_vec()
    };
    let mut stages = vec![first];
    for s in 0..2 {
        let next = refine_boxes(&models[s], pooler, &stages[s], bounds)?;
        stages.push(next);
    }
    Ok(stages)
}

/// One SGD step on every head of a three-stage cascade.
#[allow(clippy::too_many_arguments)]
pub fn cascade_train_step(
    models: &[HeadModel],
    images: &[&TrainImage],
    settings: &StepSettings,
    cascade: &CascadeSettings,
    lr: f64,
    seed: u64,
    step: u64,
    augment_enabled: bool,
) -> Result<(Vec<HeadModel>, Vec<LossReport>)> {
    if models.len() != 3 {
        return Err(Error::Config(format!(
            "cascade needs 3 heads, got {}",
            models.len()
        )));
    }
    let per_image = exec::map_range(images.len(), |k| -> Result<Vec<LossAccumulator>> {
        let ti = images[k];
        let pooler = RoiPooler::new(&ti.image, settings.grid_size)?;
        for m in models {
            check_dims(m, &pooler)?;
        }
        let bounds = ti.image.bounds();
        let mut rng = image_rng(seed, step, k);
        let mut inputs = ti.proposals.boxes.clone();
        let mut accs = Vec::with_capacity(3);
        for (s, model) in models.iter().enumerate() {
            let stage_settings = StepSettings {
                routing: RoutingRules {
                    fg_threshold: cascade.thresholds[s],
                    ..settings.routing
                },
                ..settings.clone()
            };
            let augment = s == 0 && cascade.augment_first && augment_enabled;
            let (acc, fed) = accumulate_head(
                model,
                &pooler,
                &bounds,
                &inputs,
                &ti.gt,
                &stage_settings,
                augment,
                cascade.box_iou[s],
                &mut rng,
            )?;
            accs.push(acc);
            if s < 2 {
                inputs = refine_boxes(model, &pooler, &fed, &bounds)?;
            }
        }
        Ok(accs)
    });
    let mut totals: Vec<LossAccumulator> = models.iter().map(LossAccumulator::new).collect();
    for accs in per_image {
        for (t, a) in totals.iter_mut().zip(accs?) {
            t.merge(&a);
        }
    }
    let mut next = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for (s, t) in totals.iter().enumerate() {
        let w = settings.loss_weights;
        let scaled = LossWeights {
            cls: w.cls * cascade.stage_weights[s],
            reg: w.reg * cascade.stage_weights[s],
            iou: w.iou * cascade.stage_weights[s],
        };
        let (report, grads) = t.finish(&scaled);
        next.push(models[s].sgd_step(&grads, lr)?);
        reports.push(report);
    }
    Ok((next, reports))
}

/// Iterative box regression at inference: `iterations` refinement passes.
pub fn ibbr_refine(
    model: &HeadModel,
    proposals: &ProposalSet,
    img: &ImageTensor,
    grid_size: usize,
    iterations: usize,
) -> Result<ProposalSet> {
    if iterations == 0 {
        return Err(Error::Config("ibbr needs at least one iteration".into()));
    }
    let pooler = RoiPooler::new(img, grid_size)?;
    check_dims(model, &pooler)?;
    let bounds = img.bounds();
    let mut boxes = proposals.boxes.clone();
    for _ in 0..iterations {
        boxes = refine_boxes(model, &pooler, &boxes, &bounds)?;
    }
    Ok(ProposalSet {
        boxes,
        scores: proposals.scores.clone(),
        provenance: proposals
            .provenance
            .as_ref()
            .map(|p| vec![Provenance::Refined; p.len()]),
    })
}
