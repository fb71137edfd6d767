//! Inference (refinement pass, scoring pass, IoU calibration, per-class NMS)
//! and the training loop driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, augment_with_pooler, check_dims, refine_boxes, TrainImage};
use crate::config::{DatasetImage, ExperimentConfig, InferenceConfig, Mode};
use crate::data::{GroundTruth, ImageTensor, ProposalSet};
use crate::error::{Error, Result};
use crate::eval::{ApParams, EvalReport};
use crate::exec;
use crate::features::{feature_len, RoiPooler};
use crate::geometry::{clip_box, decode_deltas, iou, BBox, DeltaWeights};
use crate::heads::{HeadModel, LossReport};
use crate::jsonl;

pub const DETECTION_SCHEMA: &str = "detections/v1";
pub const DETECTOR_SCHEMA: &str = "detector/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub raw_cls_score: f64,
    pub iou_score: f64,
    pub final_score: f64,
    pub image_id: u64,
}

/// Multiplies every class score by the class-agnostic IoU score.
pub fn calibrate(raw_scores: &[f64], iou_score: f64) -> Vec<f64> {
    raw_scores.iter().map(|s| s * iou_score).collect()
}

/// Greedy NMS over detections of one class. Returns kept indices in
/// descending score order; equal scores keep the lower index first.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].final_score.total_cmp(&dets[a].final_score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&dets[i].bbox, &dets[k].bbox) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    schema: String,
    image_id: u64,
    #[serde(rename = "box")]
    bbox: BBox,
    class: usize,
    raw: f64,
    iou: f64,
    score: f64,
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    jsonl::write(
        path,
        dets.iter().map(|d| DetectionRecord {
            schema: DETECTION_SCHEMA.into(),
            image_id: d.image_id,
            bbox: d.bbox,
            class: d.class_id,
            raw: d.raw_cls_score,
            iou: d.iou_score,
            score: d.final_score,
        }),
    )
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (line, r) in jsonl::read::<DetectionRecord>(path)? {
        if r.schema != DETECTION_SCHEMA {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                expected: DETECTION_SCHEMA.into(),
                found: r.schema,
            });
        }
        for (name, v) in [("raw", r.raw), ("iou", r.iou), ("score", r.score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("{name} = {v} outside [0, 1]"),
                });
            }
        }
        out.push(Detection {
            bbox: r.bbox,
            class_id: r.class,
            raw_cls_score: r.raw,
            iou_score: r.iou,
            final_score: r.score,
            image_id: r.image_id,
        });
    }
    Ok(out)
}

/// A trained detector: one head, or three for a cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub schema: String,
    pub mode: Mode,
    pub grid_size: usize,
    pub channels: usize,
    pub heads: Vec<HeadModel>,
    /// Which heads carry a trained IoU branch.
    pub box_iou: Vec<bool>,
}

impl Detector {
    pub fn zeros(
        mode: Mode,
        num_classes: usize,
        channels: usize,
        grid_size: usize,
        cascade_box_iou: [bool; 3],
    ) -> Self {
        let d = feature_len(channels, grid_size);
        let n = mode.num_heads();
        let box_iou = match mode.head_mode() {
            Some(hm) => vec![hm.trains_iou()],
            None => cascade_box_iou.to_vec(),
        };
        Self {
            schema: DETECTOR_SCHEMA.into(),
            mode,
            grid_size,
            channels,
            heads: (0..n)
                .map(|_| HeadModel::zeros(num_classes, d, DeltaWeights::default()))
                .collect(),
            box_iou,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].num_classes
    }

    pub fn trains_iou(&self) -> bool {
        self.box_iou.iter().any(|&b| b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != DETECTOR_SCHEMA {
            return Err(Error::Schema {
                path: Default::default(),
                expected: DETECTOR_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        if self.heads.len() != self.mode.num_heads() || self.box_iou.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "mode {} needs {} heads, checkpoint has {} heads and {} IoU flags",
                self.mode,
                self.mode.num_heads(),
                self.heads.len(),
                self.box_iou.len()
            )));
        }
        let d = feature_len(self.channels, self.grid_size);
        for h in &self.heads {
            h.validate()?;
            if h.feature_dim != d || h.num_classes != self.heads[0].num_classes {
                return Err(Error::DimensionMismatch {
                    what: "head feature dimension",
                    expected: d,
                    actual: h.feature_dim,
                });
            }
        }
        Ok(())
    }

    /// Pretty JSON; identical detectors give identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detector serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match v.get("schema").and_then(|s| s.as_str()) {
            Some(DETECTOR_SCHEMA) => {}
            other => {
                return Err(Error::Schema {
                    path: Default::default(),
                    expected: DETECTOR_SCHEMA.into(),
                    found: other.unwrap_or("<missing>").into(),
                })
            }
        }
        let det: Detector = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        det.validate()?;
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema {
                expected, found, ..
            } => Error::Schema {
                path: path.to_path_buf(),
                expected,
                found,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSettings {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub calibrate: bool,
    /// Regression passes applied before the scoring pass.
    pub refine_passes: usize,
}

impl InferenceSettings {
    pub fn resolve(cfg: &InferenceConfig, det: &Detector) -> Self {
        Self {
            score_threshold: cfg.score_threshold,
            nms_threshold: cfg.nms_threshold,
            max_detections: cfg.max_detections,
            calibrate: cfg.calibrate.unwrap_or_else(|| det.trains_iou()),
            refine_passes: cfg
                .refine_passes
                .unwrap_or(if det.mode.augments() { 1 } else { 0 }),
        }
    }
}

/// Instrumentation of one inference call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferStats {
    pub proposals: usize,
    /// Proposals that reached the scoring pass.
    pub scored: usize,
    pub head_forwards: usize,
}

impl InferStats {
    fn add(&mut self, other: &InferStats) {
        self.proposals += other.proposals;
        self.scored += other.scored;
        self.head_forwards += other.head_forwards;
    }
}

struct Scored {
    bbox: BBox,
    probs: Vec<f64>,
    iou_score: f64,
}

fn poolable(b: &BBox, bounds: &BBox) -> bool {
    clip_box(b, bounds).has_positive_area()
}

fn refine_pass(
    head: &HeadModel,
    pooler: &RoiPooler<'_>,
    boxes: Vec<BBox>,
    bounds: &BBox,
    stats: &mut InferStats,
) -> Result<Vec<BBox>> {
    let mut out = refine_boxes(head, pooler, &boxes, bounds)?;
    stats.head_forwards += boxes.len();
    out.retain(|b| poolable(b, bounds));
    Ok(out)
}

fn score_pass(
    det: &Detector,
    pooler: &RoiPooler<'_>,
    boxes: &[BBox],
    bounds: &BBox,
    stats: &mut InferStats,
) -> Result<Vec<Scored>> {
    let last = det.heads.len() - 1;
    let iou_heads: Vec<usize> = (0..det.heads.len()).filter(|&s| det.box_iou[s]).collect();
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        let f = pooler.pool(b)?;
        let outs = det
            .heads
            .iter()
            .map(|h| h.forward(&f))
            .collect::<Result<Vec<_>>>()?;
        stats.head_forwards += outs.len();
        let n = outs.len() as f64;
        let mut probs = vec![0.0; outs[0].probs.len()];
        for o in &outs {
            for (p, q) in probs.iter_mut().zip(&o.probs) {
                *p += q / n;
            }
        }
        let iou_score = if iou_heads.is_empty() {
            outs[last].iou_score
        } else {
            iou_heads.iter().map(|&s| outs[s].iou_score).sum::<f64>() / iou_heads.len() as f64
        };
        let bbox = decode_deltas(
            b,
            &outs[last].deltas,
            &det.heads[last].delta_weights,
            Some(bounds),
        )?;
        out.push(Scored {
            bbox,
            probs,
            iou_score,
        });
    }
    Ok(out)
}

/// Sort key shared by every detection list: score descending, then class,
/// then box.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.total_cmp(&b.bbox))
}

/// Runs the detector on one image.
///
/// Single heads: `refine_passes` regression passes, then a scoring pass whose
/// deltas are applied once more to give the output boxes. Cascades: optional
/// pre-refinement with the first head, stages one and two regress in turn,
/// and the scoring pass on the third stage's input averages class
/// probabilities over all heads.
pub fn infer_image(
    det: &Detector,
    img: &ImageTensor,
    proposals: &ProposalSet,
    settings: &InferenceSettings,
    image_id: u64,
) -> Result<(Vec<Detection>, InferStats)> {
    let pooler = RoiPooler::new(img, det.grid_size)?;
    for h in &det.heads {
        check_dims(h, &pooler)?;
    }
    let bounds = img.bounds();
    let mut stats = InferStats {
        proposals: proposals.len(),
        ..Default::default()
    };
    let mut boxes: Vec<BBox> = proposals
        .boxes
        .iter()
        .filter(|b| poolable(b, &bounds))
        .copied()
        .collect();
    for _ in 0..settings.refine_passes {
        boxes = refine_pass(&det.heads[0], &pooler, boxes, &bounds, &mut stats)?;
    }
    if det.heads.len() > 1 {
        for s in 0..det.heads.len() - 1 {
            boxes = refine_pass(&det.heads[s], &pooler, boxes, &bounds, &mut stats)?;
        }
    }
    stats.scored = boxes.len();
    let scored = score_pass(det, &pooler, &boxes, &bounds, &mut stats)?;

    let k = det.num_classes();
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); k];
    for sc in scored {
        if !sc.bbox.has_positive_area() {
            continue;
        }
        let raw = &sc.probs[..k];
        let fin = if settings.calibrate {
            calibrate(raw, sc.iou_score)
        } else {
            raw.to_vec()
        };
        for c in 0..k {
            if fin[c] > settings.score_threshold {
                per_class[c].push(Detection {
                    bbox: sc.bbox,
                    class_id: c,
                    raw_cls_score: raw[c],
                    iou_score: sc.iou_score,
                    final_score: fin[c],
                    image_id,
                });
            }
        }
    }
    let mut dets: Vec<Detection> = per_class
        .iter()
        .flat_map(|d| nms(d, settings.nms_threshold))
        .collect();
    dets.sort_by(detection_order);
    dets.truncate(settings.max_detections);
    Ok((dets, stats))
}

/// Inference over many images, concatenated in input order.
pub fn infer_images(
    det: &Detector,
    images: &[DatasetImage],
    settings: &InferenceSettings,
) -> Result<(Vec<Detection>, InferStats)> {
    let per_image = exec::map(images, |im| {
        infer_image(
            det,
            &im.data.image,
            &im.data.proposals,
            settings,
            im.image_id,
        )
    });
    let mut dets = Vec::new();
    let mut stats = InferStats::default();
    for r in per_image {
        let (d, s) = r?;
        dets.extend(d);
        stats.add(&s);
    }
    Ok((dets, stats))
}

pub fn ground_truth_map(images: &[DatasetImage]) -> BTreeMap<u64, GroundTruth> {
    images
        .iter()
        .map(|im| (im.image_id, im.data.gt.clone()))
        .collect()
}

pub fn proposal_map(images: &[DatasetImage]) -> BTreeMap<u64, ProposalSet> {
    images
        .iter()
        .map(|im| (im.image_id, im.data.proposals.clone()))
        .collect()
}

/// Original proposals after `passes` regressions by the first head; scores
/// carry over unchanged.
pub fn refined_proposals(
    det: &Detector,
    images: &[DatasetImage],
    passes: usize,
) -> Result<BTreeMap<u64, ProposalSet>> {
    let head = &det.heads[0];
    let per_image = exec::map(images, |im| -> Result<(u64, ProposalSet)> {
        let pooler = RoiPooler::new(&im.data.image, det.grid_size)?;
        check_dims(head, &pooler)?;
        let bounds = im.data.image.bounds();
        let mut boxes = im.data.proposals.boxes.clone();
        for _ in 0..passes {
            boxes = refine_boxes(head, &pooler, &boxes, &bounds)?;
        }
        let n = boxes.len();
        Ok((
            im.image_id,
            ProposalSet {
                boxes,
                scores: im.data.proposals.scores.clone(),
                provenance: Some(vec![crate::data::Provenance::Refined; n]),
            },
        ))
    });
    per_image.into_iter().collect()
}

/// Augmented proposals (positive originals then refined boxes) built with the
/// first head, tagged by provenance.
pub fn augmented_proposals(
    det: &Detector,
    images: &[DatasetImage],
    fg_threshold: f64,
) -> Result<BTreeMap<u64, ProposalSet>> {
    let head = &det.heads[0];
    let per_image = exec::map(images, |im| -> Result<(u64, ProposalSet)> {
        let pooler = RoiPooler::new(&im.data.image, det.grid_size)?;
        check_dims(head, &pooler)?;
        let aug = augment_with_pooler(
            &im.data.proposals.boxes,
            &im.data.gt,
            head,
            &pooler,
            &im.data.image.bounds(),
            fg_threshold,
        )?;
        Ok((im.image_id, aug.to_proposal_set()))
    });
    per_image.into_iter().collect()
}

pub fn evaluate(
    det: &Detector,
    images: &[DatasetImage],
    settings: &InferenceSettings,
) -> Result<(EvalReport, Vec<Detection>)> {
    let (dets, _) = infer_images(det, images, settings)?;
    let report = EvalReport::evaluate(
        &dets,
        &ground_truth_map(images),
        det.num_classes(),
        &ApParams::default(),
    );
    Ok((report, dets))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Step {
        iteration: usize,
        lr: f64,
        stage: usize,
        loss: LossReport,
    },
    Eval {
        iteration: usize,
        ap: f64,
        ap50: Option<f64>,
        ap75: Option<f64>,
        num_detections: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<LogRecord>,
}

/// Per-epoch shuffles of the training set, drawn deterministically.
struct Batcher {
    n: usize,
    per_step: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    fn new(n: usize, per_step: usize, seed: u64) -> Self {
        Self {
            n,
            per_step,
            seed,
            epoch: None,
        }
    }

    fn indices(&mut self, iteration: usize) -> Vec<usize> {
        (0..self.per_step)
            .map(|k| {
                let pos = iteration * self.per_step + k;
                let (epoch, offset) = (pos / self.n, pos % self.n);
                if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x2545_f491_4f6c_dd1d);
                    rng.set_stream(epoch as u64);
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    perm.shuffle(&mut rng);
                    self.epoch = Some((epoch, perm));
                }
                self.epoch.as_ref().expect("epoch").1[offset]
            })
            .collect()
    }
}

/// Trains on a freshly generated dataset; writes checkpoints and logs under
/// `out_dir` when given.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    exec::with_workers(cfg.workers, || {
        let data = cfg.effective_dataset();
        let train_set = data.train_split()?;
        let test_set = if cfg.training.eval_every > 0 {
            data.test_split()?
        } else {
            Vec::new()
        };
        train_with_data(cfg, &train_set, &test_set, out_dir)
    })
}

/// Training loop over given splits. `test_set` is only used for periodic
/// evaluation snapshots.
pub fn train_with_data(
    cfg: &ExperimentConfig,
    train_set: &[DatasetImage],
    test_set: &[DatasetImage],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = &cfg.training;
    let step = &t.step;
    let channels = train_set[0].data.image.channels();
    let mut det = Detector::zeros(
        cfg.mode,
        cfg.dataset.scene.num_classes,
        channels,
        step.grid_size,
        cfg.cascade.box_iou,
    );
    let cascade = cfg.cascade_settings();
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        if t.checkpoint_every > 0 {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }
    let mut log = Vec::new();
    let mut batcher = Batcher::new(train_set.len(), t.images_per_step, cfg.seed);
    for it in 0..t.iterations {
        let batch: Vec<&TrainImage> = batcher
            .indices(it)
            .into_iter()
            .map(|i| &train_set[i].data)
            .collect();
        let lr = t.lr_at(it);
        let augment_on = it >= t.augment_warmup_iters;
        let reports = match cfg.mode.head_mode() {
            Some(hm) => {
                let (m, r) = augment::train_step(
                    &det.heads[0],
                    &batch,
                    hm,
                    step,
                    lr,
                    cfg.seed,
                    it as u64,
                    augment_on,
                )?;
                det.heads[0] = m;
                vec![r]
            }
            None => {
                let (m, r) = augment::cascade_train_step(
                    &det.heads, &batch, step, &cascade, lr, cfg.seed, it as u64, augment_on,
                )?;
                det.heads = m;
                r
            }
        };
        if t.log_every > 0 && (it % t.log_every == 0 || it + 1 == t.iterations) {
            for (stage, loss) in reports.into_iter().enumerate() {
                log::debug!("iter {it} stage {stage} loss {:.4}", loss.total);
                log.push(LogRecord::Step {
                    iteration: it,
                    lr,
                    stage,
                    loss,
                });
            }
        }
        if let Some(d) = &ckpt_dir {
            if t.checkpoint_every > 0 && (it + 1) % t.checkpoint_every == 0 {
                det.save(&d.join(format!("iter_{:06}.json", it + 1)))?;
            }
        }
        if t.eval_every > 0 && (it + 1) % t.eval_every == 0 && !test_set.is_empty() {
            let settings = InferenceSettings::resolve(&cfg.inference, &det);
            let (report, _) = evaluate(&det, test_set, &settings)?;
            log::info!("iter {} AP {:.4}", it + 1, report.ap.ap);
            log.push(LogRecord::Eval {
                iteration: it + 1,
                ap: report.ap.ap,
                ap50: report.ap.ap50,
                ap75: report.ap.ap75,
                num_detections: report.num_detections,
            });
        }
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        det.save(&d.join("model.json"))?;
        jsonl::write(&d.join("train_log.jsonl"), log.iter())?;
    }
    Ok(TrainOutcome { detector: det, log })
}

/// One row of the augmentation x IoU-head grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub calibrated: bool,
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub spearman: Option<f64>,
}

/// Trains and evaluates every ablation mode on one shared dataset.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    run_modes(cfg, &Mode::ABLATION, out_dir).map(|runs| runs.into_iter().map(|r| r.row).collect())
}

/// A trained and evaluated mode.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub row: AblationRow,
    pub detector: Detector,
    pub detections: Vec<Detection>,
}

pub fn run_modes(
    cfg: &ExperimentConfig,
    modes: &[Mode],
    out_dir: Option<&Path>,
) -> Result<Vec<ModeRun>> {
    exec::with_workers(cfg.workers, || {
        let data = cfg.effective_dataset();
        let train_set = data.train_split()?;
        let test_set = data.test_split()?;
        let mut rows = Vec::new();
        for &mode in modes {
            let mode_cfg = ExperimentConfig {
                mode,
                ..cfg.clone()
            };
            let dir = out_dir.map(|d| d.join(mode.as_str()));
            let outcome = train_with_data(&mode_cfg, &train_set, &[], dir.as_deref())?;
            let settings = InferenceSettings::resolve(&mode_cfg.inference, &outcome.detector);
            let (report, detections) = evaluate(&outcome.detector, &test_set, &settings)?;
            log::info!("{mode}: AP {:.4}", report.ap.ap);
            rows.push(ModeRun {
                row: AblationRow {
                    mode,
                    calibrated: settings.calibrate,
                    ap: report.ap.ap,
                    ap50: report.ap.ap50,
                    ap75: report.ap.ap75,
                    spearman: report.score_iou_spearman,
                },
                detector: outcome.detector,
                detections,
            });
        }
        Ok(rows)
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from("mode,calibrated,AP,AP50,AP75,spearman_score_iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{},{},{}\n",
            r.mode,
            r.calibrated,
            r.ap,
            fmt(r.ap50),
            fmt(r.ap75),
            fmt(r.spearman)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, s: f64) -> Detection {
        Detection {
            bbox: b,
            class_id: 0,
            raw_cls_score: s,
            iou_score: 1.0,
            final_score: s,
            image_id: 0,
        }
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate(&[0.9, 0.5, 0.2], 0.8);
        for (a, b) in c.iter().zip([0.72, 0.40, 0.16]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(calibrate(&[0.3, 0.6], 1.0), vec![0.3, 0.6]);
    }

    #[test]
    fn nms_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(b, 0.8), det(b, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].final_score, 0.9);
        let disjoint = [det(b, 0.5), det(bx(20.0, 20.0, 30.0, 30.0), 0.6)];
        assert_eq!(nms_indices(&disjoint, 0.5), vec![1, 0]);
        // Equal scores keep the lower index.
        assert_eq!(nms_indices(&[det(b, 0.5), det(b, 0.5)], 0.5), vec![0]);
    }

    #[test]
    fn zero_model_keeps_proposals() {
        let d = Detector::zeros(Mode::Apdi, 2, 1, 2, [false; 3]);
        let img = ImageTensor::zeros(1, 40, 40);
        let props =
            ProposalSet::from_boxes(vec![bx(1.0, 1.0, 11.0, 11.0), bx(20.0, 20.0, 35.0, 30.0)]);
        let settings = InferenceSettings::resolve(&InferenceConfig::default(), &d);
        assert_eq!(settings.refine_passes, 1);
        assert!(!settings.calibrate);
        let (dets, stats) = infer_image(&d, &img, &props, &settings, 7).unwrap();
        // Two boxes x two classes, prob 1/3 each, nothing suppressed.
        assert_eq!(dets.len(), 4);
        for x in &dets {
            assert!((x.raw_cls_score - 1.0 / 3.0).abs() < 1e-12);
            assert!(props.boxes.contains(&x.bbox));
            assert_eq!(x.image_id, 7);
        }
        assert_eq!(stats.head_forwards, 2 * stats.scored);
    }

    #[test]
    fn detector_json_round_trip() {
        let mut d = Detector::zeros(Mode::CascadeApdi, 3, 3, 4, [false, true, true]);
        d.heads[1].w_cls[5] = 0.1 + 0.2;
        let back = Detector::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        let wrong = d.to_json().replace(DETECTOR_SCHEMA, "detector/v0");
        assert!(matches!(
            Detector::from_json(&wrong),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let d = vec![det(bx(0.5, 1.0, 3.25, 9.0), 0.123456789)];
        save_detections(&p, &d).unwrap();
        assert_eq!(load_detections(&p).unwrap(), d);
    }

    #[test]
    fn iterations_zero_returns_initial_model() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.iterations = 0;
        cfg.dataset.train_images = 2;
        let out = train(&cfg, None).unwrap();
        assert!(out.log.is_empty());
        assert!(out.detector.heads[0].w_cls.iter().all(|&w| w == 0.0));
    }
}
