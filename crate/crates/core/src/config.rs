//! Experiment configuration: one JSON document describing the dataset,
//! training, and inference settings of a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{CascadeSettings, HeadMode, StepSettings, TrainImage};
use crate::data::{generate_scene, proposals_for_image, ProposalSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::matching::{cascade_thresholds, ThresholdSchedule};

/// Every trainable detector variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "apdi")]
    Apdi,
    #[serde(rename = "box-iou-only")]
    BoxIouOnly,
    #[serde(rename = "apdi+box-iou")]
    ApdiBoxIou,
    #[serde(rename = "cascade-baseline")]
    CascadeBaseline,
    #[serde(rename = "cascade-apdi")]
    CascadeApdi,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Baseline,
        Mode::Apdi,
        Mode::BoxIouOnly,
        Mode::ApdiBoxIou,
        Mode::CascadeBaseline,
        Mode::CascadeApdi,
    ];

    /// Rows of the augmentation x IoU-head ablation grid.
    pub const ABLATION: [Mode; 4] = [
        Mode::Baseline,
        Mode::Apdi,
        Mode::BoxIouOnly,
        Mode::ApdiBoxIou,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Apdi => "apdi",
            Mode::BoxIouOnly => "box-iou-only",
            Mode::ApdiBoxIou => "apdi+box-iou",
            Mode::CascadeBaseline => "cascade-baseline",
            Mode::CascadeApdi => "cascade-apdi",
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, Mode::CascadeBaseline | Mode::CascadeApdi)
    }

    /// Single-head training variant; `None` for cascades.
    pub fn head_mode(self) -> Option<HeadMode> {
        match self {
            Mode::Baseline => Some(HeadMode::Baseline),
            Mode::Apdi => Some(HeadMode::Apdi),
            Mode::BoxIouOnly => Some(HeadMode::BoxIouOnly),
            Mode::ApdiBoxIou => Some(HeadMode::ApdiBoxIou),
            Mode::CascadeBaseline | Mode::CascadeApdi => None,
        }
    }

    pub fn augments(self) -> bool {
        match self {
            Mode::CascadeApdi => true,
            Mode::CascadeBaseline => false,
            m => m.head_mode().is_some_and(HeadMode::augments),
        }
    }

    pub fn num_heads(self) -> usize {
        if self.is_cascade() {
            3
        } else {
            1
        }
    }

    pub fn default_schedule(self) -> ThresholdSchedule {
        match self {
            Mode::CascadeApdi => ThresholdSchedule::Apdi,
            _ => ThresholdSchedule::Baseline,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// A seeded synthetic dataset: scenes, stand-in proposals, and split sizes.
/// Train images use indices `0..train_images`, test images the next
/// `test_images` indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub proposals: ProposalSpec,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            proposals: ProposalSpec::default(),
            train_images: 1500,
            test_images: 500,
        }
    }
}

/// One dataset image with its id.
#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub image_id: u64,
    pub data: TrainImage,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.proposals.validate()?;
        if self.train_images == 0 {
            return Err(Error::Config(
                "dataset.train_images must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn image(&self, index: u64) -> Result<DatasetImage> {
        let (image, gt) = generate_scene(&self.scene, index)?;
        let proposals = proposals_for_image(&gt, &self.proposals, &self.scene.bounds(), index)?;
        Ok(DatasetImage {
            image_id: index,
            data: TrainImage {
                image,
                gt,
                proposals,
            },
        })
    }

    fn range(&self, start: u64, count: usize) -> Result<Vec<DatasetImage>> {
        exec::map_range(count, |k| self.image(start + k as u64))
            .into_iter()
            .collect()
    }

    pub fn train_split(&self) -> Result<Vec<DatasetImage>> {
        self.range(0, self.train_images)
    }

    pub fn test_split(&self) -> Result<Vec<DatasetImage>> {
        self.range(self.train_images as u64, self.test_images)
    }

    /// Copy whose generator seeds are mixed with an experiment seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.scene.seed ^= splitmix64(seed);
        out.proposals.seed ^= splitmix64(seed ^ 0xa076_1d64_78bd_642f);
        out
    }
}

pub const MANIFEST_SCHEMA: &str = "dataset-manifest/v1";

/// Which half of a dataset to materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train|test)"
            ))),
        }
    }
}

/// On-disk description of a synthetic dataset. Images are regenerated from
/// the embedded (already reseeded) generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train_ids: [u64; 2],
    pub test_ids: [u64; 2],
}

impl DatasetManifest {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let dataset = cfg.effective_dataset();
        let n = dataset.train_images as u64;
        Self {
            schema: MANIFEST_SCHEMA.into(),
            seed: cfg.seed,
            train_ids: [0, n],
            test_ids: [n, n + dataset.test_images as u64],
            dataset,
        }
    }

    pub fn split(&self, split: Split) -> Result<Vec<DatasetImage>> {
        match split {
            Split::Train => self.dataset.train_split(),
            Split::Test => self.dataset.test_split(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = crate::jsonl::read_json(path)?;
        let found = value
            .get("schema")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != MANIFEST_SCHEMA {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                expected: MANIFEST_SCHEMA.into(),
                found: found.into(),
            });
        }
        let m: Self = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        m.dataset.validate()?;
        Ok(m)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub images_per_step: usize,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Iterations trained without augmentation before it switches on.
    pub augment_warmup_iters: usize,
    /// 0 disables; likewise for the two fields below.
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub step: StepSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            images_per_step: 16,
            lr: 0.5,
            lr_steps: vec![700, 900],
            lr_gamma: 0.1,
            augment_warmup_iters: 0,
            log_every: 10,
            checkpoint_every: 0,
            eval_every: 0,
            step: StepSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| iteration >= s).count();
        self.lr * self.lr_gamma.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    /// Overrides the mode's IoU schedule.
    pub threshold_schedule: Option<ThresholdSchedule>,
    /// Which stages carry an IoU branch.
    pub box_iou: [bool; 3],
    pub stage_weights: [f64; 3],
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            threshold_schedule: None,
            box_iou: [false; 3],
            stage_weights: [1.0, 0.5, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Defaults to on exactly when an IoU branch was trained.
    pub calibrate: Option<bool>,
    /// Regression passes before the scoring pass. Defaults to 1 for
    /// augmented modes and 0 otherwise.
    pub refine_passes: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
            calibrate: None,
            refine_passes: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(
                "inference.score_threshold must lie in [0, 1]".into(),
            ));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::Config(
                "inference.nms_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.max_detections == 0 {
            return Err(Error::Config(
                "inference.max_detections must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Master seed, mixed into the dataset generators and the sampler.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub cascade: CascadeConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            seed: 0,
            workers: 0,
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            cascade: CascadeConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.inference.validate()?;
        let t = &self.training;
        if t.images_per_step == 0 {
            return Err(Error::Config(
                "training.images_per_step must be at least 1".into(),
            ));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) || !(t.lr_gamma.is_finite() && t.lr_gamma > 0.0) {
            return Err(Error::Config(
                "training.lr and lr_gamma must be finite and non-negative".into(),
            ));
        }
        let s = &t.step;
        if s.grid_size == 0 || s.batch_size_per_image == 0 {
            return Err(Error::Config(
                "grid_size and batch_size_per_image must be at least 1".into(),
            ));
        }
        if !(s.positive_fraction > 0.0 && s.positive_fraction <= 1.0) {
            return Err(Error::Config("positive_fraction must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("fg_threshold", s.routing.fg_threshold),
            ("iou_threshold", s.routing.iou_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("routing.{name} must lie in (0, 1]")));
            }
        }
        if !self.mode.is_cascade() {
            if self.cascade.threshold_schedule.is_some() {
                return Err(Error::Config(format!(
                    "threshold_schedule only applies to cascade modes, not {}",
                    self.mode
                )));
            }
            if self.cascade.box_iou.iter().any(|&b| b) {
                return Err(Error::Config(format!(
                    "per-stage box_iou flags only apply to cascade modes, not {}",
                    self.mode
                )));
            }
        }
        if self.mode.is_cascade() && self.inference.refine_passes.is_some_and(|p| p > 1) {
            return Err(Error::Config(
                "cascade modes support at most one pre-refinement pass".into(),
            ));
        }
        Ok(())
    }

    /// Dataset with generator seeds mixed with the experiment seed.
    pub fn effective_dataset(&self) -> DatasetConfig {
        self.dataset.reseeded(self.seed)
    }

    pub fn cascade_settings(&self) -> CascadeSettings {
        CascadeSettings {
            thresholds: cascade_thresholds(
                self.cascade
                    .threshold_schedule
                    .unwrap_or_else(|| self.mode.default_schedule()),
            ),
            augment_first: self.mode.augments(),
            box_iou: self.cascade.box_iou,
            stage_weights: self.cascade.stage_weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&j).unwrap(), m);
        }
        assert!("apdi_plus_iou".parse::<Mode>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"mode":"apdi","sede":1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"training":{"iters":5}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"mode":"apdi","seed":4}"#).unwrap();
        assert_eq!(c.mode, Mode::Apdi);
        assert_eq!(c.training, TrainingConfig::default());
    }

    #[test]
    fn invalid_combinations() {
        let mut c = ExperimentConfig {
            mode: Mode::Apdi,
            ..Default::default()
        };
        c.cascade.box_iou = [true, false, false];
        assert!(c.validate().is_err());
        c.mode = Mode::CascadeApdi;
        assert!(c.validate().is_ok());
        assert_eq!(c.cascade_settings().thresholds, [0.5, 0.65, 0.8]);
        c.cascade.threshold_schedule = Some(ThresholdSchedule::Baseline);
        assert_eq!(c.cascade_settings().thresholds, [0.5, 0.6, 0.7]);
    }

    #[test]
    fn lr_schedule_steps() {
        let t = TrainingConfig {
            lr: 1.0,
            lr_steps: vec![10, 20],
            lr_gamma: 0.5,
            ..Default::default()
        };
        assert_eq!(t.lr_at(0), 1.0);
        assert_eq!(t.lr_at(10), 0.5);
        assert_eq!(t.lr_at(25), 0.25);
    }
}
