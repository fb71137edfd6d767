//! A small two-stage detection toolkit: synthetic scenes and stand-in
//! proposals, a linear RoI head with an IoU branch, proposal augmentation by
//! the head itself, cascades, COCO-style evaluation, and the training loop.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod heads;
pub mod jsonl;
pub mod matching;
pub mod pipeline;

pub use config::{ExperimentConfig, Mode};
pub use data::{GroundTruth, ImageTensor, ProposalSet, Provenance};
pub use error::{Error, Result};
pub use geometry::{iou, BBox, BoxDeltas, DeltaWeights};
pub use heads::HeadModel;
pub use pipeline::{Detection, Detector};
