//! Linear RoI head with three branches over one shared feature vector:
//! softmax classification (background is the last class), class-agnostic box
//! deltas, and a sigmoid IoU score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxDeltas, DeltaWeights};

pub const MODEL_SCHEMA: &str = "head-model/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadModel {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub delta_weights: DeltaWeights,
    /// `(K + 1) x D`, row-major.
    pub w_cls: Vec<f64>,
    /// `4 x D`, row-major.
    pub w_reg: Vec<f64>,
    /// `D`.
    pub w_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Softmax over `K + 1` entries; index `K` is background.
    pub probs: Vec<f64>,
    pub deltas: BoxDeltas,
    pub iou_logit: f64,
    pub iou_score: f64,
}

impl HeadOutput {
    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits[k] - lse
}

impl HeadModel {
    pub fn zeros(num_classes: usize, feature_dim: usize, delta_weights: DeltaWeights) -> Self {
        Self {
            num_classes,
            feature_dim,
            delta_weights,
            w_cls: vec![0.0; (num_classes + 1) * feature_dim],
            w_reg: vec![0.0; 4 * feature_dim],
            w_iou: vec![0.0; feature_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        let check = |what: &'static str, v: &[f64], n: usize| -> Result<()> {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(what));
            }
            Ok(())
        };
        check(
            "classification weights",
            &self.w_cls,
            (self.num_classes + 1) * d,
        )?;
        check("regression weights", &self.w_reg, 4 * d)?;
        check("iou weights", &self.w_iou, d)
    }

    fn check_features(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.feature_dim,
                actual: f.len(),
            });
        }
        Ok(())
    }

    pub fn cls_logits(&self, f: &[f64]) -> Vec<f64> {
        self.w_cls
            .chunks_exact(self.feature_dim)
            .map(|row| dot(row, f))
            .collect()
    }

    pub fn deltas(&self, f: &[f64]) -> BoxDeltas {
        let mut d = [0.0; 4];
        for (k, row) in self.w_reg.chunks_exact(self.feature_dim).enumerate() {
            d[k] = dot(row, f);
        }
        BoxDeltas::from_array(d)
    }

    pub fn iou_logit(&self, f: &[f64]) -> f64 {
        dot(&self.w_iou, f)
    }

    pub fn forward(&self, f: &[f64]) -> Result<HeadOutput> {
        self.check_features(f)?;
        let iou_logit = self.iou_logit(f);
        Ok(HeadOutput {
            probs: softmax(&self.cls_logits(f)),
            deltas: self.deltas(f),
            iou_logit,
            iou_score: sigmoid(iou_logit),
        })
    }

    /// Regression-only forward used by refinement passes.
    pub fn predict_deltas(&self, f: &[f64]) -> Result<BoxDeltas> {
        self.check_features(f)?;
        Ok(self.deltas(f))
    }

    /// Plain gradient step.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<HeadModel> {
        let mut next = self.clone();
        next.apply_sgd(grads, lr)?;
        Ok(next)
    }

    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.cls.len() != self.w_cls.len()
            || grads.reg.len() != self.w_reg.len()
            || grads.iou.len() != self.w_iou.len()
        {
            return Err(Error::DimensionMismatch {
                what: "gradient",
                expected: self.w_cls.len() + self.w_reg.len() + self.w_iou.len(),
                actual: grads.cls.len() + grads.reg.len() + grads.iou.len(),
            });
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (w, g) in self.w_cls.iter_mut().zip(&grads.cls) {
            *w -= lr * g;
        }
        for (w, g) in self.w_reg.iter_mut().zip(&grads.reg) {
            *w -= lr * g;
        }
        for (w, g) in self.w_iou.iter_mut().zip(&grads.iou) {
            *w -= lr * g;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            schema: MODEL_SCHEMA.into(),
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<model>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.schema != MODEL_SCHEMA {
            return Err(Error::Schema {
                path: "<model>".into(),
                expected: MODEL_SCHEMA.into(),
                found: file.schema,
            });
        }
        file.model.validate()?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema: String,
    model: HeadModel,
}

/// Cross-entropy of probabilities `p` against class `target` in `0..=K`.
pub fn loss_cls(p: &[f64], target: usize) -> Result<f64> {
    if target >= p.len() {
        return Err(Error::OutOfRange(format!(
            "class target {target} with {} classes",
            p.len()
        )));
    }
    Ok(-p[target].max(f64::MIN_POSITIVE).ln())
}

/// Mean absolute error over the four delta components.
pub fn loss_reg(pred: &BoxDeltas, target: &BoxDeltas) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / 4.0
}

/// Binary cross-entropy of a probability against a soft target.
pub fn loss_iou(iou_score: f64, target: f64) -> Result<f64> {
    check_iou_target(target)?;
    let p = iou_score.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Ok(-(target * p.ln() + (1.0 - target) * (1.0 - p).ln()))
}

/// Fused `BCE(sigmoid(z), t)`, finite for any finite `z`.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

fn check_iou_target(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("iou target {t} not in [0, 1]")))
    }
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 1.0,
            iou: 1.0,
        }
    }
}

/// Gradient with the same layout as the model's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
    pub iou: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &HeadModel) -> Self {
        Self {
            cls: vec![0.0; model.w_cls.len()],
            reg: vec![0.0; model.w_reg.len()],
            iou: vec![0.0; model.w_iou.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            *a += b;
        }
        for (a, b) in self.reg.iter_mut().zip(&other.reg) {
            *a += b;
        }
        for (a, b) in self.iou.iter_mut().zip(&other.iou) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.cls
            .iter()
            .chain(&self.reg)
            .chain(&self.iou)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Un-normalized loss and gradient sums for one group of samples. Sums from
/// several images are added in a fixed order, then normalized once.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAccumulator {
    pub grads: Gradients,
    pub cls_sum: f64,
    pub cls_count: usize,
    pub reg_sum: f64,
    pub reg_count: usize,
    pub iou_sum: f64,
    pub iou_count: usize,
}

impl LossAccumulator {
    pub fn new(model: &HeadModel) -> Self {
        Self {
            grads: Gradients::zeros_like(model),
            cls_sum: 0.0,
            cls_count: 0,
            reg_sum: 0.0,
            reg_count: 0,
            iou_sum: 0.0,
            iou_count: 0,
        }
    }

    pub fn add_cls(&mut self, model: &HeadModel, f: &[f64], target: usize) -> Result<()> {
        model.check_features(f)?;
        if target > model.num_classes {
            return Err(Error::OutOfRange(format!(
                "class target {target} with {} classes",
                model.num_classes
            )));
        }
        let logits = model.cls_logits(f);
        self.cls_sum -= log_softmax_at(&logits, target);
        self.cls_count += 1;
        let p = softmax(&logits);
        let d = model.feature_dim;
        for (k, pk) in p.iter().enumerate() {
            let g = pk - if k == target { 1.0 } else { 0.0 };
            for (gw, x) in self.grads.cls[k * d..(k + 1) * d].iter_mut().zip(f) {
                *gw += g * x;
            }
        }
        Ok(())
    }

    pub fn add_reg(&mut self, model: &HeadModel, f: &[f64], target: &BoxDeltas) -> Result<()> {
        model.check_features(f)?;
        let pred = model.deltas(f);
        self.reg_sum += loss_reg(&pred, target);
        self.reg_count += 1;
        let d = model.feature_dim;
        for (k, (p, t)) in pred.to_array().iter().zip(target.to_array()).enumerate() {
            let g = 0.25 * sign(p - t);
            if g != 0.0 {
                for (gw, x) in self.grads.reg[k * d..(k + 1) * d].iter_mut().zip(f) {
                    *gw += g * x;
                }
            }
        }
        Ok(())
    }

    pub fn add_iou(&mut self, model: &HeadModel, f: &[f64], target: f64) -> Result<()> {
        model.check_features(f)?;
        check_iou_target(target)?;
        let z = model.iou_logit(f);
        self.iou_sum += bce_with_logits(z, target);
        self.iou_count += 1;
        let g = sigmoid(z) - target;
        for (gw, x) in self.grads.iou.iter_mut().zip(f) {
            *gw += g * x;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LossAccumulator) {
        self.grads.add_assign(&other.grads);
        self.cls_sum += other.cls_sum;
        self.cls_count += other.cls_count;
        self.reg_sum += other.reg_sum;
        self.reg_count += other.reg_count;
        self.iou_sum += other.iou_sum;
        self.iou_count += other.iou_count;
    }

    /// Averages each term over its own participants and applies the weights.
    pub fn finish(&self, weights: &LossWeights) -> (LossReport, Gradients) {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let scale = |n: usize, w: f64| if n == 0 { 0.0 } else { w / n as f64 };
        let report = LossReport {
            cls: mean(self.cls_sum, self.cls_count),
            reg: mean(self.reg_sum, self.reg_count),
            iou: mean(self.iou_sum, self.iou_count),
            total: weights.cls * mean(self.cls_sum, self.cls_count)
                + weights.reg * mean(self.reg_sum, self.reg_count)
                + weights.iou * mean(self.iou_sum, self.iou_count),
            cls_count: self.cls_count,
            reg_count: self.reg_count,
            iou_count: self.iou_count,
        };
        let (sc, sr, si) = (
            scale(self.cls_count, weights.cls),
            scale(self.reg_count, weights.reg),
            scale(self.iou_count, weights.iou),
        );
        let grads = Gradients {
            cls: self.grads.cls.iter().map(|g| g * sc).collect(),
            reg: self.grads.reg.iter().map(|g| g * sr).collect(),
            iou: self.grads.iou.iter().map(|g| g * si).collect(),
        };
        (report, grads)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-term losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub total: f64,
    pub cls_count: usize,
    pub reg_count: usize,
    pub iou_count: usize,
}

/// Closed-form ridge fit of the regression branch:
/// `argmin_W sum_i |W f_i - t_i|^2 + lambda |W|^2`, returned as `4 x D`.
pub fn fit_reg_ridge(features: &[&[f64]], targets: &[BoxDeltas], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "ridge lambda {lambda} must be >= 0"
        )));
    }
    if features.is_empty() {
        return Err(Error::OutOfRange(
            "ridge fit needs at least one sample".into(),
        ));
    }
    if features.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "ridge targets",
            expected: features.len(),
            actual: targets.len(),
        });
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "ridge features",
            expected: d,
            actual: bad.len(),
        });
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let t = DMatrix::from_fn(n, 4, |i, k| targets[i].to_array()[k]);
    let mut gram = x.transpose() * &x;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = x.transpose() * t;
    let singular = || Error::Singular("normal equations are rank deficient; use lambda > 0".into());
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if lo.is_nan() || lo <= hi * 1e-7 {
        return Err(singular());
    }
    let w = chol.solve(&rhs); // D x 4
    Ok((0..4)
        .flat_map(|k| (0..d).map(move |j| (k, j)))
        .map(|(k, j)| w[(j, k)])
        .collect())
}
