//! Two-term detection loss and its agreement re-weighted form.
//!
//! The base loss is `L_cls(p, p*) + beta * I * L_loc(t, t*)`, where the
//! indicator `I` is 1 only when the anchor's IoU with its ground truth is
//! strictly above `eta`. The re-weighted loss multiplies both terms by the
//! fused box confidence `c`. Classification and localization terms are
//! pluggable; the defaults are cross-entropy and summed smooth-L1.

use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::fusion::FusedBox;
use crate::geometry::BBox;
use crate::CategoryId;

/// Lower bound applied to the true-class probability inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_ETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    /// Predicted class distribution.
    pub probs: Vec<f64>,
    pub true_class: usize,
    pub pred_offsets: [f64; 4],
    pub target_offsets: [f64; 4],
    pub anchor_gt_iou: f64,
    pub beta: f64,
    pub eta: f64,
    /// Fused-box confidence used as the per-box weight.
    pub confidence: f64,
}

impl LossInputs {
    /// Inputs with default `beta`, `eta` and `confidence = 1`.
    pub fn new(
        probs: Vec<f64>,
        true_class: usize,
        pred_offsets: [f64; 4],
        target_offsets: [f64; 4],
        anchor_gt_iou: f64,
    ) -> Self {
        Self {
            probs,
            true_class,
            pred_offsets,
            target_offsets,
            anchor_gt_iou,
            beta: DEFAULT_BETA,
            eta: DEFAULT_ETA,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.true_class >= self.probs.len() {
            return Err(Error::invalid(format!(
                "true class {} out of range for {} probabilities",
                self.true_class,
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        if self
            .pred_offsets
            .iter()
            .chain(&self.target_offsets)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("box offsets must be finite"));
        }
        if !(0.0..=1.0).contains(&self.anchor_gt_iou) {
            return Err(Error::invalid(format!(
                "anchor IoU {} outside [0, 1]",
                self.anchor_gt_iou
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::invalid(format!(
                "confidence must lie in (0, 1], got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

pub trait ClassificationLoss {
    fn loss(&self, probs: &[f64], true_class: usize) -> f64;
}

pub trait LocalizationLoss {
    fn loss(&self, pred: &[f64; 4], target: &[f64; 4]) -> f64;
}

/// `-ln(max(p[true], PROB_FLOOR))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl CrossEntropy {
    /// Derivative of the loss with respect to `p[true]`.
    pub fn grad_true(&self, p_true: f64) -> f64 {
        if p_true < PROB_FLOOR {
            0.0
        } else {
            -1.0 / p_true
        }
    }
}

impl ClassificationLoss for CrossEntropy {
    fn loss(&self, probs: &[f64], true_class: usize) -> f64 {
        -probs[true_class].max(PROB_FLOOR).ln()
    }
}

/// Smooth-L1 summed over the four offsets: `0.5 d^2` when `|d| < 1`,
/// `|d| - 0.5` otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct SmoothL1;

impl LocalizationLoss for SmoothL1 {
    fn loss(&self, pred: &[f64; 4], target: &[f64; 4]) -> f64 {
        pred.iter()
            .zip(target)
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum()
    }
}

/// 1 when `anchor_gt_iou > eta`, else 0.
pub fn objectness_indicator(anchor_gt_iou: f64, eta: f64) -> u8 {
    u8::from(anchor_gt_iou > eta)
}

/// A detection loss assembled from a classification and a localization term.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetectionLoss<C = CrossEntropy, L = SmoothL1> {
    pub cls: C,
    pub loc: L,
}

impl<C: ClassificationLoss, L: LocalizationLoss> DetectionLoss<C, L> {
    pub fn new(cls: C, loc: L) -> Self {
        Self { cls, loc }
    }

    pub fn base_loss(&self, x: &LossInputs) -> Result<f64> {
        x.validate()?;
        let cls = self.cls.loss(&x.probs, x.true_class);
        let gate = objectness_indicator(x.anchor_gt_iou, x.eta);
        if gate == 0 {
            return Ok(cls);
        }
        Ok(cls + x.beta * self.loc.loss(&x.pred_offsets, &x.target_offsets))
    }

    /// `confidence * base_loss`.
    pub fn earl_loss(&self, x: &LossInputs) -> Result<f64> {
        Ok(x.confidence * self.base_loss(x)?)
    }
}

pub fn base_loss(inputs: &LossInputs) -> Result<f64> {
    DetectionLoss::<CrossEntropy, SmoothL1>::default().base_loss(inputs)
}

pub fn earl_loss(inputs: &LossInputs) -> Result<f64> {
    DetectionLoss::<CrossEntropy, SmoothL1>::default().earl_loss(inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub bbox: BBox,
    pub category: CategoryId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageWeights {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub rows: Vec<WeightRow>,
}

/// Per-box training weights for an external trainer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightExport {
    pub images: Vec<ImageWeights>,
}

impl WeightExport {
    pub fn num_rows(&self) -> usize {
        self.images.iter().map(|i| i.rows.len()).sum()
    }
}

/// One row per fused box, weight = fused confidence.
pub fn export_weights(fused: &[SceneRecord<FusedBox>]) -> Result<WeightExport> {
    let images = fused
        .iter()
        .map(|scene| {
            let rows = scene
                .boxes
                .iter()
                .map(|f| {
                    if !(f.confidence > 0.0 && f.confidence <= 1.0) {
                        return Err(Error::invalid(format!(
                            "image `{}`: confidence {} is not a valid loss weight",
                            scene.image_id, f.confidence
                        )));
                    }
                    Ok(WeightRow {
                        bbox: f.bbox,
                        category: f.category,
                        weight: f.confidence,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageWeights {
                image_id: scene.image_id.clone(),
                width: scene.width,
                height: scene.height,
                rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightExport { images })
}
