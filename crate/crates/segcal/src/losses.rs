//! Training objectives: cross-entropy, soft Dice, focal loss, the
//! whole-image confidence penalty, and the two selective entropy
//! regularizers that act only on currently misclassified pixels.
//!
//! Every operation returns the scalar objective value together with the
//! exact gradient with respect to the logits, so the optimizer needs no
//! autodiff. Probabilities are clamped at [`PROB_FLOOR`] before every
//! logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    argmax_channels, ln_floored, softmax_channels, ClassLayout, LabelMap, LogitMap, ProbMap,
    Tensor, PROB_FLOOR,
};

/// Scalar objective value plus its exact gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Tensor,
}

impl LossResult {
    fn zero_like(shape: &[usize]) -> Result<Self> {
        Ok(LossResult {
            value: 0.0,
            grad_logits: Tensor::zeros(shape.to_vec())?,
        })
    }
}

/// Boolean mask of pixels whose argmax prediction disagrees with the label.
#[derive(Debug, Clone)]
pub struct MisclassifiedMask {
    mask: Vec<bool>,
    shape: Vec<usize>,
    count: usize,
}

impl MisclassifiedMask {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// A mask that selects every pixel; turns the selective entropy term
    /// into the whole-image confidence penalty.
    pub fn all(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        MisclassifiedMask {
            mask: vec![true; n],
            shape: shape.to_vec(),
            count: n,
        }
    }
}

/// Base segmentation losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Dice,
    Ce,
    Focal,
}

/// Regularizer attached to the base loss. The wire names follow the
/// experiment-config JSON schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    ConfidencePenalty,
    MeepH,
    MeepKl,
}

/// Full description of one training objective.
///
/// `lambda` weights the selective (masked) terms, `beta` the whole-image
/// confidence penalty; only the weight matching `regularizer` is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub base: BaseLoss,
    pub regularizer: Regularizer,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
}

fn default_beta() -> f64 {
    0.2
}

fn default_focal_gamma() -> f64 {
    2.0
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            base: BaseLoss::Ce,
            regularizer: Regularizer::None,
            lambda: 0.0,
            beta: default_beta(),
            focal_gamma: default_focal_gamma(),
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        let weight = self.weight();
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::InvalidArgument {
                what: "objective weight",
                reason: format!("must be finite and >= 0, got {weight}"),
            });
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return Err(Error::InvalidArgument {
                what: "focal_gamma",
                reason: format!("must be finite and >= 0, got {}", self.focal_gamma),
            });
        }
        Ok(())
    }

    /// The weight that applies to this spec's regularizer.
    pub fn weight(&self) -> f64 {
        match self.regularizer {
            Regularizer::ConfidencePenalty => self.beta,
            _ => self.lambda,
        }
    }

    /// Stable human-readable label, used for file names and CSV rows.
    pub fn label(&self) -> String {
        let base = match self.base {
            BaseLoss::Dice => "dice",
            BaseLoss::Ce => "ce",
            BaseLoss::Focal => "focal",
        };
        match self.regularizer {
            Regularizer::None => base.to_string(),
            Regularizer::ConfidencePenalty => format!("{base}+conf_pen"),
            Regularizer::MeepH => format!("{base}+meep_h"),
            Regularizer::MeepKl => format!("{base}+meep_kl"),
        }
    }
}

/// Dice smoothing constant, applied to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

fn check_logits_labels(logits: &LogitMap, labels: &LabelMap) -> Result<ClassLayout> {
    let layout = ClassLayout::of(logits)?;
    let expected_spatial: usize = labels.shape().iter().skip(1).product();
    let expected_batch = labels.shape().first().copied().unwrap_or(0);
    if expected_batch != layout.batch || expected_spatial != layout.pixels {
        return Err(Error::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    labels.check_range(layout.classes)?;
    Ok(layout)
}

/// Mean over pixels of `-ln p[true class]`, gradient `(p - onehot) / N`.
pub fn cross_entropy(logits: &LogitMap, labels: &LabelMap) -> Result<LossResult> {
    let layout = check_logits_labels(logits, labels)?;
    let probs = softmax_channels(logits)?;
    cross_entropy_from_probs(&probs, labels, layout)
}

fn cross_entropy_from_probs(
    probs: &ProbMap,
    labels: &LabelMap,
    layout: ClassLayout,
) -> Result<LossResult> {
    let n = layout.total_pixels() as f64;
    let p = probs.data();
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let y = labels.data()[b * layout.pixels + px] as usize;
            value -= ln_floored(p[layout.at(b, y, px)]);
            for k in 0..layout.classes {
                let idx = layout.at(b, k, px);
                let onehot = if k == y { 1.0 } else { 0.0 };
                grad[idx] = (p[idx] - onehot) / n;
            }
        }
    }
    Ok(LossResult {
        value: value / n,
        grad_logits: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Negative soft Dice coefficient with squared-term denominator, pooled
/// over the whole batch. For K = 2 it scores the foreground class; for
/// K > 2 it averages the per-class soft Dice over the non-background
/// classes (class 0 is background).
pub fn soft_dice(logits: &LogitMap, labels: &LabelMap) -> Result<LossResult> {
    let layout = check_logits_labels(logits, labels)?;
    let probs = softmax_channels(logits)?;
    let p = probs.data();
    let n_fg_classes = layout.classes - 1;

    let mut value = 0.0;
    // dL/dp per class channel, before the softmax Jacobian.
    let mut dldp = vec![0.0; p.len()];
    for class in 1..layout.classes {
        let mut overlap = 0.0;
        let mut p_sq = 0.0;
        let mut g_sq = 0.0;
        for b in 0..layout.batch {
            for px in 0..layout.pixels {
                let pi = p[layout.at(b, class, px)];
                let gi = if labels.data()[b * layout.pixels + px] as usize == class {
                    1.0
                } else {
                    0.0
                };
                overlap += pi * gi;
                p_sq += pi * pi;
                g_sq += gi;
            }
        }
        let num = 2.0 * overlap + DICE_SMOOTH;
        let den = p_sq + g_sq + DICE_SMOOTH;
        value += 1.0 - num / den;
        let scale = 1.0 / (n_fg_classes as f64 * den * den);
        for b in 0..layout.batch {
            for px in 0..layout.pixels {
                let idx = layout.at(b, class, px);
                let gi = if labels.data()[b * layout.pixels + px] as usize == class {
                    1.0
                } else {
                    0.0
                };
                // d(1 - num/den)/dp_i via the quotient rule
                dldp[idx] += (2.0 * num * p[idx] - 2.0 * gi * den) * scale;
            }
        }
    }
    value /= n_fg_classes as f64;

    let grad = softmax_backward(&probs, &dldp, layout);
    Ok(LossResult {
        value,
        grad_logits: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Mean over pixels of `-(1 - p_t)^gamma * ln p_t`. With `gamma = 0` this
/// is exactly cross-entropy, value and gradient.
pub fn focal_loss(logits: &LogitMap, labels: &LabelMap, gamma: f64) -> Result<LossResult> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArgument {
            what: "focal_gamma",
            reason: format!("must be finite and >= 0, got {gamma}"),
        });
    }
    let layout = check_logits_labels(logits, labels)?;
    let probs = softmax_channels(logits)?;
    let p = probs.data();
    let n = layout.total_pixels() as f64;

    let mut value = 0.0;
    let mut dldp = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let y = labels.data()[b * layout.pixels + px] as usize;
            let pt = p[layout.at(b, y, px)].max(PROB_FLOOR);
            let u = 1.0 - pt;
            let ln_pt = pt.ln();
            value -= u.powf(gamma) * ln_pt;
            // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
            let term1 = if gamma > 0.0 {
                gamma * u.powf(gamma - 1.0) * ln_pt
            } else {
                0.0
            };
            dldp[layout.at(b, y, px)] = (term1 - u.powf(gamma) / pt) / n;
        }
    }
    let grad = softmax_backward(&probs, &dldp, layout);
    Ok(LossResult {
        value: value / n,
        grad_logits: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Pixels whose argmax prediction (ties toward the lowest class index)
/// disagrees with the label. Recomputed from the current predictions at
/// every call.
pub fn misclassified_set(probs: &ProbMap, labels: &LabelMap) -> Result<MisclassifiedMask> {
    let layout = ClassLayout::of(probs)?;
    if labels.len() != layout.total_pixels() {
        return Err(Error::ShapeMismatch {
            left: probs.shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    let pred = argmax_channels(probs)?;
    let mut mask = Vec::with_capacity(labels.len());
    let mut count = 0;
    for (p, y) in pred.data().iter().zip(labels.data()) {
        let wrong = p != y;
        count += wrong as usize;
        mask.push(wrong);
    }
    Ok(MisclassifiedMask {
        mask,
        shape: labels.shape().to_vec(),
        count,
    })
}

/// Shannon entropy averaged over the masked pixels:
/// `-(1/|M|) sum_{i in M} sum_k p_ik ln p_ik`.
///
/// The mask is treated as a constant: no gradient flows through the argmax
/// that built it. An empty mask yields value 0 and a zero gradient.
pub fn entropy_term(probs: &ProbMap, mask: &MisclassifiedMask) -> Result<LossResult> {
    let layout = check_probs_mask(probs, mask)?;
    if mask.count() == 0 {
        return LossResult::zero_like(probs.shape());
    }
    let p = probs.data();
    let inv_m = 1.0 / mask.count() as f64;
    let mut value = 0.0;
    let mut dldp = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            if !mask.mask()[b * layout.pixels + px] {
                continue;
            }
            for k in 0..layout.classes {
                let idx = layout.at(b, k, px);
                let ln_p = ln_floored(p[idx]);
                value -= p[idx] * ln_p;
                // dH/dp = -(ln p + 1) / |M|
                dldp[idx] = -(ln_p + 1.0) * inv_m;
            }
        }
    }
    let grad = softmax_backward(probs, &dldp, layout);
    Ok(LossResult {
        value: value * inv_m,
        grad_logits: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Cross-entropy between the uniform distribution and the masked
/// predictions: `-(1/|M|) sum_{i in M} sum_k (1/K) ln p_ik`.
///
/// Returns the loss (used for optimization) and the diagnostic
/// `kl_value = value - ln K`, which equals the KL divergence from uniform
/// averaged over the mask. Empty mask: value 0, gradient 0, kl_value 0.
pub fn kl_uniform_term(probs: &ProbMap, mask: &MisclassifiedMask) -> Result<(LossResult, f64)> {
    let layout = check_probs_mask(probs, mask)?;
    if mask.count() == 0 {
        return Ok((LossResult::zero_like(probs.shape())?, 0.0));
    }
    let p = probs.data();
    let inv_m = 1.0 / mask.count() as f64;
    let inv_k = 1.0 / layout.classes as f64;
    let mut value = 0.0;
    let mut dldp = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            if !mask.mask()[b * layout.pixels + px] {
                continue;
            }
            for k in 0..layout.classes {
                let idx = layout.at(b, k, px);
                value -= inv_k * ln_floored(p[idx]);
                dldp[idx] = -inv_k * inv_m / p[idx].max(PROB_FLOOR);
            }
        }
    }
    value *= inv_m;
    let grad = softmax_backward(probs, &dldp, layout);
    let kl_value = value - (layout.classes as f64).ln();
    Ok((
        LossResult {
            value,
            grad_logits: Tensor::new(probs.shape().to_vec(), grad)?,
        },
        kl_value,
    ))
}

fn check_probs_mask(probs: &ProbMap, mask: &MisclassifiedMask) -> Result<ClassLayout> {
    let layout = ClassLayout::of(probs)?;
    if mask.mask().len() != layout.total_pixels() {
        return Err(Error::ShapeMismatch {
            left: probs.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    Ok(layout)
}

/// Chain a per-probability gradient through the per-pixel softmax Jacobian:
/// `dL/dz_k = p_k (dL/dp_k - sum_j dL/dp_j p_j)`.
fn softmax_backward(probs: &ProbMap, dldp: &[f64], layout: ClassLayout) -> Vec<f64> {
    let p = probs.data();
    let mut grad = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let mut dot = 0.0;
            for k in 0..layout.classes {
                let idx = layout.at(b, k, px);
                dot += dldp[idx] * p[idx];
            }
            for k in 0..layout.classes {
                let idx = layout.at(b, k, px);
                grad[idx] = p[idx] * (dldp[idx] - dot);
            }
        }
    }
    grad
}

/// Evaluate the full objective: base loss plus the configured regularizer
/// contribution, gradients composed linearly.
///
/// Contributions: none -> 0; confidence penalty -> `-beta * H(all pixels)`;
/// masked entropy -> `-lambda * H(misclassified)`; masked KL-to-uniform ->
/// `+lambda * H(uniform, misclassified)` (adding the cross-entropy to
/// uniform is what pushes masked pixels toward the uniform distribution).
pub fn combined_objective(
    spec: &ObjectiveSpec,
    logits: &LogitMap,
    labels: &LabelMap,
) -> Result<LossResult> {
    combined_objective_impl(spec, logits, labels, None)
}

/// Same as [`combined_objective`] but with the misclassified set pinned by
/// the caller instead of recomputed from the current predictions. Used by
/// finite-difference checks, which must hold the mask constant across the
/// perturbed evaluations.
pub fn combined_objective_with_mask(
    spec: &ObjectiveSpec,
    logits: &LogitMap,
    labels: &LabelMap,
    mask: &MisclassifiedMask,
) -> Result<LossResult> {
    combined_objective_impl(spec, logits, labels, Some(mask))
}

fn combined_objective_impl(
    spec: &ObjectiveSpec,
    logits: &LogitMap,
    labels: &LabelMap,
    frozen_mask: Option<&MisclassifiedMask>,
) -> Result<LossResult> {
    spec.validate()?;
    let mut result = match spec.base {
        BaseLoss::Ce => cross_entropy(logits, labels)?,
        BaseLoss::Dice => soft_dice(logits, labels)?,
        BaseLoss::Focal => focal_loss(logits, labels, spec.focal_gamma)?,
    };
    let weight = spec.weight();
    if matches!(spec.regularizer, Regularizer::None) || weight == 0.0 {
        return Ok(result);
    }
    let probs = softmax_channels(logits)?;
    let (contribution_value, contribution_grad, sign) = match spec.regularizer {
        Regularizer::None => unreachable!(),
        Regularizer::ConfidencePenalty => {
            let all = MisclassifiedMask::all(labels.shape());
            let term = entropy_term(&probs, &all)?;
            (term.value, term.grad_logits, -weight)
        }
        Regularizer::MeepH => {
            let computed;
            let mask = match frozen_mask {
                Some(m) => m,
                None => {
                    computed = misclassified_set(&probs, labels)?;
                    &computed
                }
            };
            let term = entropy_term(&probs, mask)?;
            (term.value, term.grad_logits, -weight)
        }
        Regularizer::MeepKl => {
            let computed;
            let mask = match frozen_mask {
                Some(m) => m,
                None => {
                    computed = misclassified_set(&probs, labels)?;
                    &computed
                }
            };
            let (term, _kl) = kl_uniform_term(&probs, mask)?;
            (term.value, term.grad_logits, weight)
        }
    };
    result.value += sign * contribution_value;
    result.grad_logits.add_scaled(&contribution_grad, sign)?;
    Ok(result)
}
