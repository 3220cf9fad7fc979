//! Supervised task losses. Every loss returns its value together with the
//! gradient of the reported total with respect to the raw network outputs,
//! which is what the training loop seeds into the backward sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BoxSet, LabelMap};
use crate::error::{Error, Result};
use crate::net::{assign_targets, AnchorAssignment, AnchorLabel, DetectionOutput};
use crate::tensor::Tensor;

/// A scalar loss with its named parts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub normalizer: f64,
}

impl LossValue {
    pub fn single(name: &str, total: f64, normalizer: f64) -> Self {
        Self {
            total,
            components: BTreeMap::from([(name.to_string(), total)]),
            normalizer,
        }
    }

    pub fn zero(name: &str) -> Self {
        Self::single(name, 0.0, 1.0)
    }

    /// Fold `other` into `self` with weight `w` (components scaled, keys
    /// summed).
    pub fn add_weighted(&mut self, other: &LossValue, w: f64) {
        self.total += w * other.total;
        for (k, v) in &other.components {
            *self.components.entry(k.clone()).or_insert(0.0) += w * v;
        }
    }
}

/// A loss value and its gradient.
#[derive(Clone, Debug)]
pub struct WithGrad<G> {
    pub value: LossValue,
    pub grad: G,
}

pub(crate) fn check_finite(xs: &[f32], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit against a binary target, and its derivative.
pub fn focal_term(z: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    // p_t and ln p_t straight from the logit
    let (s, zt) = if target { (1.0, z) } else { (-1.0, -z) };
    let pt = sigmoid64(zt);
    let ln_pt = -softplus(-zt);
    let q = 1.0 - pt;
    let at = if target { alpha } else { 1.0 - alpha };
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -at * qg * ln_pt;
    let grad = s * at * (gamma * qg * pt * ln_pt - qg * q);
    (loss, grad)
}

/// Sigmoid focal loss over N×anchors×classes logits, one assignment per
/// image. Ignored anchors contribute nothing; the sum is divided by
/// `max(1, positives)` over the whole batch.
pub fn focal_loss(
    logits: &[f32],
    num_classes: usize,
    assignments: &[AnchorAssignment],
    alpha: f64,
    gamma: f64,
) -> Result<WithGrad<Vec<f32>>> {
    check_finite(logits, "class logits")?;
    let n_anchors = assignments.first().map_or(0, |a| a.labels.len());
    if logits.len() != assignments.len() * n_anchors * num_classes {
        return Err(Error::Shape(format!(
            "{} logits for {} images × {n_anchors} anchors × {num_classes} classes",
            logits.len(),
            assignments.len()
        )));
    }
    let positives: usize = assignments.iter().map(AnchorAssignment::num_positive).sum();
    let norm = positives.max(1) as f64;
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0;
    for (b, asg) in assignments.iter().enumerate() {
        for (a, label) in asg.labels.iter().enumerate() {
            let positive_class = match label {
                AnchorLabel::Ignored => continue,
                AnchorLabel::Positive { class, .. } => Some(*class),
                AnchorLabel::Negative => None,
            };
            let base = (b * n_anchors + a) * num_classes;
            for k in 0..num_classes {
                let (l, g) = focal_term(
                    logits[base + k] as f64,
                    positive_class == Some(k),
                    alpha,
                    gamma,
                );
                total += l;
                grad[base + k] = (g / norm) as f32;
            }
        }
    }
    Ok(WithGrad {
        value: LossValue::single("focal", total / norm, norm),
        grad,
    })
}

/// The piecewise Balanced-L1 function of a non-negative residual and its
/// derivative.
pub fn balanced_l1(x: f64, alpha: f64, gamma: f64, beta: f64) -> (f64, f64) {
    let b = (gamma / alpha).exp() - 1.0;
    let low = |x: f64| (alpha / b) * (b * x + 1.0) * (b * x + 1.0).ln() - alpha * x;
    if x < beta {
        (low(x), alpha * (b * x + 1.0).ln())
    } else {
        let c = low(beta) - gamma * beta;
        (gamma * x + c, gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancedL1Params {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for BalancedL1Params {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 1.5,
            beta: 1.0,
        }
    }
}

/// Balanced-L1 between predicted and target deltas summed over coordinates
/// of the selected anchors, divided by `max(1, count)`. `targets[i]` is
/// `None` for anchors that do not contribute.
pub fn balanced_l1_masked(
    deltas: &[f32],
    targets: &[Option<[f32; 4]>],
    p: BalancedL1Params,
    name: &str,
) -> Result<WithGrad<Vec<f32>>> {
    check_finite(deltas, "box deltas")?;
    if deltas.len() != targets.len() * 4 {
        return Err(Error::Shape(format!(
            "{} deltas for {} anchors",
            deltas.len(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let norm = count.max(1) as f64;
    let mut grad = vec![0.0f32; deltas.len()];
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        check_finite(t, "box targets")?;
        for k in 0..4 {
            let r = deltas[i * 4 + k] as f64 - t[k] as f64;
            let (l, g) = balanced_l1(r.abs(), p.alpha, p.gamma, p.beta);
            total += l;
            grad[i * 4 + k] = (r.signum() * g / norm) as f32;
        }
    }
    Ok(WithGrad {
        value: LossValue::single(name, total / norm, norm),
        grad,
    })
}

/// Balanced-L1 over N×anchors×4 deltas against the positive anchors'
/// encoded targets.
pub fn balanced_l1_loss(
    deltas: &[f32],
    assignments: &[AnchorAssignment],
    p: BalancedL1Params,
) -> Result<WithGrad<Vec<f32>>> {
    let targets: Vec<Option<[f32; 4]>> = assignments
        .iter()
        .flat_map(|a| {
            a.labels.iter().zip(&a.targets).map(|(l, t)| match l {
                AnchorLabel::Positive { .. } => Some(*t),
                _ => None,
            })
        })
        .collect();
    balanced_l1_masked(deltas, &targets, p, "balanced_l1")
}

/// Mean softmax cross-entropy over non-ignored pixels of an N×C×H×W batch.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[&LabelMap]) -> Result<WithGrad<Tensor>> {
    let (n, c, h, w) = logits.dims4();
    check_finite(logits.data(), "segmentation logits")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} label maps for batch of {n}", labels.len())));
    }
    let hw = h * w;
    let mut valid = 0usize;
    for lm in labels {
        if (lm.height(), lm.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "label map {}×{} vs logits {h}×{w}",
                lm.height(),
                lm.width()
            )));
        }
        for p in 0..hw {
            if let Some(k) = lm.get_index(p) {
                if k as usize >= c {
                    return Err(Error::InvalidInput(format!(
                        "label {k} out of range for {c} classes"
                    )));
                }
                valid += 1;
            }
        }
    }
    let norm = valid.max(1) as f64;
    let x = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut total = 0.0;
    let mut probs = vec![0.0f64; c];
    for (b, lm) in labels.iter().enumerate() {
        for p in 0..hw {
            let Some(k) = lm.get_index(p) else { continue };
            let at = |j: usize| (b * c + j) * hw + p;
            let m = (0..c).map(|j| x[at(j)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(j)] as f64 - m).exp();
                z += *pr;
            }
            total += z.ln() + m - x[at(k as usize)] as f64;
            for (j, pr) in probs.iter().enumerate() {
                let t = if j == k as usize { 1.0 } else { 0.0 };
                gd[at(j)] = ((pr / z - t) / norm) as f32;
            }
        }
    }
    Ok(WithGrad {
        value: LossValue::single("cross_entropy", total / norm, norm),
        grad,
    })
}

/// Hyperparameters of the supervised detection loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetLossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub balanced_l1: BalancedL1Params,
    pub pos_iou: f32,
    pub neg_iou: f32,
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            balanced_l1: BalancedL1Params::default(),
            pos_iou: 0.5,
            neg_iou: 0.4,
            cls_weight: 1.0,
            reg_weight: 1.0,
        }
    }
}

impl DetLossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal_alpha must lie in (0, 1)");
        }
        if self.focal_gamma < 0.0 {
            return bad("focal_gamma must be >= 0");
        }
        let p = &self.balanced_l1;
        if !(p.alpha > 0.0 && p.gamma > 0.0 && p.beta > 0.0) {
            return bad("balanced_l1 alpha, gamma and beta must be positive");
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return bad("need 0 <= neg_iou <= pos_iou <= 1");
        }
        Ok(())
    }
}

/// Gradients of a detection loss with respect to the flattened head
/// outputs (see [`DetectionOutput::flat_logits`]).
#[derive(Clone, Debug)]
pub struct DetGrad {
    pub cls: Vec<f32>,
    pub reg: Vec<f32>,
}

/// Focal + Balanced-L1 against ground-truth boxes, one box set per image.
pub fn detection_loss(
    det: &DetectionOutput,
    gts: &[&BoxSet],
    cfg: &DetLossConfig,
) -> Result<WithGrad<DetGrad>> {
    if gts.len() != det.batch_size() {
        return Err(Error::Shape(format!(
            "{} box sets for batch of {}",
            gts.len(),
            det.batch_size()
        )));
    }
    let assignments: Vec<AnchorAssignment> = gts
        .iter()
        .map(|g| assign_targets(&det.anchors, g, cfg.pos_iou, cfg.neg_iou))
        .collect();
    let focal = focal_loss(
        &det.flat_logits(),
        det.num_classes,
        &assignments,
        cfg.focal_alpha,
        cfg.focal_gamma,
    )?;
    let bl1 = balanced_l1_loss(&det.flat_deltas(), &assignments, cfg.balanced_l1)?;
    let mut value = LossValue {
        normalizer: focal.value.normalizer,
        ..LossValue::default()
    };
    value.add_weighted(&focal.value, cfg.cls_weight);
    value.add_weighted(&bl1.value, cfg.reg_weight);
    let scale = |g: Vec<f32>, w: f64| g.into_iter().map(|x| x * w as f32).collect();
    Ok(WithGrad {
        value,
        grad: DetGrad {
            cls: scale(focal.grad, cfg.cls_weight),
            reg: scale(bl1.grad, cfg.reg_weight),
        },
    })
}
