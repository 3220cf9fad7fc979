//! Knowledge-distillation losses: soft (logit-level) targets for both heads
//! and feature imitation, uniform (MSE) or weighted by teacher-student
//! prediction (dis)agreement (PDF).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{balanced_l1_masked, check_finite, sigmoid64, BalancedL1Params, DetGrad, LossValue, WithGrad};
use crate::net::{AdapterSet, DetectionOutput, PyramidFeatures};
use crate::tensor::{Graph, Tensor, VarId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    None,
    Mse,
    Pdf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdfDirection {
    /// Emphasise locations where teacher and student already agree.
    #[default]
    WeightAgreement,
    WeightDisagreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub use_soft: bool,
    pub feature_mode: FeatureMode,
    pub temperature: f64,
    pub lambda_soft: f64,
    pub lambda_feat: f64,
    pub pdf_direction: PdfDirection,
    pub det_conf_floor: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            use_soft: false,
            feature_mode: FeatureMode::None,
            temperature: 1.0,
            lambda_soft: 1.0,
            lambda_feat: 1.0,
            pdf_direction: PdfDirection::WeightAgreement,
            det_conf_floor: 0.3,
        }
    }
}

impl DistillConfig {
    pub fn enabled(&self) -> bool {
        self.use_soft || self.feature_mode != FeatureMode::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("distill.temperature must be > 0");
        }
        if self.lambda_soft < 0.0 || self.lambda_feat < 0.0 {
            return bad("distill.lambda_soft and distill.lambda_feat must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.det_conf_floor) {
            return bad("distill.det_conf_floor must lie in [0, 1]");
        }
        Ok(())
    }

    /// Table-row style label for this configuration.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_soft {
            parts.push("+ Soft");
        }
        match self.feature_mode {
            FeatureMode::None => {}
            FeatureMode::Mse => parts.push("+ MSE"),
            FeatureMode::Pdf => parts.push("+ PDF"),
        }
        parts.join(" ")
    }
}

fn softmax_at(x: &[f32], base: usize, stride: usize, c: usize, t: f64, out: &mut [f64]) {
    let m = (0..c)
        .map(|k| x[base + k * stride] as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (k, o) in out.iter_mut().enumerate().take(c) {
        *o = (x[base + k * stride] as f64 / t - m).exp();
        z += *o;
    }
    for o in out.iter_mut().take(c) {
        *o /= z;
    }
}

/// `T² · mean_pixels KL(softmax(teacher/T) ‖ softmax(student/T))` over
/// N×C×H×W logits.
pub fn soft_seg_loss(student: &Tensor, teacher: &Tensor, t: f64) -> Result<WithGrad<Tensor>> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if t <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    check_finite(student.data(), "student segmentation logits")?;
    check_finite(teacher.data(), "teacher segmentation logits")?;
    let (n, c, h, w) = student.dims4();
    let hw = h * w;
    let npix = (n * hw).max(1) as f64;
    let (xs, xt) = (student.data(), teacher.data());
    let mut grad = Tensor::zeros(student.shape());
    let gd = grad.data_mut();
    let mut ps = vec![0.0; c];
    let mut pt = vec![0.0; c];
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            softmax_at(xs, base, hw, c, t, &mut ps);
            softmax_at(xt, base, hw, c, t, &mut pt);
            for k in 0..c {
                if pt[k] > 0.0 {
                    total += pt[k] * (pt[k].ln() - ps[k].max(f64::MIN_POSITIVE).ln());
                }
                gd[base + k * hw] = (t * (ps[k] - pt[k]) / npix) as f32;
            }
        }
    }
    Ok(WithGrad {
        value: LossValue::single("soft_seg", t * t * total / npix, npix),
        grad,
    })
}

/// KL between Bernoulli(q) and Bernoulli(p).
fn binary_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()) } else { 0.0 };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// Soft detection targets: temperature-scaled binary KL over every
/// anchor/class, plus Balanced-L1 towards the teacher's deltas on anchors
/// the teacher is confident about.
pub fn soft_det_loss(
    student: &DetectionOutput,
    teacher: &DetectionOutput,
    t: f64,
    conf_floor: f64,
    bl1: BalancedL1Params,
) -> Result<WithGrad<DetGrad>> {
    if !student.same_geometry(teacher) {
        return Err(Error::Shape("student and teacher anchor geometry differ".into()));
    }
    if t <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    let zs = student.flat_logits();
    let zt = teacher.flat_logits();
    check_finite(&zs, "student class logits")?;
    check_finite(&zt, "teacher class logits")?;
    let m = zs.len().max(1) as f64;
    let mut cls_grad = vec![0.0f32; zs.len()];
    let mut cls = 0.0;
    for i in 0..zs.len() {
        let qs = sigmoid64(zs[i] as f64 / t);
        let qt = sigmoid64(zt[i] as f64 / t);
        cls += binary_kl(qt, qs);
        cls_grad[i] = (t * (qs - qt) / m) as f32;
    }
    let cls = t * t * cls / m;

    let c = teacher.num_classes;
    let dt = teacher.flat_deltas();
    let targets: Vec<Option<[f32; 4]>> = zt
        .chunks(c)
        .zip(dt.chunks(4))
        .map(|(z, d)| {
            let best = z.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
            (sigmoid64(best as f64) >= conf_floor).then(|| [d[0], d[1], d[2], d[3]])
        })
        .collect();
    let reg = balanced_l1_masked(&student.flat_deltas(), &targets, bl1, "soft_reg")?;

    let mut value = LossValue::single("soft_cls", cls, m);
    value.add_weighted(&reg.value, 1.0);
    Ok(WithGrad {
        value,
        grad: DetGrad {
            cls: cls_grad,
            reg: reg.grad,
        },
    })
}

/// Per-level location weights in `[0, 1]`, each level shaped N×H_l×W_l.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub levels: Vec<Tensor>,
}

impl WeightMap {
    pub fn ones_like(feats: &PyramidFeatures) -> Self {
        Self {
            levels: feats
                .levels
                .iter()
                .map(|f| {
                    let (n, _, h, w) = f.dims4();
                    Tensor::full(&[n, h, w], 1.0)
                })
                .collect(),
        }
    }
}

/// Mean over levels of the mean squared difference between adapted student
/// features and teacher features. Gradients are with respect to the adapted
/// student features.
pub fn feature_mse(adapted: &[&Tensor], teacher: &[&Tensor]) -> Result<WithGrad<Vec<Tensor>>> {
    check_levels(adapted, teacher)?;
    let nl = adapted.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(adapted.len());
    for (a, t) in adapted.iter().zip(teacher) {
        check_finite(a.data(), "student features")?;
        check_finite(t.data(), "teacher features")?;
        let n = a.numel().max(1) as f64;
        let mut g = Tensor::zeros(a.shape());
        let mut s = 0.0;
        for ((gv, x), y) in g.data_mut().iter_mut().zip(a.data()).zip(t.data()) {
            let d = *x as f64 - *y as f64;
            s += d * d;
            *gv = (2.0 * d / (n * nl)) as f32;
        }
        total += s / n;
        grads.push(g);
    }
    Ok(WithGrad {
        value: LossValue::single("feat_mse", total / nl, nl),
        grad: grads,
    })
}

fn check_levels(adapted: &[&Tensor], teacher: &[&Tensor]) -> Result<()> {
    if adapted.len() != teacher.len() || adapted.is_empty() {
        return Err(Error::Shape(format!(
            "{} student levels vs {} teacher levels",
            adapted.len(),
            teacher.len()
        )));
    }
    for (a, t) in adapted.iter().zip(teacher) {
        if a.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "adapted student level {:?} vs teacher {:?}",
                a.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Location-weighted feature imitation:
/// `mean_l Σ w·‖a − t‖² / (Σ w · channels)`, zero for an all-zero level.
pub fn pdf_feature(adapted: &[&Tensor], teacher: &[&Tensor], weights: &WeightMap) -> Result<WithGrad<Vec<Tensor>>> {
    check_levels(adapted, teacher)?;
    if weights.levels.len() != adapted.len() {
        return Err(Error::Shape(format!(
            "{} weight levels for {} feature levels",
            weights.levels.len(),
            adapted.len()
        )));
    }
    let nl = adapted.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(adapted.len());
    for ((a, t), wm) in adapted.iter().zip(teacher).zip(&weights.levels) {
        check_finite(a.data(), "student features")?;
        check_finite(t.data(), "teacher features")?;
        let (n, c, h, w) = a.dims4();
        if wm.shape() != [n, h, w] {
            return Err(Error::Shape(format!(
                "weight map {:?} vs feature level {:?}",
                wm.shape(),
                a.shape()
            )));
        }
        let hw = h * w;
        let wsum: f64 = wm.data().iter().map(|v| *v as f64).sum();
        let mut g = Tensor::zeros(a.shape());
        if wsum > 0.0 {
            let denom = wsum * c as f64;
            let mut s = 0.0;
            let gd = g.data_mut();
            for b in 0..n {
                for k in 0..c {
                    for p in 0..hw {
                        let wv = wm.data()[b * hw + p] as f64;
                        let i = (b * c + k) * hw + p;
                        let d = a.data()[i] as f64 - t.data()[i] as f64;
                        s += wv * d * d;
                        gd[i] = (2.0 * wv * d / (denom * nl)) as f32;
                    }
                }
            }
            total += s / denom;
        }
        grads.push(g);
    }
    Ok(WithGrad {
        value: LossValue::single("feat_pdf", total / nl, nl),
        grad: grads,
    })
}

fn normalize_levels(mut d: Vec<Tensor>, dir: PdfDirection) -> WeightMap {
    for lvl in d.iter_mut() {
        let n = lvl.shape()[0];
        let per = lvl.numel() / n.max(1);
        for img in lvl.data_mut().chunks_mut(per.max(1)) {
            let lo = img.iter().fold(f32::INFINITY, |a, b| a.min(*b));
            let hi = img.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
            let span = hi - lo;
            for v in img.iter_mut() {
                let dn = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
                *v = match dir {
                    PdfDirection::WeightAgreement => 1.0 - dn,
                    PdfDirection::WeightDisagreement => dn,
                };
            }
        }
    }
    WeightMap { levels: d }
}

/// PDF weights from detection-head predictions: per location the mean
/// absolute difference of sigmoid probabilities over anchors and classes.
pub fn pdf_weight_map_det(student: &DetectionOutput, teacher: &DetectionOutput, dir: PdfDirection) -> Result<WeightMap> {
    if !student.same_geometry(teacher) {
        return Err(Error::Shape("student and teacher anchor geometry differ".into()));
    }
    let mut levels = Vec::with_capacity(student.cls.len());
    for (s, t) in student.cls.iter().zip(&teacher.cls) {
        check_finite(s.data(), "student class logits")?;
        check_finite(t.data(), "teacher class logits")?;
        let (n, ch, h, w) = s.dims4();
        let hw = h * w;
        let mut d = Tensor::zeros(&[n, h, w]);
        for b in 0..n {
            for p in 0..hw {
                let mut acc = 0.0;
                for k in 0..ch {
                    let i = (b * ch + k) * hw + p;
                    acc += (sigmoid64(s.data()[i] as f64) - sigmoid64(t.data()[i] as f64)).abs();
                }
                d.data_mut()[b * hw + p] = (acc / ch as f64) as f32;
            }
        }
        levels.push(d);
    }
    Ok(normalize_levels(levels, dir))
}

/// PDF weights from segmentation logits: per pixel the mean absolute
/// difference of softmax probabilities, max-pooled onto each level with
/// window = stride.
pub fn pdf_weight_map_seg(
    student: &Tensor,
    teacher: &Tensor,
    level_sizes: &[(usize, usize)],
    strides: &[usize],
    dir: PdfDirection,
) -> Result<WeightMap> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    check_finite(student.data(), "student segmentation logits")?;
    check_finite(teacher.data(), "teacher segmentation logits")?;
    let (n, c, h, w) = student.dims4();
    let hw = h * w;
    let mut ps = vec![0.0; c];
    let mut pt = vec![0.0; c];
    let mut pix = vec![0.0f32; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            softmax_at(student.data(), base, hw, c, 1.0, &mut ps);
            softmax_at(teacher.data(), base, hw, c, 1.0, &mut pt);
            let d: f64 = ps.iter().zip(&pt).map(|(a, b)| (a - b).abs()).sum();
            pix[b * hw + p] = (d / c as f64) as f32;
        }
    }
    if level_sizes.len() != strides.len() {
        return Err(Error::Shape("level sizes and strides differ in length".into()));
    }
    let mut levels = Vec::with_capacity(strides.len());
    for (&(lh, lw), &s) in level_sizes.iter().zip(strides) {
        if s == 0 || h.div_ceil(s) != lh || w.div_ceil(s) != lw {
            return Err(Error::Shape(format!(
                "{h}×{w} predictions cannot be pooled onto a {lh}×{lw} level at stride {s}"
            )));
        }
        let mut d = Tensor::zeros(&[n, lh, lw]);
        for b in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    let mut m = 0.0f32;
                    for py in y * s..((y + 1) * s).min(h) {
                        for px in x * s..((x + 1) * s).min(w) {
                            m = m.max(pix[b * hw + py * w + px]);
                        }
                    }
                    d.data_mut()[(b * lh + y) * lw + x] = m;
                }
            }
        }
        levels.push(d);
    }
    Ok(normalize_levels(levels, dir))
}

/// A feature loss attached to a recorded graph: its value and the seeds
/// for the backward sweep through the adapters into the student.
pub struct GraphLoss {
    pub value: LossValue,
    pub seeds: Vec<(VarId, Tensor)>,
}

/// Run `adapters` on the student features in `g` and compare against the
/// (detached) teacher features; `weights = None` gives plain MSE.
pub fn feature_loss(
    g: &mut Graph,
    student_feats: &[VarId],
    teacher: &PyramidFeatures,
    adapters: &AdapterSet,
    weights: Option<&WeightMap>,
) -> Result<GraphLoss> {
    let adapted = adapters.forward(g, student_feats)?;
    let a: Vec<&Tensor> = adapted.iter().map(|v| g.value(*v)).collect();
    let t: Vec<&Tensor> = teacher.levels.iter().map(|x| &**x).collect();
    let r = match weights {
        Some(wm) => pdf_feature(&a, &t, wm)?,
        None => feature_mse(&a, &t)?,
    };
    Ok(GraphLoss {
        value: r.value,
        seeds: adapted.into_iter().zip(r.grad).collect(),
    })
}

pub fn feature_mse_loss(
    g: &mut Graph,
    student_feats: &[VarId],
    teacher: &PyramidFeatures,
    adapters: &AdapterSet,
) -> Result<GraphLoss> {
    feature_loss(g, student_feats, teacher, adapters, None)
}

pub fn pdf_feature_loss(
    g: &mut Graph,
    student_feats: &[VarId],
    teacher: &PyramidFeatures,
    adapters: &AdapterSet,
    weights: &WeightMap,
) -> Result<GraphLoss> {
    feature_loss(g, student_feats, teacher, adapters, Some(weights))
}

#[cfg(test)]
mod tests;
