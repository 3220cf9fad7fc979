//! Detection mAP over several IoU thresholds and eroded-mask mIoU.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, BoxSet, LabelMap};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalResult {
    pub thresholds: Vec<f32>,
    /// Classes that occur in the ground truth, ascending.
    pub classes: Vec<usize>,
    /// `ap[i][j]`: AP of `classes[i]` at `thresholds[j]`.
    pub ap: Vec<Vec<f64>>,
    pub map: f64,
    /// Precision-recall points `(recall, precision)` per class at the first
    /// threshold.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

impl DetectionEvalResult {
    /// AP of each class averaged over thresholds.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        self.classes
            .iter()
            .zip(&self.ap)
            .map(|(c, row)| (*c, row.iter().sum::<f64>() / row.len().max(1) as f64))
            .collect()
    }
}

/// Area under the precision-recall curve after making precision
/// non-increasing in recall.
pub fn average_precision(tp: &[bool], num_gt: usize) -> (f64, Vec<(f64, f64)>) {
    if num_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += *t as usize;
        curve.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let mut prec: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (i, (r, _)) in curve.iter().enumerate() {
        ap += (r - last_r) * prec[i];
        last_r = *r;
    }
    (ap, curve)
}

/// Per-class, per-threshold AP and their mean over classes present in the
/// ground truth. Score ties keep input order (image, then box).
pub fn compute_map(predictions: &[BoxSet], ground_truths: &[BoxSet], thresholds: &[f32]) -> Result<DetectionEvalResult> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} images",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let mut scored: Vec<(f32, usize, &BBox)> = Vec::new();
    for (img, ps) in predictions.iter().enumerate() {
        for b in ps {
            let s = b.score.ok_or_else(|| Error::InvalidInput(format!("prediction without score in image {img}")))?;
            scored.push((s, img, b));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut classes: Vec<usize> = ground_truths.iter().flatten().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut ap = Vec::with_capacity(classes.len());
    let mut pr_curves = Vec::with_capacity(classes.len());
    for &c in &classes {
        let num_gt = ground_truths.iter().flatten().filter(|b| b.class_id == c).count();
        let preds: Vec<&(f32, usize, &BBox)> = scored.iter().filter(|p| p.2.class_id == c).collect();
        let mut row = Vec::with_capacity(thresholds.len());
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
            let tp: Vec<bool> = preds
                .iter()
                .map(|(_, img, b)| {
                    let mut best: Option<(usize, f32)> = None;
                    for (j, g) in ground_truths[*img].iter().enumerate() {
                        if g.class_id != c || used[*img][j] {
                            continue;
                        }
                        let iou = b.iou(g);
                        if iou >= thr && best.is_none_or(|(_, bi)| iou > bi) {
                            best = Some((j, iou));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            used[*img][j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            let (a, curve) = average_precision(&tp, num_gt);
            if ti == 0 {
                pr_curves.push(curve);
            }
            row.push(a);
        }
        ap.push(row);
    }
    let cells: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 };
    Ok(DetectionEvalResult {
        thresholds: thresholds.to_vec(),
        classes,
        ap,
        map,
        pr_curves,
    })
}

/// Pixels whose whole disc neighbourhood (Euclidean distance ≤ `radius`,
/// clipped to the image) carries one class and no ignore flag.
pub fn erode_valid_mask(gt: &LabelMap, radius: usize) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if gt.is_ignored(y, x) {
                continue;
            }
            let c = gt.get(y, x);
            out[y * w + x] = offsets.iter().all(|(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return true;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                !gt.is_ignored(yy, xx) && gt.get(yy, xx) == c
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEvalResult {
    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub valid_pixels: u64,
}

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, valid: &[bool]) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) || valid.len() != gt.height() * gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}×{}, ground truth {}×{}, mask of {}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width(),
                valid.len()
            )));
        }
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            let (g, p) = (gt.classes()[i] as usize, pred.classes()[i] as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::InvalidInput(format!(
                    "class index {} out of range for {} classes",
                    g.max(p),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn result(&self) -> SegmentationEvalResult {
        let n = self.classes;
        let at = |g: usize, p: usize| self.counts[g * n + p];
        let per_class_iou: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = at(c, c);
                let fn_: u64 = (0..n).map(|p| at(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| at(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        SegmentationEvalResult {
            miou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            per_class_iou,
            valid_pixels: self.counts.iter().sum(),
        }
    }
}

pub fn compute_miou(pred: &LabelMap, gt: &LabelMap, valid: &[bool], class_count: usize) -> Result<SegmentationEvalResult> {
    let mut cm = ConfusionMatrix::new(class_count);
    cm.add(pred, gt, valid)?;
    Ok(cm.result())
}
