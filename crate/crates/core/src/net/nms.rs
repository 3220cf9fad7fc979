use serde::{Deserialize, Serialize};

use super::anchors::decode;
use super::DetectionOutput;
use crate::data::{BBox, BoxSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcess {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub max_dets: usize,
    /// Candidates kept (by score) before suppression.
    pub pre_nms_top_k: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            pre_nms_top_k: 1000,
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy suppression within each class. Input order breaks score ties;
/// returns kept indices ordered by descending score.
pub fn nms(boxes: &[BBox], iou_thresh: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = boxes[a].score.unwrap_or(0.0);
        let sb = boxes[b].score.unwrap_or(0.0);
        sb.total_cmp(&sa)
    });
    let mut keep: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &keep {
            if boxes[k].class_id == boxes[i].class_id && boxes[k].iou(&boxes[i]) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(i);
    }
    keep
}

/// Scores, decoded boxes and per-class NMS for image `n` of a batch.
pub fn decode_and_nms(
    det: &DetectionOutput,
    n: usize,
    image_hw: (usize, usize),
    pp: &PostProcess,
) -> BoxSet {
    let logits = det.image_logits(n);
    let deltas = det.image_deltas(n);
    let c = det.num_classes;
    let (h, w) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut cand: Vec<(f32, usize, usize)> = Vec::new();
    for (a, row) in logits.chunks(c).enumerate() {
        for (k, &z) in row.iter().enumerate() {
            let s = sigmoid(z);
            if s >= pp.score_thresh {
                cand.push((s, a, k));
            }
        }
    }
    cand.sort_by(|x, y| y.0.total_cmp(&x.0));
    cand.truncate(pp.pre_nms_top_k);
    let boxes: Vec<BBox> = cand
        .iter()
        .map(|&(s, a, k)| {
            let d = decode(&det.anchors[a], &deltas[a]);
            BBox::new(
                k,
                d[0].clamp(0.0, w),
                d[1].clamp(0.0, h),
                d[2].clamp(0.0, w),
                d[3].clamp(0.0, h),
            )
            .with_score(s)
        })
        .filter(BBox::is_valid)
        .collect();
    let mut out: BoxSet = nms(&boxes, pp.nms_iou)
        .into_iter()
        .map(|i| boxes[i])
        .collect();
    out.truncate(pp.max_dets);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_is_suppressed() {
        let a = BBox::new(0, 0.0, 0.0, 10.0, 10.0).with_score(0.8);
        let b = BBox::new(0, 0.0, 0.0, 10.0, 10.0).with_score(0.9);
        assert_eq!(nms(&[a, b], 0.5), vec![1]);
    }

    #[test]
    fn different_classes_do_not_suppress() {
        let a = BBox::new(0, 0.0, 0.0, 10.0, 10.0).with_score(0.8);
        let b = BBox::new(1, 0.0, 0.0, 10.0, 10.0).with_score(0.9);
        assert_eq!(nms(&[a, b], 0.5), vec![1, 0]);
    }
}
