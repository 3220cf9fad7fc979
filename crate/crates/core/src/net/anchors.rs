//! Anchor generation, box coding and anchor-to-ground-truth assignment.

use super::spec::AnchorConfig;
use crate::data::{iou_xyxy, BBox};

/// `[x_min, y_min, x_max, y_max]` in input pixels.
pub type Anchor = [f32; 4];

/// Anchors for each level, ordered by row, column, then anchor index
/// `ratio_index * scales.len() + scale_index`.
pub fn generate_anchors(
    level_sizes: &[(usize, usize)],
    strides: &[usize],
    cfg: &AnchorConfig,
) -> Vec<Vec<Anchor>> {
    level_sizes
        .iter()
        .zip(strides)
        .map(|(&(h, w), &stride)| {
            let mut shapes = Vec::with_capacity(cfg.per_location());
            for &r in &cfg.ratios {
                for &s in &cfg.scales {
                    let size = cfg.base_scale * stride as f32 * s;
                    shapes.push((size / r.sqrt(), size * r.sqrt()));
                }
            }
            let mut out = Vec::with_capacity(h * w * shapes.len());
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f32 + 0.5) * stride as f32;
                    let cy = (i as f32 + 0.5) * stride as f32;
                    for &(aw, ah) in &shapes {
                        out.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
                    }
                }
            }
            out
        })
        .collect()
}

/// Largest log-scale change allowed when decoding widths and heights.
pub const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

/// Centre/size offsets of `gt` relative to `anchor`, normalized by the
/// anchor's size.
pub fn encode(anchor: &Anchor, gt: &Anchor) -> [f32; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gx, gy) = (gt[0] + gw / 2.0, gt[1] + gh / 2.0);
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

pub fn decode(anchor: &Anchor, d: &[f32; 4]) -> Anchor {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { class: usize, gt: usize },
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Encoded regression targets; zero for non-positive anchors.
    pub targets: Vec<[f32; 4]>,
    /// Highest IoU of each anchor against any ground truth.
    pub max_iou: Vec<f32>,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }
}

fn xyxy(b: &BBox) -> Anchor {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

/// Label anchors against ground truth.
///
/// An anchor is positive when its best IoU reaches `pos_iou`, negative when
/// it stays below `neg_iou` and ignored otherwise. Every ground-truth box
/// additionally claims the anchor(s) that overlap it most, provided that
/// overlap is non-zero, so small objects are never left without a positive.
pub fn assign_targets(
    anchors: &[Anchor],
    gt: &[BBox],
    pos_iou: f32,
    neg_iou: f32,
) -> AnchorAssignment {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut targets = vec![[0.0f32; 4]; n];
    let mut max_iou = vec![0.0f32; n];
    if gt.is_empty() {
        return AnchorAssignment {
            labels,
            targets,
            max_iou,
        };
    }
    let gts: Vec<Anchor> = gt.iter().map(xyxy).collect();
    let mut iou = vec![0.0f32; n * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            iou[i * gts.len() + j] = iou_xyxy(*a, *g);
        }
    }
    let mut best_for_gt = vec![0.0f32; gts.len()];
    for i in 0..n {
        let row = &iou[i * gts.len()..(i + 1) * gts.len()];
        let (arg, &m) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
        max_iou[i] = m;
        labels[i] = if m >= pos_iou {
            AnchorLabel::Positive {
                class: gt[arg].class_id,
                gt: arg,
            }
        } else if m < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
        for (j, v) in row.iter().enumerate() {
            best_for_gt[j] = best_for_gt[j].max(*v);
        }
    }
    for (j, &best) in best_for_gt.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for i in 0..n {
            if iou[i * gts.len() + j] == best {
                labels[i] = AnchorLabel::Positive {
                    class: gt[j].class_id,
                    gt: j,
                };
            }
        }
    }
    for i in 0..n {
        if let AnchorLabel::Positive { gt: j, .. } = labels[i] {
            targets[i] = encode(&anchors[i], &gts[j]);
        }
    }
    AnchorAssignment {
        labels,
        targets,
        max_iou,
    }
}
