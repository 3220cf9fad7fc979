use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::data::{BoxSet, LabelMap, LoadedDataset, Task};
use crate::error::{Error, Result};
use crate::eval::{
    compute_map, default_thresholds, erode_valid_mask, ConfusionMatrix, DetectionEvalResult, SegmentationEvalResult,
};
use crate::net::{decode_and_nms, Network};
use crate::tensor::Tensor;

/// Metrics of one evaluation round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionEvalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationEvalResult>,
}

impl EvalReport {
    pub fn headline(&self, task: Task) -> Option<f64> {
        match task {
            Task::Detection => self.detection.as_ref().map(|d| d.map),
            Task::Segmentation => self.segmentation.as_ref().map(|s| s.miou),
        }
    }
}

fn chunks(ds: &LoadedDataset, cfg: &EvalConfig) -> Vec<(usize, Tensor)> {
    let n = if cfg.max_images == 0 { ds.len() } else { cfg.max_images.min(ds.len()) };
    (0..n)
        .step_by(cfg.batch_size)
        .map(|start| {
            let end = (start + cfg.batch_size).min(n);
            let items: Vec<Tensor> = ds.images[start..end]
                .iter()
                .map(|t| {
                    let s = t.shape();
                    t.clone().reshape(&[1, s[0], s[1], s[2]])
                })
                .collect();
            (start, Tensor::stack_batch(&items))
        })
        .collect()
}

fn require_head(net: &Network, task: Task) -> Result<()> {
    if net.spec().has_head(task) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("checkpoint has no {task} head")))
    }
}

/// Post-processed detections for every evaluated chip.
pub fn predict_boxes(net: &Network, ds: &LoadedDataset, cfg: &EvalConfig) -> Result<Vec<BoxSet>> {
    require_head(net, Task::Detection)?;
    let mut out = Vec::new();
    for (_, batch) in chunks(ds, cfg) {
        let (n, _, h, w) = batch.dims4();
        let pass = net.forward(&batch, &[Task::Detection])?;
        let det = pass.detection().expect("detection head");
        for i in 0..n {
            out.push(decode_and_nms(&det, i, (h, w), &cfg.postprocess));
        }
    }
    Ok(out)
}

pub fn evaluate_detection(net: &Network, ds: &LoadedDataset, cfg: &EvalConfig) -> Result<DetectionEvalResult> {
    let preds = predict_boxes(net, ds, cfg)?;
    compute_map(&preds, &ds.boxes[..preds.len()], &default_thresholds())
}

/// Arg-max class maps for every evaluated chip.
pub fn predict_masks(net: &Network, ds: &LoadedDataset, cfg: &EvalConfig) -> Result<Vec<LabelMap>> {
    require_head(net, Task::Segmentation)?;
    let c = net.spec().seg_classes;
    let mut out = Vec::new();
    for (_, batch) in chunks(ds, cfg) {
        let pass = net.forward(&batch, &[Task::Segmentation])?;
        let logits = pass.segmentation().expect("segmentation head");
        let (n, _, h, w) = logits.dims4();
        let hw = h * w;
        for b in 0..n {
            let classes: Vec<u8> = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if logits.data()[(b * c + k) * hw + p] > logits.data()[(b * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(LabelMap::new(h, w, classes, vec![false; hw], c as u8)?);
        }
    }
    Ok(out)
}

pub fn evaluate_segmentation(net: &Network, ds: &LoadedDataset, cfg: &EvalConfig) -> Result<SegmentationEvalResult> {
    let preds = predict_masks(net, ds, cfg)?;
    let mut cm = ConfusionMatrix::new(net.spec().seg_classes);
    for (p, gt) in preds.iter().zip(&ds.labels) {
        let gt = gt
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset `{}` has no masks", ds.name)))?;
        cm.add(p, gt, &erode_valid_mask(gt, cfg.erosion_radius))?;
    }
    Ok(cm.result())
}

pub fn evaluate_task(net: &Network, ds: &LoadedDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(match ds.task {
        Task::Detection => EvalReport {
            detection: Some(evaluate_detection(net, ds, cfg)?),
            segmentation: None,
        },
        Task::Segmentation => EvalReport {
            detection: None,
            segmentation: Some(evaluate_segmentation(net, ds, cfg)?),
        },
    })
}
