use std::collections::BTreeMap;

use super::batch::TaskBatch;
use super::config::ExperimentConfig;
use super::optim::Optimizer;
use crate::data::Task;
use crate::distill::{
    feature_loss, pdf_weight_map_det, pdf_weight_map_seg, soft_det_loss, soft_seg_loss, FeatureMode,
};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, detection_loss, LossValue};
use crate::net::{AdapterSet, ForwardPass, Network, ParamStore};
use crate::tensor::{Tensor, VarId};

/// One value per task.
#[derive(Clone, Debug)]
pub struct ByTask<T> {
    pub detection: Option<T>,
    pub segmentation: Option<T>,
}

impl<T> Default for ByTask<T> {
    fn default() -> Self {
        Self {
            detection: None,
            segmentation: None,
        }
    }
}

impl<T> ByTask<T> {
    pub fn get(&self, t: Task) -> Option<&T> {
        match t {
            Task::Detection => self.detection.as_ref(),
            Task::Segmentation => self.segmentation.as_ref(),
        }
    }

    pub fn get_mut(&mut self, t: Task) -> Option<&mut T> {
        match t {
            Task::Detection => self.detection.as_mut(),
            Task::Segmentation => self.segmentation.as_mut(),
        }
    }

    pub fn set(&mut self, t: Task, v: T) {
        match t {
            Task::Detection => self.detection = Some(v),
            Task::Segmentation => self.segmentation = Some(v),
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub student: Network,
    /// Adapters towards the teacher of each task.
    pub adapters: ByTask<AdapterSet>,
    /// Frozen teachers, keyed by the task they were trained on.
    pub teachers: ByTask<Network>,
    pub optimizer: Optimizer,
}

impl TrainState {
    pub fn new(student: Network, optimizer: Optimizer) -> Self {
        Self {
            iteration: 0,
            student,
            adapters: ByTask::default(),
            teachers: ByTask::default(),
            optimizer,
        }
    }

    /// Parameter groups in a fixed order: student, then adapters for the
    /// detection and segmentation teachers.
    pub fn groups_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut g = vec![self.student.store_mut()];
        if let Some(a) = self.adapters.detection.as_mut() {
            g.push(a.store_mut());
        }
        if let Some(a) = self.adapters.segmentation.as_mut() {
            g.push(a.store_mut());
        }
        g
    }

    pub fn zero_grad(&mut self) {
        for g in self.groups_mut() {
            g.zero_grad();
        }
    }
}

/// Scaled loss terms and the backward seeds they induce on one graph.
#[derive(Default)]
pub struct PassLosses {
    pub seeds: Vec<(VarId, Tensor)>,
    pub log: BTreeMap<String, f64>,
    pub total: f64,
}

impl PassLosses {
    fn add(&mut self, key: &str, v: &LossValue, weight: f64) {
        self.total += weight * v.total;
        *self.log.entry(key.to_string()).or_insert(0.0) += weight * v.total;
        if v.components.len() > 1 {
            for (k, c) in &v.components {
                *self.log.entry(format!("{key}.{k}")).or_insert(0.0) += weight * c;
            }
        }
    }

    fn seed(&mut self, var: VarId, mut grad: Tensor, weight: f64) {
        if weight != 1.0 {
            grad.scale(weight as f32);
        }
        self.seeds.push((var, grad));
    }
}

fn uses_soft(cfg: &ExperimentConfig) -> bool {
    cfg.distill.use_soft
}

/// Heads the student must run for a batch of `task`.
pub fn pass_heads(cfg: &ExperimentConfig, task: Task, distill: bool) -> Vec<Task> {
    let mut heads = vec![task];
    if distill && (uses_soft(cfg) || cfg.distill.feature_mode == FeatureMode::Pdf) {
        heads.push(task.other());
    }
    heads
}

/// Forward a batch through the student (recording into `graph`) and build
/// every loss term of that pass: the hard loss of the batch's own task
/// and, with `distill`, the soft and feature terms against the teacher of
/// the other task.
pub fn build_pass_losses(
    state: &TrainState,
    pass: &mut ForwardPass,
    batch: &TaskBatch,
    cfg: &ExperimentConfig,
    distill: bool,
) -> Result<PassLosses> {
    let task = batch.task;
    let mut out = PassLosses::default();
    match task {
        Task::Detection => {
            let det = pass.detection().ok_or_else(|| Error::InvalidInput("student has no detection head".into()))?;
            let gts: Vec<_> = batch.boxes.iter().collect();
            let l = detection_loss(&det, &gts, &cfg.loss)?;
            out.add("hard_det", &l.value, 1.0);
            let vars = pass.det.clone().expect("detection vars");
            for (v, g) in vars.cls.iter().zip(det.cls_grad_to_levels(&l.grad.cls)) {
                out.seed(*v, g, 1.0);
            }
            for (v, g) in vars.reg.iter().zip(det.reg_grad_to_levels(&l.grad.reg)) {
                out.seed(*v, g, 1.0);
            }
        }
        Task::Segmentation => {
            let logits = pass
                .segmentation()
                .ok_or_else(|| Error::InvalidInput("student has no segmentation head".into()))?;
            let labels: Vec<_> = batch.labels.iter().collect();
            let l = cross_entropy_loss(logits, &labels)?;
            out.add("hard_seg", &l.value, 1.0);
            out.seed(pass.seg.expect("seg var"), l.grad, 1.0);
        }
    }
    if !distill {
        return Ok(out);
    }
    let other = task.other();
    let d = &cfg.distill;
    let teacher = state
        .teachers
        .get(other)
        .ok_or_else(|| Error::Config(format!("distillation needs a {other} teacher")))?;
    let need_preds = d.use_soft || d.feature_mode == FeatureMode::Pdf;
    let theads: Vec<Task> = if need_preds { vec![other] } else { vec![] };
    let tpass = teacher.forward(&batch.images, &theads)?;
    let tag = match other {
        Task::Detection => "det",
        Task::Segmentation => "seg",
    };

    if d.use_soft {
        match other {
            Task::Segmentation => {
                let l = soft_seg_loss(pass.segmentation().expect("seg head"), tpass.segmentation().expect("teacher seg"), d.temperature)?;
                out.add("soft_seg", &l.value, d.lambda_soft);
                out.seed(pass.seg.expect("seg var"), l.grad, d.lambda_soft);
            }
            Task::Detection => {
                let s = pass.detection().expect("det head");
                let t = tpass.detection().expect("teacher det");
                let l = soft_det_loss(&s, &t, d.temperature, d.det_conf_floor, cfg.loss.balanced_l1)?;
                out.add("soft_det", &l.value, d.lambda_soft);
                let vars = pass.det.clone().expect("detection vars");
                for (v, g) in vars.cls.iter().zip(s.cls_grad_to_levels(&l.grad.cls)) {
                    out.seed(*v, g, d.lambda_soft);
                }
                for (v, g) in vars.reg.iter().zip(s.reg_grad_to_levels(&l.grad.reg)) {
                    out.seed(*v, g, d.lambda_soft);
                }
            }
        }
    }

    if d.feature_mode != FeatureMode::None {
        let adapters = state
            .adapters
            .get(other)
            .ok_or_else(|| Error::Config(format!("no adapters for the {other} teacher")))?;
        let weights = if d.feature_mode == FeatureMode::Pdf {
            Some(match other {
                Task::Segmentation => {
                    let sizes: Vec<(usize, usize)> = pass
                        .features
                        .iter()
                        .map(|f| {
                            let (_, _, h, w) = pass.graph.value(*f).dims4();
                            (h, w)
                        })
                        .collect();
                    pdf_weight_map_seg(
                        pass.segmentation().expect("seg head"),
                        tpass.segmentation().expect("teacher seg"),
                        &sizes,
                        &state.student.spec().pyramid_strides,
                        d.pdf_direction,
                    )?
                }
                Task::Detection => pdf_weight_map_det(
                    &pass.detection().expect("det head"),
                    &tpass.detection().expect("teacher det"),
                    d.pdf_direction,
                )?,
            })
        } else {
            None
        };
        let feats = pass.features.clone();
        let l = feature_loss(&mut pass.graph, &feats, &tpass.features(), adapters, weights.as_ref())?;
        out.add(&format!("feat_{tag}"), &l.value, d.lambda_feat);
        for (v, g) in l.seeds {
            out.seed(v, g, d.lambda_feat);
        }
    }
    Ok(out)
}

fn divergence(iteration: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            iteration,
            detail: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Forward + losses + backward for one batch; gradients are added to the
/// student and adapter buffers (no update).
pub fn accumulate_pass(
    state: &mut TrainState,
    batch: &TaskBatch,
    cfg: &ExperimentConfig,
    distill: bool,
) -> Result<BTreeMap<String, f64>> {
    let it = state.iteration;
    let heads = pass_heads(cfg, batch.task, distill);
    let mut pass = state.student.forward(&batch.images, &heads).map_err(|e| divergence(it, e))?;
    let losses = build_pass_losses(state, &mut pass, batch, cfg, distill).map_err(|e| divergence(it, e))?;
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            iteration: it,
            detail: format!("{} loss is not finite", batch.task),
        });
    }
    let seeds: Vec<(VarId, &Tensor)> = losses.seeds.iter().map(|(v, t)| (*v, t)).collect();
    let grads = pass.graph.backward(&seeds);
    state.student.accumulate(&grads);
    if distill {
        if let Some(a) = state.adapters.get_mut(batch.task.other()) {
            a.accumulate(&grads);
        }
    }
    Ok(losses.log)
}

/// Apply the optimizer to the accumulated gradients, clear them and
/// advance the iteration counter.
pub fn apply_update(state: &mut TrainState, cfg: &ExperimentConfig) -> Result<()> {
    let lr = cfg.schedule.lr_at(state.iteration);
    let it = state.iteration;
    let mut opt = std::mem::replace(&mut state.optimizer, Optimizer::new(&cfg.schedule));
    let r = opt.step(&mut state.groups_mut(), lr);
    state.optimizer = opt;
    r.map_err(|e| divergence(it, e))?;
    state.zero_grad();
    state.iteration += 1;
    Ok(())
}

fn total_of(log: &BTreeMap<String, f64>) -> f64 {
    log.iter().filter(|(k, _)| !k.contains('.')).map(|(_, v)| v).sum()
}

/// Detection pass, segmentation pass, one update.
pub fn partial_mtl_iteration(
    state: &mut TrainState,
    det_batch: &TaskBatch,
    seg_batch: &TaskBatch,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<String, f64>> {
    if det_batch.task != Task::Detection || seg_batch.task != Task::Segmentation {
        return Err(Error::InvalidInput("expected a detection batch and a segmentation batch".into()));
    }
    let distill = cfg.distill.enabled();
    let mut log = accumulate_pass(state, det_batch, cfg, distill)?;
    log.extend(accumulate_pass(state, seg_batch, cfg, distill)?);
    log.insert("total".into(), total_of(&log));
    apply_update(state, cfg)?;
    Ok(log)
}

/// One supervised pass and update on a single task.
pub fn single_task_iteration(state: &mut TrainState, batch: &TaskBatch, cfg: &ExperimentConfig) -> Result<BTreeMap<String, f64>> {
    let mut log = accumulate_pass(state, batch, cfg, false)?;
    log.insert("total".into(), total_of(&log));
    apply_update(state, cfg)?;
    Ok(log)
}
