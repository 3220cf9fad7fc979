use std::collections::BTreeMap;

use super::config::{OptimizerKind, Schedule};
use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD with momentum or Adam over several parameter groups (student,
/// adapters). Weight decay applies to convolution weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: u64,
    m: Vec<Vec<Tensor>>,
    v: Vec<Vec<Tensor>>,
}

impl Optimizer {
    pub fn new(s: &Schedule) -> Self {
        Self {
            kind: s.optimizer,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            clip_norm: s.clip_norm,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, groups: &[&mut ParamStore]) {
        let zeros = |g: &ParamStore| (0..g.len()).map(|i| Tensor::zeros(g.value(i).shape())).collect::<Vec<_>>();
        while self.m.len() < groups.len() {
            let g = &groups[self.m.len()];
            self.m.push(zeros(g));
            if self.kind == OptimizerKind::Adam {
                self.v.push(zeros(g));
            }
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(groups: &[&mut ParamStore]) -> f64 {
        groups
            .iter()
            .flat_map(|g| (0..g.len()).map(move |i| g.grad(i).sum_sq()))
            .sum::<f64>()
            .sqrt()
    }

    /// One update from the accumulated gradients; gradients are left in
    /// place (the caller zeroes them).
    pub fn step(&mut self, groups: &mut [&mut ParamStore], lr: f64) -> Result<()> {
        self.ensure_state(groups);
        let norm = Self::grad_norm(groups);
        if !norm.is_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let t = self.steps as i32;
        for (gi, store) in groups.iter_mut().enumerate() {
            if store.is_frozen() {
                continue;
            }
            for pi in 0..store.len() {
                let decay = if store.name(pi).ends_with(".weight") { self.weight_decay } else { 0.0 };
                let grad: Vec<f64> = store
                    .grad(pi)
                    .data()
                    .iter()
                    .zip(store.value(pi).data())
                    .map(|(g, w)| *g as f64 * clip + decay * *w as f64)
                    .collect();
                match self.kind {
                    OptimizerKind::Sgd => {
                        let m = self.m[gi][pi].data_mut();
                        for (mv, g) in m.iter_mut().zip(&grad) {
                            *mv = (self.momentum * *mv as f64 + g) as f32;
                        }
                        let m = self.m[gi][pi].data();
                        for (w, mv) in store.value_mut(pi).data_mut().iter_mut().zip(m) {
                            *w = (*w as f64 - lr * *mv as f64) as f32;
                        }
                    }
                    OptimizerKind::Adam => {
                        let bc1 = 1.0 - ADAM_BETA1.powi(t);
                        let bc2 = 1.0 - ADAM_BETA2.powi(t);
                        let (m, v) = (&mut self.m[gi][pi], &mut self.v[gi][pi]);
                        let w = store.value_mut(pi).data_mut();
                        for (k, g) in grad.iter().enumerate() {
                            let mk = ADAM_BETA1 * m.data()[k] as f64 + (1.0 - ADAM_BETA1) * g;
                            let vk = ADAM_BETA2 * v.data()[k] as f64 + (1.0 - ADAM_BETA2) * g * g;
                            m.data_mut()[k] = mk as f32;
                            v.data_mut()[k] = vk as f32;
                            let upd = lr * (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
                            w[k] = (w[k] as f64 - upd) as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, state) in [("m", &self.m), ("v", &self.v)] {
            for (g, ts) in state.iter().enumerate() {
                for (i, t) in ts.iter().enumerate() {
                    out.insert(format!("opt/{name}/{g}/{i:05}"), t.clone());
                }
            }
        }
        out
    }

    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>, groups: &[&mut ParamStore], steps: u64) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.steps = steps;
        if steps == 0 {
            return Ok(());
        }
        self.ensure_state(groups);
        for (name, state) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (g, ts) in state.iter_mut().enumerate() {
                for (i, t) in ts.iter_mut().enumerate() {
                    let key = format!("opt/{name}/{g}/{i:05}");
                    let src = map
                        .get(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                    if src.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                    }
                    *t = src.clone();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32], grads: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p.weight", Tensor::from_vec(&[vals.len()], vals.to_vec()));
        s.grad_mut(0).data_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let sched = Schedule {
            momentum: 0.5,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&sched);
        let mut s = store(&[1.0, 2.0], &[0.5, -1.0]);
        opt.step(&mut [&mut s], 0.1).unwrap();
        assert_eq!(s.value(0).data(), &[0.95, 2.1]);
        opt.step(&mut [&mut s], 0.1).unwrap();
        // m = 0.5*0.5 + 0.5 = 0.75; w = 0.95 - 0.075
        assert!((s.value(0).data()[0] - 0.875).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let sched = Schedule {
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&sched);
        let mut s = store(&[0.0, 0.0], &[3.0, -0.01]);
        opt.step(&mut [&mut s], 0.01).unwrap();
        assert!((s.value(0).data()[0] + 0.01).abs() < 1e-6);
        assert!((s.value(0).data()[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn frozen_groups_are_untouched_and_nan_is_rejected() {
        let mut opt = Optimizer::new(&Schedule::default());
        let mut s = store(&[1.0], &[1.0]);
        s.freeze();
        opt.step(&mut [&mut s], 0.1).unwrap();
        assert_eq!(s.value(0).data(), &[1.0]);
        let mut bad = store(&[1.0], &[f32::NAN]);
        assert!(opt.step(&mut [&mut bad], 0.1).is_err());
    }
}
