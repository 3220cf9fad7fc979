#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pmtl::data::{make_synthetic_dataset, SyntheticConfig, Task};
use pmtl::distill::FeatureMode;
use pmtl::net::{Checkpoint, Network, NetworkSpec, ParamStore};
use pmtl::tensor::Tensor;
use pmtl::train::{batch_for, ExperimentConfig, Mode, OptimizerKind, Prepared, Sampler, TaskBatch, TrainState};

pub fn tiny_spec(channels: usize) -> NetworkSpec {
    let mut s = NetworkSpec::tiny();
    s.pyramid_strides = vec![8, 16, 32];
    s.neck_channels = channels;
    s
}

/// Small synthetic detection and segmentation datasets under `root`.
pub fn datasets(root: &Path, chip: usize, n_train: usize, n_val: usize) -> (PathBuf, PathBuf) {
    let det = root.join("det");
    let seg = root.join("seg");
    for (t, dir, seed) in [(Task::Detection, &det, 11), (Task::Segmentation, &seg, 12)] {
        let cfg = SyntheticConfig {
            chip_size: chip,
            task: t,
            ..Default::default()
        };
        make_synthetic_dataset(dir, seed, n_train, n_val, &cfg).unwrap();
    }
    (det, seg)
}

/// Untrained single-head teachers saved as frozen checkpoints.
pub fn teachers(root: &Path, spec: &NetworkSpec) -> (PathBuf, PathBuf) {
    let mut out = Vec::new();
    for (t, seed) in [(Task::Detection, 101), (Task::Segmentation, 102)] {
        let net = Network::build(&spec.clone().with_heads(&[t]), seed).unwrap();
        let p = root.join(format!("teacher-{t}.ckpt"));
        net.to_checkpoint(0).save(&p).unwrap();
        out.push(p);
    }
    (out[0].clone(), out[1].clone())
}

/// Multi-task "+ Soft + PDF" config over the fixture datasets.
pub fn config(root: &Path, name: &str) -> ExperimentConfig {
    let (det, seg) = (root.join("det"), root.join("seg"));
    let mut c = ExperimentConfig {
        name: name.into(),
        output_dir: root.join("runs"),
        student: tiny_spec(16),
        teacher: tiny_spec(24),
        mode: Mode::MultiTask,
        seed: 3,
        ..Default::default()
    };
    c.datasets.set(Task::Detection, Some(det));
    c.datasets.set(Task::Segmentation, Some(seg));
    c.teachers.set(Task::Detection, Some(root.join("teacher-detection.ckpt")));
    c.teachers.set(Task::Segmentation, Some(root.join("teacher-segmentation.ckpt")));
    c.distill.use_soft = true;
    c.distill.feature_mode = FeatureMode::Pdf;
    c.schedule.iterations = 10;
    c.schedule.batch_size = 2;
    c.schedule.optimizer = OptimizerKind::Sgd;
    c.schedule.lr = 0.01;
    c.schedule.eval_every = 0;
    c.eval.max_images = 4;
    c
}

/// Fixture root with datasets and teachers ready.
pub fn fixture(chip: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    datasets(dir.path(), chip, 8, 4);
    teachers(dir.path(), &tiny_spec(24));
    dir
}

pub fn vanilla(mut c: ExperimentConfig) -> ExperimentConfig {
    c.distill.use_soft = false;
    c.distill.feature_mode = FeatureMode::None;
    c
}

pub fn batches(cfg: &ExperimentConfig, prep: &Prepared, iteration: u64) -> (TaskBatch, TaskBatch) {
    let mk = |t: Task, stream| {
        let ds = prep.train.get(t).unwrap();
        let mut s = Sampler::new(ds.len(), cfg.seed, stream);
        batch_for(cfg, ds, &mut s, t, iteration).unwrap()
    };
    (mk(Task::Detection, 1), mk(Task::Segmentation, 2))
}

pub fn stores(state: &TrainState) -> Vec<&ParamStore> {
    let mut v = vec![state.student.store()];
    v.extend(state.adapters.detection.as_ref().map(|a| a.store()));
    v.extend(state.adapters.segmentation.as_ref().map(|a| a.store()));
    v
}

pub fn assert_close(a: &Tensor, b: &Tensor, rel: f32, what: &str) {
    let scale = b.data().iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-12);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= rel * scale, "{what}: {x} vs {y} (scale {scale})");
    }
}

pub fn compare_stores(a: &TrainState, b: &TrainState, grads: bool) {
    for (sa, sb) in stores(a).into_iter().zip(stores(b)) {
        assert_eq!(sa.len(), sb.len());
        for i in 0..sa.len() {
            let (x, y) = if grads { (sa.grad(i), sb.grad(i)) } else { (sa.value(i), sb.value(i)) };
            assert_close(x, y, 1e-5, sa.name(i));
        }
    }
}

pub fn file_bytes(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

pub fn student_digest(cfg: &ExperimentConfig) -> String {
    Checkpoint::load(&cfg.run_dir().join("checkpoints/last.ckpt"))
        .unwrap()
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("model/"))
        .map(|(k, t)| format!("{k}:{:?}", t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn train_losses(cfg: &ExperimentConfig) -> Vec<BTreeMap<String, f64>> {
    std::fs::read_to_string(cfg.run_dir().join("metrics.log"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "train")
        .map(|v| serde_json::from_value(v["losses"].clone()).unwrap())
        .collect()
}

