use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::batch::{batch_flips, make_batch, Sampler, TaskBatch};
use super::config::{ExperimentConfig, Mode};
use super::evaluate::{evaluate_task, EvalReport};
use super::optim::Optimizer;
use super::step::{partial_mtl_iteration, single_task_iteration, ByTask, TrainState};
use crate::data::{load_dataset, write_atomic, LoadedDataset, Split, Task};
use crate::error::{Error, Result};
use crate::net::{build_adapters, Checkpoint, Network, NetworkSpec};

pub const DEVICE_ENV: &str = "PMTL_DEVICE";

/// Device named by the environment; only the CPU backend exists.
pub fn device() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if d.is_empty() || d.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(d) => Err(Error::Config(format!("{DEVICE_ENV}={d}: only `cpu` is available"))),
        Err(_) => Ok("cpu".into()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub role: Role,
    /// Continue from `checkpoints/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop (after checkpointing) once this many iterations are done,
    /// as if interrupted.
    pub stop_after: Option<u64>,
    /// Print a progress line every this many iterations (0: silent).
    pub progress_every: u64,
}

/// Network spec actually trained: heads follow the datasets.
pub fn effective_spec(cfg: &ExperimentConfig, role: Role) -> NetworkSpec {
    let base = match role {
        Role::Student => &cfg.student,
        Role::Teacher => &cfg.teacher,
    };
    base.clone().with_heads(&cfg.tasks())
}

/// Datasets and teachers, loaded and cross-checked before any training.
pub struct Prepared {
    pub spec: NetworkSpec,
    pub train: ByTask<LoadedDataset>,
    pub val: ByTask<LoadedDataset>,
    pub teachers: ByTask<Network>,
}

fn check_classes(ds: &LoadedDataset, spec: &NetworkSpec) -> Result<()> {
    let (want, have, what) = match ds.task {
        Task::Detection => (spec.det_classes, ds.table.detection.len(), "det_classes"),
        Task::Segmentation => (spec.seg_classes, ds.table.class_count() as usize, "seg_classes"),
    };
    if want != have {
        return Err(Error::Config(format!(
            "{what} = {want} but dataset `{}` defines {have}",
            ds.name
        )));
    }
    Ok(())
}

pub fn prepare(cfg: &ExperimentConfig, role: Role) -> Result<Prepared> {
    cfg.validate()?;
    device()?;
    if role == Role::Teacher && cfg.mode != Mode::SingleTask {
        return Err(Error::Config("teachers are trained in single_task mode".into()));
    }
    let spec = effective_spec(cfg, role);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    // teacher files are checked before the (slower) dataset loading
    let mut teachers = ByTask::default();
    if cfg.distill.enabled() {
        for t in cfg.tasks() {
            let path = cfg.teachers.get(t).ok_or_else(|| {
                Error::Config(format!("distillation is enabled but teachers.{t} is not set"))
            })?;
            if !path.is_file() {
                return Err(Error::MissingFile {
                    path: path.clone(),
                    what: format!("{t} teacher checkpoint"),
                });
            }
            let net = Network::load_frozen(path)?;
            if !net.spec().has_head(t) {
                return Err(Error::Config(format!("teacher {} has no {t} head", path.display())));
            }
            if net.spec().pyramid_strides.len() != spec.pyramid_strides.len() {
                return Err(Error::Config(format!(
                    "teacher {} has {} pyramid levels, student {}",
                    path.display(),
                    net.spec().pyramid_strides.len(),
                    spec.pyramid_strides.len()
                )));
            }
            teachers.set(t, net);
        }
    }
    let mut train = ByTask::default();
    let mut val = ByTask::default();
    for t in cfg.tasks() {
        let root = cfg.datasets.get(t).expect("task listed");
        if !root.is_dir() {
            return Err(Error::MissingFile {
                path: root.clone(),
                what: format!("{t} dataset root"),
            });
        }
        for (split, slot) in [(Split::Train, &mut train), (Split::Val, &mut val)] {
            let ds = load_dataset(root, split)?;
            if ds.task != t {
                return Err(Error::Config(format!(
                    "datasets.{t} points at a {} dataset ({})",
                    ds.task,
                    root.display()
                )));
            }
            if ds.is_empty() {
                return Err(Error::Data(format!("{} split of {} is empty", split.as_str(), root.display())));
            }
            check_classes(&ds, &spec)?;
            slot.set(t, ds);
        }
    }
    Ok(Prepared {
        spec,
        train,
        val,
        teachers,
    })
}

/// Exclusive marker for a run directory, removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub iteration: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub version: String,
    pub device: String,
}

/// Final record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub label: String,
    pub role: Role,
    pub mode: Mode,
    pub tasks: Vec<Task>,
    pub iterations: u64,
    /// Headline metric per task (`detection` → mAP, `segmentation` → mIoU).
    pub final_metrics: BTreeMap<Task, f64>,
    pub best_metrics: BTreeMap<Task, BestMetric>,
    pub final_eval: EvalReport,
    /// Window-averaged loss streams, `(iteration, value)`.
    pub loss_curves: BTreeMap<String, Vec<(u64, f64)>>,
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub notes: Vec<String>,
}

impl Report {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join("report.json");
        let bytes = std::fs::read(&p).map_err(|_| Error::MissingFile {
            path: p.clone(),
            what: "run report".into(),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: Option<Report>,
    pub state: TrainState,
}

fn stream(t: Task) -> u64 {
    match t {
        Task::Detection => 1,
        Task::Segmentation => 2,
    }
}

fn adapter_seed(seed: u64, t: Task) -> u64 {
    super::batch::mix(&[seed, 0xada9, stream(t)])
}

/// Untrained student with adapters and teachers attached, as at iteration 0.
pub fn fresh_state(cfg: &ExperimentConfig, prep: &Prepared) -> Result<TrainState> {
    let student = Network::build(&prep.spec, cfg.seed)?;
    let mut state = TrainState::new(student, Optimizer::new(&cfg.schedule));
    if cfg.distill.feature_mode != crate::distill::FeatureMode::None {
        for t in cfg.tasks() {
            let teacher = prep.teachers.get(t).expect("teacher loaded");
            state
                .adapters
                .set(t, build_adapters(&prep.spec, teacher.spec(), adapter_seed(cfg.seed, t))?);
        }
    }
    for t in cfg.tasks() {
        if let Some(n) = prep.teachers.get(t) {
            state.teachers.set(t, n.clone());
        }
    }
    Ok(state)
}

const ADAPTER_PREFIX: [(Task, &str); 2] = [
    (Task::Detection, "adapters/detection/"),
    (Task::Segmentation, "adapters/segmentation/"),
];

fn save_state(state: &mut TrainState, path: &Path, best: Option<f64>) -> Result<()> {
    let mut ckpt = state.student.to_checkpoint(state.iteration);
    for (t, prefix) in ADAPTER_PREFIX {
        if let Some(a) = state.adapters.get(t) {
            ckpt.tensors.extend(a.store().to_map(prefix));
        }
    }
    ckpt.tensors.extend(state.optimizer.to_map());
    ckpt.meta = json!({
        "optimizer_steps": state.optimizer.steps,
        "best_score": best,
    });
    ckpt.save(path)
}

fn load_state(cfg: &ExperimentConfig, prep: &Prepared, path: &Path) -> Result<(TrainState, Option<f64>)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.spec != prep.spec || ckpt.seed != cfg.seed {
        return Err(Error::Config(format!(
            "{} was written by a different network spec or seed",
            path.display()
        )));
    }
    let mut state = fresh_state(cfg, prep)?;
    state.student = Network::from_checkpoint(&ckpt)?;
    state.iteration = ckpt.iteration;
    for (t, prefix) in ADAPTER_PREFIX {
        if let Some(a) = state.adapters.get_mut(t) {
            a.store_mut().load_map(&ckpt.tensors, prefix)?;
        }
    }
    let steps = ckpt.meta["optimizer_steps"].as_u64().unwrap_or(0);
    let mut opt = Optimizer::new(&cfg.schedule);
    opt.load_map(&ckpt.tensors, &state.groups_mut(), steps)?;
    state.optimizer = opt;
    Ok((state, ckpt.meta["best_score"].as_f64()))
}

/// Drop metrics records beyond `iteration` (after resuming from an older
/// checkpoint).
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if v["iteration"].as_u64().is_some_and(|i| i <= iteration) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Parsed `metrics.log`.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub train: Vec<(u64, BTreeMap<String, f64>)>,
    pub eval: Vec<(u64, BTreeMap<Task, f64>)>,
}

impl MetricsLog {
    pub fn load(path: &Path) -> Result<Self> {
        let mut out = Self::default();
        let f = File::open(path).map_err(|_| Error::MissingFile {
            path: path.to_path_buf(),
            what: "metrics log".into(),
        })?;
        for line in BufReader::new(f).lines() {
            let v: serde_json::Value = serde_json::from_str(&line?)?;
            let it = v["iteration"].as_u64().unwrap_or(0);
            match v["kind"].as_str() {
                Some("train") => {
                    let losses: BTreeMap<String, f64> = serde_json::from_value(v["losses"].clone())?;
                    out.train.push((it, losses));
                }
                Some("eval") => {
                    let m: BTreeMap<Task, f64> = serde_json::from_value(v["metrics"].clone())?;
                    out.eval.push((it, m));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Each stream averaged over windows so that at most `max_points`
    /// points remain; adds `hard`, `soft` and `feature` aggregates.
    pub fn curves(&self, max_points: usize) -> BTreeMap<String, Vec<(u64, f64)>> {
        let mut raw: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        for (it, losses) in &self.train {
            let mut groups: BTreeMap<&str, f64> = BTreeMap::new();
            for (k, v) in losses {
                raw.entry(k.clone()).or_default().push((*it, *v));
                if k.contains('.') {
                    continue;
                }
                let g = if k.starts_with("hard") {
                    "hard"
                } else if k.starts_with("soft") {
                    "soft"
                } else if k.starts_with("feat") {
                    "feature"
                } else {
                    continue;
                };
                *groups.entry(g).or_insert(0.0) += v;
            }
            for (g, v) in groups {
                raw.entry(g.to_string()).or_default().push((*it, v));
            }
        }
        raw.into_iter()
            .map(|(k, pts)| {
                let w = pts.len().div_ceil(max_points.max(1)).max(1);
                let pts = pts
                    .chunks(w)
                    .map(|c| (c[c.len() - 1].0, c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64))
                    .collect();
                (k, pts)
            })
            .collect()
    }
}

fn append_line(f: &mut File, v: &serde_json::Value) -> Result<()> {
    writeln!(f, "{v}")?;
    Ok(())
}

fn headline(r: &EvalReport) -> BTreeMap<Task, f64> {
    let mut m = BTreeMap::new();
    for t in [Task::Detection, Task::Segmentation] {
        if let Some(v) = r.headline(t) {
            m.insert(t, v);
        }
    }
    m
}

fn evaluate_all(net: &Network, prep: &Prepared, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let mut out = EvalReport::default();
    for t in cfg.tasks() {
        let r = evaluate_task(net, prep.val.get(t).expect("val set"), &cfg.eval)?;
        out.detection = out.detection.or(r.detection);
        out.segmentation = out.segmentation.or(r.segmentation);
    }
    Ok(out)
}

/// Batch for `task` at `iteration`.
pub fn batch_for(
    cfg: &ExperimentConfig,
    ds: &LoadedDataset,
    sampler: &mut Sampler,
    task: Task,
    iteration: u64,
) -> Result<TaskBatch> {
    let bs = cfg.schedule.batch_size;
    let idx = sampler.batch(iteration, bs);
    let flips = cfg
        .schedule
        .flips
        .then(|| batch_flips(cfg.seed, stream(task), iteration, bs));
    make_batch(ds, &idx, flips.as_deref())
}

/// Train according to `cfg`, writing `<output_dir>/<name>/`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let prep = prepare(cfg, opts.role)?;
    run_prepared(cfg, &prep, opts)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared, opts: &RunOptions) -> Result<RunOutcome> {
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let metrics_path = dir.join("metrics.log");
    let last = ckpt_dir.join("last.ckpt");

    let (mut state, mut best_score) = if opts.resume && last.exists() {
        let (s, b) = load_state(cfg, prep, &last)?;
        truncate_metrics(&metrics_path, s.iteration)?;
        (s, b)
    } else {
        write_atomic(&metrics_path, b"")?;
        (fresh_state(cfg, prep)?, None)
    };
    let mut log = OpenOptions::new().append(true).create(true).open(&metrics_path)?;

    let tasks = cfg.tasks();
    let mut samplers: BTreeMap<Task, Sampler> = tasks
        .iter()
        .map(|t| (*t, Sampler::new(prep.train.get(*t).unwrap().len(), cfg.seed, stream(*t))))
        .collect();
    let total = cfg.schedule.iterations;
    let started = Instant::now();
    let mut last_eval: Option<(u64, EvalReport)> = None;

    while state.iteration < total {
        if opts.stop_after.is_some_and(|s| state.iteration >= s) {
            save_state(&mut state, &last, best_score)?;
            return Ok(RunOutcome {
                run_dir: dir,
                report: None,
                state,
            });
        }
        let it = state.iteration;
        let mut batches = BTreeMap::new();
        for t in &tasks {
            let b = batch_for(cfg, prep.train.get(*t).unwrap(), samplers.get_mut(t).unwrap(), *t, it)?;
            batches.insert(*t, b);
        }
        let losses = match cfg.mode {
            Mode::MultiTask => partial_mtl_iteration(
                &mut state,
                &batches[&Task::Detection],
                &batches[&Task::Segmentation],
                cfg,
            )?,
            Mode::SingleTask => single_task_iteration(&mut state, &batches[&tasks[0]], cfg)?,
        };
        let done = state.iteration;
        append_line(
            &mut log,
            &json!({
                "kind": "train",
                "iteration": done,
                "lr": cfg.schedule.lr_at(it),
                "losses": losses,
                "wall_time": started.elapsed().as_secs_f64(),
            }),
        )?;
        if opts.progress_every > 0 && done % opts.progress_every == 0 {
            eprintln!("[{}] iteration {done}/{total} loss {:.4}", cfg.name, losses["total"]);
        }
        let eval_due = (cfg.schedule.eval_every > 0 && done % cfg.schedule.eval_every == 0) || done == total;
        if eval_due {
            let r = evaluate_all(&state.student, prep, cfg)?;
            let m = headline(&r);
            append_line(&mut log, &json!({"kind": "eval", "iteration": done, "metrics": m}))?;
            let score: f64 = m.values().sum();
            if best_score.is_none_or(|b| score > b) {
                best_score = Some(score);
                state.student.to_checkpoint(done).save(&ckpt_dir.join("best.ckpt"))?;
            }
            last_eval = Some((done, r));
        }
        let ckpt_due = (cfg.schedule.checkpoint_every > 0 && done % cfg.schedule.checkpoint_every == 0) || done == total;
        if ckpt_due {
            save_state(&mut state, &last, best_score)?;
        }
    }
    drop(log);

    let final_eval = match last_eval {
        Some((i, r)) if i == total => r,
        _ => evaluate_all(&state.student, prep, cfg)?,
    };
    let metrics = MetricsLog::load(&metrics_path)?;
    let mut best_metrics: BTreeMap<Task, BestMetric> = BTreeMap::new();
    for (it, m) in &metrics.eval {
        for (t, v) in m {
            if best_metrics.get(t).is_none_or(|b| *v > b.value) {
                best_metrics.insert(*t, BestMetric { iteration: *it, value: *v });
            }
        }
    }
    let report = Report {
        name: cfg.name.clone(),
        label: match opts.role {
            Role::Teacher if cfg.label.is_empty() => "Teacher".into(),
            _ => cfg.row_label(),
        },
        role: opts.role,
        mode: cfg.mode,
        tasks: tasks.clone(),
        iterations: state.iteration,
        final_metrics: headline(&final_eval),
        best_metrics,
        final_eval,
        loss_curves: metrics.curves(200),
        config: cfg.clone(),
        environment: Environment {
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            device: device()?,
        },
        notes: vec![
            "detection metric: mean AP over IoU thresholds 0.50:0.95:0.05, all-point interpolation".into(),
            format!("segmentation metric: mIoU on masks eroded with a {}-pixel disc", cfg.eval.erosion_radius),
        ],
    };
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(RunOutcome {
        run_dir: dir,
        report: Some(report),
        state,
    })
}

/// Train a single-task teacher; returns the best checkpoint path.
pub fn train_teacher(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let opts = RunOptions {
        role: Role::Teacher,
        ..opts.clone()
    };
    let out = run_experiment(cfg, &opts)?;
    Ok(out.run_dir.join("checkpoints").join("best.ckpt"))
}
