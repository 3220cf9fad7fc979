use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::loss::DetLossConfig;
use crate::net::{NetworkSpec, PostProcess};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleTask,
    #[default]
    MultiTask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the schedule at which the rate is multiplied by
    /// `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Linear warm-up length in iterations.
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate on the validation sets every this many iterations (0: only
    /// at the end).
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Random horizontal/vertical flips.
    pub flips: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_at: vec![2.0 / 3.0, 8.0 / 9.0],
            decay_factor: 0.1,
            warmup: 0,
            clip_norm: 0.0,
            eval_every: 0,
            checkpoint_every: 0,
            flips: true,
        }
    }
}

impl Schedule {
    /// Learning rate in effect for the update that ends `iteration`
    /// (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let mut lr = self.lr;
        for f in &self.decay_at {
            if iteration as f64 >= f * self.iterations as f64 {
                lr *= self.decay_factor;
            }
        }
        if self.warmup > 0 && iteration < self.warmup {
            lr *= (iteration + 1) as f64 / self.warmup as f64;
        }
        lr
    }
}

/// Per-task paths: dataset roots or teacher checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerTask {
    pub detection: Option<PathBuf>,
    pub segmentation: Option<PathBuf>,
}

impl PerTask {
    pub fn get(&self, task: Task) -> Option<&PathBuf> {
        match task {
            Task::Detection => self.detection.as_ref(),
            Task::Segmentation => self.segmentation.as_ref(),
        }
    }

    pub fn set(&mut self, task: Task, p: Option<PathBuf>) {
        match task {
            Task::Detection => self.detection = p,
            Task::Segmentation => self.segmentation = p,
        }
    }

    pub fn tasks(&self) -> Vec<Task> {
        [Task::Detection, Task::Segmentation]
            .into_iter()
            .filter(|t| self.get(*t).is_some())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub erosion_radius: usize,
    /// Evaluate at most this many validation chips (0: all).
    pub max_images: usize,
    pub batch_size: usize,
    pub postprocess: PostProcess,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            erosion_radius: 3,
            max_images: 0,
            batch_size: 8,
            postprocess: PostProcess::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Table row label; derived from mode and distillation when empty.
    pub label: String,
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub student: NetworkSpec,
    pub teacher: NetworkSpec,
    pub datasets: PerTask,
    pub teachers: PerTask,
    pub distill: DistillConfig,
    pub schedule: Schedule,
    pub loss: DetLossConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            label: String::new(),
            mode: Mode::MultiTask,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            student: NetworkSpec::student(),
            teacher: NetworkSpec::teacher(),
            datasets: PerTask::default(),
            teachers: PerTask::default(),
            distill: DistillConfig::default(),
            schedule: Schedule::default(),
            loss: DetLossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    // bare words become strings
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Apply `a.b.c=value` to a TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_toml_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String], origin: &str) -> Result<Self> {
        // typed parse of the file itself first, so diagnostics keep line numbers
        let typed: std::result::Result<Self, _> = toml::from_str(text);
        if let Err(e) = typed {
            return Err(Error::Config(format!("{origin}: {}", one_line(&e.to_string()))));
        }
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", one_line(&e.to_string()))))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin} (after overrides): {}", one_line(&e.to_string()))))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile {
            path: path.to_path_buf(),
            what: "experiment config".into(),
        })?;
        let mut cfg = Self::from_toml_str(&text, overrides, &path.display().to_string())?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Make relative dataset, teacher and output paths relative to `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in [Task::Detection, Task::Segmentation] {
            if let Some(mut p) = self.datasets.get(t).cloned() {
                fix(&mut p);
                self.datasets.set(t, Some(p));
            }
            if let Some(mut p) = self.teachers.get(t).cloned() {
                fix(&mut p);
                self.teachers.set(t, Some(p));
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.datasets.tasks()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn row_label(&self) -> String {
        if !self.label.is_empty() {
            return self.label.clone();
        }
        match self.mode {
            Mode::SingleTask => "Single-task".into(),
            Mode::MultiTask if self.distill.enabled() => self.distill.label(),
            Mode::MultiTask => "Multi-task".into(),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name `{}` must be a plain directory name", self.name));
        }
        let tasks = self.tasks();
        match self.mode {
            Mode::SingleTask if tasks.len() != 1 => {
                return bad(format!("single_task mode needs exactly one dataset, got {}", tasks.len()))
            }
            Mode::MultiTask if tasks.len() != 2 => {
                return bad(format!("multi_task mode needs both datasets, got {}", tasks.len()))
            }
            _ => {}
        }
        if self.mode == Mode::SingleTask && self.distill.enabled() {
            return bad("distillation requires multi_task mode".into());
        }
        self.student.validate().map_err(|e| Error::Config(format!("student: {e}")))?;
        self.teacher.validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
        self.distill.validate()?;
        self.loss.validate()?;
        let s = &self.schedule;
        if s.iterations == 0 || s.batch_size == 0 {
            return bad("schedule.iterations and schedule.batch_size must be positive".into());
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return bad("schedule.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return bad("schedule.momentum must lie in [0, 1)".into());
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be positive".into());
        }
        Ok(())
    }

    /// The experiment matrix: a single-task run per task, vanilla
    /// multi-task, and the five distillation variants.
    pub fn matrix(&self) -> Vec<ExperimentConfig> {
        use crate::distill::FeatureMode::*;
        let mut out = Vec::new();
        for t in [Task::Detection, Task::Segmentation] {
            let mut c = self.clone();
            c.mode = Mode::SingleTask;
            c.label = "Single-task".into();
            c.name = format!("single-task-{}", t.as_str());
            c.datasets = PerTask::default();
            c.datasets.set(t, self.datasets.get(t).cloned());
            c.distill = DistillConfig {
                use_soft: false,
                feature_mode: None,
                ..self.distill.clone()
            };
            out.push(c);
        }
        let rows: [(&str, bool, _); 6] = [
            ("multi-task", false, None),
            ("soft", true, None),
            ("mse", false, Mse),
            ("pdf", false, Pdf),
            ("soft-mse", true, Mse),
            ("soft-pdf", true, Pdf),
        ];
        for (name, soft, feat) in rows {
            let mut c = self.clone();
            c.mode = Mode::MultiTask;
            c.name = name.into();
            c.distill.use_soft = soft;
            c.distill.feature_mode = feat;
            c.label = String::new();
            c.label = c.row_label();
            out.push(c);
        }
        out
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
