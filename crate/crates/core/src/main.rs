use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pmtl::data::{self, Split, SyntheticConfig, SyntheticStyle, Task};
use pmtl::net::Network;
use pmtl::report;
use pmtl::train::{self, EvalConfig, ExperimentConfig, Mode, Report, RunOptions};
use pmtl::{Error, Result};

#[derive(Parser)]
#[command(name = "pmtl", version, about = "Partial multi-task detection and segmentation with distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detection,
    Segmentation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Detection => Task::Detection,
            TaskArg::Segmentation => Task::Segmentation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthTask {
    Detection,
    Segmentation,
    /// Both, in `<out>/detection` and `<out>/segmentation`.
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Rgb,
    Irrg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override such as `schedule.iterations=10`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Print a progress line to stderr every N iterations.
    #[arg(long, default_value_t = 50)]
    progress_every: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural aerial-like dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long, value_enum, default_value = "both")]
        task: SynthTask,
        #[arg(long, default_value_t = 64)]
        chip_size: usize,
        #[arg(long, value_enum, default_value = "rgb")]
        style: StyleArg,
    },
    /// Train a single-task teacher.
    TrainTeacher {
        #[command(flatten)]
        args: ConfigArgs,
        /// Keep only this task's dataset (for configs listing both).
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Train a student (single-task or partial multi-task).
    Train {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the dataset's own task.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        erosion_radius: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a mask-annotated dataset as a box-annotated detection dataset.
    DeriveBoxes {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Smallest connected component kept as a box, in pixels.
        #[arg(long)]
        min_area: Option<usize>,
    },
    /// Comparison table and loss-curve plots across runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Write the experiment matrix configs derived from a base config.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also train every row, one after another.
        #[arg(long)]
        run: bool,
    },
    /// Crop large annotated tiles into a chip dataset.
    Ingest {
        /// Directory holding the tile folders.
        #[arg(long)]
        root: PathBuf,
        /// Split definition (TOML).
        #[arg(long)]
        split_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_options(a: &ConfigArgs) -> RunOptions {
    RunOptions {
        resume: a.resume,
        stop_after: a.stop_after,
        progress_every: a.progress_every,
        ..Default::default()
    }
}

fn print_outcome(out: &train::RunOutcome) {
    match &out.report {
        Some(r) => {
            let metrics: Vec<String> = r
                .final_metrics
                .iter()
                .map(|(t, v)| format!("{t}={v:.4}"))
                .collect();
            println!("{} [{}] {}", out.run_dir.display(), r.label, metrics.join(" "));
        }
        None => println!("{} stopped at iteration {}", out.run_dir.display(), out.state.iteration),
    }
}

fn make_synthetic(
    out: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    task: SynthTask,
    chip_size: usize,
    style: StyleArg,
) -> Result<()> {
    let style = match style {
        StyleArg::Rgb => SyntheticStyle::Rgb,
        StyleArg::Irrg => SyntheticStyle::Irrg,
    };
    let targets: Vec<(Task, PathBuf)> = match task {
        SynthTask::Detection => vec![(Task::Detection, out.to_path_buf())],
        SynthTask::Segmentation => vec![(Task::Segmentation, out.to_path_buf())],
        SynthTask::Both => vec![
            (Task::Detection, out.join("detection")),
            (Task::Segmentation, out.join("segmentation")),
        ],
    };
    for (i, (t, dir)) in targets.iter().enumerate() {
        let cfg = SyntheticConfig {
            chip_size,
            task: *t,
            style,
            ..Default::default()
        };
        // the two tasks of `both` draw different scenes
        data::make_synthetic_dataset(dir, seed.wrapping_add(i as u64 * 1_000_003), n_train, n_val, &cfg)?;
        println!("{} {t}: {n_train} train, {n_val} val", dir.display());
    }
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    task: Option<TaskArg>,
    split: SplitArg,
    erosion_radius: usize,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = pmtl::net::Checkpoint::load(checkpoint)?;
    let net = Network::from_checkpoint(&ckpt)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let mut ds = data::load_dataset(dataset, split)?;
    if let Some(t) = task {
        ds.task = t.into();
    }
    if ds.task == Task::Segmentation && ds.labels.iter().any(Option::is_none) {
        return Err(Error::Data(format!("{} has no masks to score segmentation", dataset.display())));
    }
    if !net.spec().has_head(ds.task) {
        return Err(Error::Config(format!(
            "checkpoint {} has no {} head",
            checkpoint.display(),
            ds.task
        )));
    }
    let cfg = EvalConfig {
        erosion_radius,
        ..Default::default()
    };
    let result = train::evaluate_task(&net, &ds, &cfg)?;
    let doc = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "dataset": dataset.display().to_string(),
        "split": split.as_str(),
        "task": ds.task,
        "iteration": ckpt.iteration,
        "headline": result.headline(ds.task),
        "result": result,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
            println!("{} {}={:.4}", p.display(), ds.task, result.headline(ds.task).unwrap_or(f64::NAN));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn write_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let reports = runs.iter().map(|r| Report::load(r)).collect::<Result<Vec<_>>>()?;
    let rows = report::build_table(&reports);
    std::fs::create_dir_all(out)?;
    let text = report::render_text(&rows);
    std::fs::write(out.join("table.txt"), &text)?;
    std::fs::write(out.join("table.csv"), report::to_csv(&rows))?;
    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)?;
    for r in &reports {
        std::fs::write(plots.join(format!("{}-loss.svg", r.name)), report::loss_curves_svg(r))?;
    }
    print!("{text}");
    Ok(())
}

fn matrix(config: &Path, overrides: &[String], out: &Path, run: bool) -> Result<()> {
    let base = ExperimentConfig::load(config, overrides)?;
    std::fs::create_dir_all(out)?;
    let rows = base.matrix();
    for c in &rows {
        let p = out.join(format!("{}.toml", c.name));
        std::fs::write(&p, c.to_toml()?)?;
        println!("{} [{}]", p.display(), c.row_label());
    }
    if run {
        for c in &rows {
            let outcome = train::run_experiment(
                c,
                &RunOptions {
                    progress_every: 50,
                    ..Default::default()
                },
            )?;
            print_outcome(&outcome);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic {
            out,
            seed,
            n_train,
            n_val,
            task,
            chip_size,
            style,
        } => make_synthetic(&out, seed, n_train, n_val, task, chip_size, style),
        Command::TrainTeacher { args, task } => {
            let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
            if let Some(t) = task {
                let t: Task = t.into();
                let root = cfg
                    .datasets
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("config has no datasets.{t}")))?;
                cfg.datasets = Default::default();
                cfg.datasets.set(t, Some(root));
                cfg.mode = Mode::SingleTask;
                cfg.distill.use_soft = false;
                cfg.distill.feature_mode = pmtl::distill::FeatureMode::None;
            }
            let best = train::train_teacher(&cfg, &run_options(&args))?;
            println!("{}", best.display());
            Ok(())
        }
        Command::Train { args } => {
            let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
            let outcome = train::run_experiment(&cfg, &run_options(&args))?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            task,
            split,
            erosion_radius,
            out,
        } => evaluate(&checkpoint, &dataset, task, split, erosion_radius, out.as_deref()),
        Command::DeriveBoxes { dataset, out, min_area } => {
            let (chips, boxes) = data::derive_box_dataset(&dataset, &out, min_area)?;
            println!("{}: {chips} chips, {boxes} boxes", out.display());
            Ok(())
        }
        Command::Report { runs, out } => write_report(&runs, &out),
        Command::Matrix {
            config,
            overrides,
            out,
            run,
        } => matrix(&config, &overrides, &out, run),
        Command::Ingest { root, split_config, out } => {
            let cfg = data::IngestConfig::load(&split_config)?;
            let s = data::ingest_tiles(&root, &cfg, &out)?;
            println!(
                "{}: {} train chips from {} tiles, {} val chips from {} tiles",
                out.display(),
                s.train_chips,
                s.train_tiles.len(),
                s.val_chips,
                s.val_tiles.len()
            );
            for d in &s.deviations {
                println!("deviation: {d}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {detail}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
