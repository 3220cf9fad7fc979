mod common;

use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use pmtl::data::{decode_label_image, ClassTable, DatasetManifest, Split};

fn pmtl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmtl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PMTL_DEVICE")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = pmtl(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing command.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = pmtl(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with("error["), "{}", lines[0]);
    (out.status.code().unwrap(), lines[0].to_string())
}

fn dir_digest(root: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn make_synthetic_is_idempotent_and_decodable() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["make-synthetic", "--out", "a", "--n-train", "100", "--n-val", "50", "--chip-size", "32", "--seed", "5"];
    ok(&args, tmp.path());
    let first = dir_digest(&tmp.path().join("a"));
    ok(&args, tmp.path());
    assert_eq!(dir_digest(&tmp.path().join("a")), first);

    let table = ClassTable::default();
    for task in ["detection", "segmentation"] {
        let root = tmp.path().join("a").join(task);
        for (split, n) in [(Split::Train, 100), (Split::Val, 50)] {
            let m = DatasetManifest::load(&root, split).unwrap();
            assert_eq!(m.entries.len(), n);
        }
        for split in ["train", "val"] {
            for e in std::fs::read_dir(root.join(split).join("labels")).unwrap() {
                let bytes = std::fs::read(e.unwrap().path()).unwrap();
                decode_label_image(&bytes, &table).unwrap();
            }
        }
    }
}

fn write_config(root: &Path, name: &str) -> std::path::PathBuf {
    let mut c = common::config(root, name);
    c.schedule.iterations = 4;
    let p = root.join(format!("{name}.toml"));
    std::fs::write(&p, c.to_toml().unwrap()).unwrap();
    p
}

#[test]
fn train_evaluate_report_round() {
    let fx = common::fixture(32);
    let root = fx.path();
    let cfg = write_config(root, "cli");
    let cfg = cfg.to_str().unwrap();

    let best = ok(&["train-teacher", "--config", cfg, "--task", "detection", "--override", "name=teacher-det"], root);
    let best = best.trim();
    assert!(Path::new(best).is_file(), "{best}");

    ok(&["train", "--config", cfg, "--override", "schedule.iterations=10", "--override", "name=smoke"], root);
    let run = root.join("runs").join("smoke");
    for f in ["config.toml", "metrics.log", "report.json", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("iterations = 10"));

    // head-absent evaluation
    let det_ckpt = best.to_string();
    let seg = root.join("seg");
    let (code, line) = fails(
        &["evaluate", "--checkpoint", &det_ckpt, "--dataset", seg.to_str().unwrap(), "--task", "segmentation"],
        root,
    );
    assert_eq!(code, 2);
    assert!(line.contains("no segmentation head"), "{line}");

    // evaluating twice gives the same bytes
    let ckpt = run.join("checkpoints/best.ckpt");
    let det = root.join("det");
    let mut outs = Vec::new();
    for name in ["e1.json", "e2.json"] {
        ok(
            &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", det.to_str().unwrap(), "--out", name],
            root,
        );
        outs.push(std::fs::read(root.join(name)).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let doc: serde_json::Value = serde_json::from_slice(&outs[0]).unwrap();
    assert!(doc["headline"].as_f64().is_some());

    let text = ok(&["report", run.to_str().unwrap(), "--out", "rep"], root);
    assert!(text.contains("+ Soft + PDF"));
    let csv = std::fs::read_to_string(root.join("rep/table.csv")).unwrap();
    let rows = pmtl::report::parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(root.join("rep/plots/smoke-loss.svg").is_file());
}

#[test]
fn matrix_writes_table_row_labels() {
    let fx = tempfile::tempdir().unwrap();
    let cfg = write_config(fx.path(), "base");
    let out = ok(&["matrix", "--config", cfg.to_str().unwrap(), "--out", "mx"], fx.path());
    let labels: Vec<&str> = out.lines().map(|l| l.split_once(" [").unwrap().1.trim_end_matches(']')).collect();
    assert_eq!(
        labels,
        vec![
            "Single-task",
            "Single-task",
            "Multi-task",
            "+ Soft",
            "+ MSE",
            "+ PDF",
            "+ Soft + MSE",
            "+ Soft + PDF"
        ]
    );
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    assert_eq!(distinct.len(), 7);
}

#[test]
fn errors_are_single_lines_with_exit_codes() {
    let fx = common::fixture(32);
    let root = fx.path();
    let (code, line) = fails(&["train", "--config", "absent.toml"], root);
    assert_eq!(code, 2);
    assert!(line.starts_with("error[missing-file]"), "{line}");

    std::fs::write(root.join("bad.toml"), "name = \"x\"\n\n[schedule]\niterations = \"ten\"\n").unwrap();
    let (code, line) = fails(&["train", "--config", "bad.toml"], root);
    assert_eq!(code, 2);
    assert!(line.contains("line 4"), "{line}");

    let cfg = write_config(root, "div");
    let cfg = cfg.to_str().unwrap();
    let (code, line) = fails(&["train", "--config", cfg, "--override", "schedule.lr=1e30"], root);
    assert_eq!(code, 4, "{line}");
    assert!(line.starts_with("error[divergence]"), "{line}");

    // a manifest listing a file that is not there
    let ds = root.join("det");
    std::fs::remove_file(ds.join("val/images/00000.png")).unwrap();
    let out = pmtl(&["evaluate", "--checkpoint", "x.ckpt", "--dataset", ds.to_str().unwrap()], root);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(ds.join("manifest.val.json-lines"), "{not json}\n").unwrap();
    let teacher = root.join("teacher-detection.ckpt");
    let (code, line) = fails(
        &["evaluate", "--checkpoint", teacher.to_str().unwrap(), "--dataset", ds.to_str().unwrap()],
        root,
    );
    assert_eq!(code, 3);
    assert!(line.starts_with("error[data]"), "{line}");

    let (code, _) = fails(&["no-such-command"], root);
    assert_eq!(code, 2);
}

#[test]
fn unsupported_device_is_a_config_error() {
    let fx = common::fixture(32);
    let cfg = write_config(fx.path(), "dev");
    let out = Command::new(env!("CARGO_BIN_EXE_pmtl"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .current_dir(fx.path())
        .env("PMTL_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PMTL_DEVICE"));
}

#[test]
fn derive_boxes_exports_a_detection_dataset() {
    let fx = common::fixture(32);
    let out = ok(&["derive-boxes", "--dataset", "seg", "--out", "derived"], fx.path());
    assert!(out.contains("12 chips"), "{out}");
    let ds = pmtl::data::load_dataset(&fx.path().join("derived"), Split::Train).unwrap();
    assert_eq!(ds.task, pmtl::data::Task::Detection);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = pmtl::train::ExperimentConfig::load(&root.join("desk.toml"), &[]).unwrap();
    assert!(desk.distill.use_soft);
    for city in ["vaihingen", "potsdam"] {
        let c = pmtl::data::IngestConfig::load(&root.join(format!("isprs/{city}.toml"))).unwrap();
        assert!(c.expected_train.is_some() && !c.val_tiles.is_empty(), "{city}");
    }
}
