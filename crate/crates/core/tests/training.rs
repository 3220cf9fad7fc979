mod common;

use common::{batches, compare_stores, file_bytes, student_digest, train_losses};
use pmtl::data::Task;
use pmtl::net::Checkpoint;
use pmtl::tensor::{Graph, Tensor, VarId};
use pmtl::train::{
    accumulate_pass, apply_update, build_pass_losses, fresh_state, partial_mtl_iteration, pass_heads, prepare,
    run_experiment, Mode, Report, Role, RunOptions,
};

#[test]
fn accumulated_passes_equal_one_summed_backward() {
    let fx = common::fixture(32);
    let cfg = common::config(fx.path(), "acc");
    let prep = prepare(&cfg, Role::Student).unwrap();
    let (det, seg) = batches(&cfg, &prep, 0);

    let mut a = fresh_state(&cfg, &prep).unwrap();
    let mut b = a.clone();
    accumulate_pass(&mut a, &det, &cfg, true).unwrap();
    accumulate_pass(&mut a, &seg, &cfg, true).unwrap();

    // both passes recorded on one graph, one backward over the summed loss
    let mut p1 = b.student.forward_in(Graph::new(), &det.images, &pass_heads(&cfg, Task::Detection, true)).unwrap();
    let l1 = build_pass_losses(&b, &mut p1, &det, &cfg, true).unwrap();
    let g = std::mem::take(&mut p1.graph);
    let mut p2 = b.student.forward_in(g, &seg.images, &pass_heads(&cfg, Task::Segmentation, true)).unwrap();
    let l2 = build_pass_losses(&b, &mut p2, &seg, &cfg, true).unwrap();
    let seeds: Vec<(VarId, &Tensor)> = l1.seeds.iter().chain(&l2.seeds).map(|(v, t)| (*v, t)).collect();
    let grads = p2.graph.backward(&seeds);
    b.student.accumulate(&grads);
    b.adapters.detection.as_mut().unwrap().accumulate(&grads);
    b.adapters.segmentation.as_mut().unwrap().accumulate(&grads);

    compare_stores(&a, &b, true);
    apply_update(&mut a, &cfg).unwrap();
    apply_update(&mut b, &cfg).unwrap();
    compare_stores(&a, &b, false);
}

#[test]
fn one_update_per_two_passes() {
    let fx = common::fixture(32);
    let cfg = common::config(fx.path(), "count");
    let prep = prepare(&cfg, Role::Student).unwrap();
    let mut state = fresh_state(&cfg, &prep).unwrap();
    let before = state.student.digest();
    let (det, seg) = batches(&cfg, &prep, 0);
    accumulate_pass(&mut state, &det, &cfg, true).unwrap();
    accumulate_pass(&mut state, &seg, &cfg, true).unwrap();
    assert_eq!(state.student.digest(), before, "passes alone must not update");
    assert_eq!(state.optimizer.steps, 0);
    for it in 0..3 {
        let (det, seg) = batches(&cfg, &prep, it);
        partial_mtl_iteration(&mut state, &det, &seg, &cfg).unwrap();
    }
    // the two stray passes above were folded into the first update
    assert_eq!(state.optimizer.steps, 3);
    assert_eq!(state.iteration, 3);
    assert_ne!(state.student.digest(), before);
}

#[test]
fn hard_losses_only_reach_their_own_head() {
    let fx = common::fixture(32);
    let cfg = common::vanilla(common::config(fx.path(), "iso"));
    let prep = prepare(&cfg, Role::Student).unwrap();
    let (det, seg) = batches(&cfg, &prep, 0);
    for (batch, untouched) in [(&det, "seg."), (&seg, "det.")] {
        let mut state = fresh_state(&cfg, &prep).unwrap();
        accumulate_pass(&mut state, batch, &cfg, false).unwrap();
        let s = state.student.store();
        let mut touched_backbone = false;
        for i in 0..s.len() {
            let norm = s.grad(i).sum_sq();
            if s.name(i).starts_with(untouched) {
                assert_eq!(norm, 0.0, "{} received gradient from a {} batch", s.name(i), batch.task);
            }
            touched_backbone |= s.name(i).starts_with("backbone.") && norm > 0.0;
        }
        assert!(touched_backbone);
    }
}

#[test]
fn teachers_stay_bit_identical() {
    let fx = common::fixture(32);
    let cfg = common::config(fx.path(), "frozen");
    let paths: Vec<_> = [Task::Detection, Task::Segmentation]
        .iter()
        .map(|t| cfg.teachers.get(*t).unwrap().clone())
        .collect();
    let before: Vec<_> = paths.iter().map(|p| file_bytes(p)).collect();
    let digests: Vec<_> = paths
        .iter()
        .map(|p| Checkpoint::load(p).unwrap().tensor_digest())
        .collect();
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.state.iteration, 10);
    for (i, p) in paths.iter().enumerate() {
        assert_eq!(file_bytes(p), before[i]);
        let t = [Task::Detection, Task::Segmentation][i];
        let live = out.state.teachers.get(t).unwrap();
        assert!(live.is_frozen());
        assert_eq!(live.to_checkpoint(0).tensor_digest(), digests[i]);
    }
}

#[test]
fn distillation_off_reproduces_vanilla_exactly() {
    let fx = common::fixture(32);
    let mut plain = common::vanilla(common::config(fx.path(), "plain"));
    plain.teachers = Default::default();
    // teachers configured but every distillation switch off
    let off = common::vanilla(common::config(fx.path(), "off"));
    // soft and PDF terms present with zero weight
    let mut zero = common::config(fx.path(), "zero");
    zero.distill.lambda_soft = 0.0;
    zero.distill.lambda_feat = 0.0;
    for c in [&plain, &off, &zero] {
        run_experiment(c, &RunOptions::default()).unwrap();
    }
    let reference = student_digest(&plain);
    assert_eq!(student_digest(&off), reference);
    assert_eq!(student_digest(&zero), reference);
    let base = train_losses(&plain);
    assert_eq!(train_losses(&off), base);
    let z = train_losses(&zero);
    for (a, b) in z.iter().zip(&base) {
        for k in ["hard_det", "hard_seg", "total"] {
            assert_eq!(a[k], b[k], "{k}");
        }
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let fx = common::fixture(32);
    let mut full = common::config(fx.path(), "full");
    full.schedule.iterations = 6;
    full.schedule.eval_every = 2;
    full.schedule.checkpoint_every = 2;
    let mut split = full.clone();
    split.name = "split".into();
    run_experiment(&full, &RunOptions::default()).unwrap();
    let first = run_experiment(
        &split,
        &RunOptions {
            stop_after: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(first.report.is_none());
    assert_eq!(first.state.iteration, 3);
    let done = run_experiment(
        &split,
        &RunOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(done.state.iteration, 6);
    assert_eq!(student_digest(&split), student_digest(&full));
    assert_eq!(train_losses(&split), train_losses(&full));
    let (a, b) = (Report::load(&full.run_dir()).unwrap(), Report::load(&split.run_dir()).unwrap());
    assert_eq!(a.final_metrics, b.final_metrics);
    assert_eq!(a.loss_curves, b.loss_curves);
}

#[test]
fn same_config_same_report() {
    let fx = common::fixture(32);
    let c = common::config(fx.path(), "again");
    let a = run_experiment(&c, &RunOptions::default()).unwrap().report.unwrap();
    let b = run_experiment(&c, &RunOptions::default()).unwrap().report.unwrap();
    assert_eq!(a, b);
}

#[test]
fn soft_pdf_run_logs_every_loss_stream() {
    let fx = common::fixture(32);
    let c = common::config(fx.path(), "streams");
    let r = run_experiment(&c, &RunOptions::default()).unwrap().report.unwrap();
    assert_eq!(r.label, "+ Soft + PDF");
    for k in ["hard_det", "hard_seg", "soft_det", "soft_seg", "feat_det", "feat_seg", "hard", "soft", "feature"] {
        let curve = r.loss_curves.get(k).unwrap_or_else(|| panic!("missing stream {k}"));
        assert!(!curve.is_empty());
        assert!(curve.iter().all(|(_, v)| v.is_finite()), "{k}");
    }
    assert_eq!(r.final_metrics.len(), 2);
}

#[test]
fn single_task_report_has_one_task() {
    let fx = common::fixture(32);
    let mut c = common::vanilla(common::config(fx.path(), "single"));
    c.mode = Mode::SingleTask;
    c.datasets.set(Task::Detection, None);
    let r = run_experiment(&c, &RunOptions::default()).unwrap().report.unwrap();
    assert_eq!(r.label, "Single-task");
    assert_eq!(r.final_metrics.keys().copied().collect::<Vec<_>>(), vec![Task::Segmentation]);
    assert!(r.loss_curves.keys().all(|k| !k.contains("det")));
}

#[test]
fn missing_teacher_fails_before_training() {
    let fx = common::fixture(32);
    let mut c = common::config(fx.path(), "noteacher");
    let gone = fx.path().join("nowhere.ckpt");
    c.teachers.set(Task::Segmentation, Some(gone.clone()));
    let err = run_experiment(&c, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(&gone.display().to_string()), "{err}");
    assert!(!c.run_dir().exists());
}

#[test]
fn teacher_role_needs_single_task_mode() {
    let fx = common::fixture(32);
    let c = common::vanilla(common::config(fx.path(), "t"));
    assert!(matches!(
        prepare(&c, Role::Teacher),
        Err(pmtl::Error::Config(_))
    ));
}
