mod common;

use std::fs;

use common::*;
use graphkd::dataset::{self, Split};
use graphkd::pipeline::{self, ABLATION_HEADER};
use graphkd::runlog::{self, RunSummary, METRICS_HEADER};
use graphkd::Error;
use graphkd_core::data::Task;
use graphkd_core::trainer::Mode;

#[test]
fn data_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), tiny());
    let written = ws.gen_data().unwrap();
    assert_eq!(written.len(), 4);
    let plan = ws.cfg.data_plan().unwrap();
    for split in [Split::Train, Split::Val, Split::Test, Split::Pretext] {
        let fresh = dataset::generate_split(&plan, split).unwrap();
        let loaded = ws.load_split(split).unwrap();
        assert_eq!(fresh.len(), loaded.len());
        for (a, b) in fresh.iter().zip(&loaded) {
            assert_eq!(a.label, b.label);
            let bits = |c: &graphkd_core::data::VideoClip| c.frames.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let manifest = fs::read_to_string(dataset::split_dir(&ws.data_dir(), split).join("manifest.txt")).unwrap();
        let m = dataset::parse_manifest(&manifest);
        assert_eq!(m["clips"], loaded.len().to_string());
        assert!(m["seed"].parse::<u64>().is_ok());
        assert!(m.contains_key("generator_version"));
    }
    assert_eq!(ws.load_split(Split::Train).unwrap().len(), 24);
    assert_eq!(ws.load_split(Split::Test).unwrap().len(), 8);
}

#[test]
fn data_from_another_config_is_rejected_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path(), tiny()).gen_data().unwrap();
    let mut other = tiny();
    other.set("data.noise", "0.3").unwrap();
    let mut ws = workspace(dir.path(), other);
    assert!(matches!(ws.load_split(Split::Train), Err(Error::HashMismatch { .. })));
    ws.force = true;
    assert_eq!(ws.load_split(Split::Train).unwrap().len(), 24);
}

#[test]
fn corrupted_clip_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), tiny());
    ws.gen_data().unwrap();
    let path = dataset::split_dir(&ws.data_dir(), Split::Val).join("clips.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, &bytes).unwrap();
    assert!(ws.load_split(Split::Val).is_err());
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = workspace(a.path(), tiny()).distill(Mode::GlGr, 1).unwrap();
    let y = workspace(b.path(), tiny()).distill(Mode::GlGr, 1).unwrap();
    let read = |d: &std::path::Path| fs::read(d.join("runs/gl_gr/seed1/metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(x.test_acc, y.test_acc);
    assert_eq!(x.config_hash, y.config_hash);
    assert!(x.teachers_unchanged);

    let text = String::from_utf8(read(a.path())).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let rows = runlog::read_metrics(&a.path().join("runs/gl_gr/seed1/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().any(|r| r.best));
    assert_eq!(rows[0].logits_weights.len(), 9);
    assert_eq!(rows[0].repr_weights.len(), 3);
}

#[test]
fn checkpoints_reproduce_evaluation_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), tiny());
    let summary = ws.distill(Mode::GlOnly, 0).unwrap();
    let run = ws.run_dir(Mode::GlOnly, 0);
    let e = ws.evaluate(&run.join("best.ckpt"), Split::Test).unwrap();
    assert_eq!(e.accuracy.to_bits(), summary.test_acc.to_bits());
    assert_eq!(e.per_class, summary.per_class);
    let v = ws.evaluate(&run.join("best.ckpt"), Split::Val).unwrap();
    assert_eq!(v.accuracy.to_bits(), summary.val_acc.to_bits());

    let last = pipeline::load_run_state(&ws, Mode::GlOnly, 0, "last.ckpt").unwrap();
    assert_eq!(last.epoch, 3);
    assert!(last.adam.step > 0);
    let again = pipeline::load_run_state(&ws, Mode::GlOnly, 0, "last.ckpt").unwrap();
    assert_eq!(last, again);

    let parsed = RunSummary::load(&run.join("summary.txt")).unwrap();
    assert_eq!(
        RunSummary {
            wall_clock_secs: summary.wall_clock_secs,
            ..parsed
        },
        summary
    );
}

#[test]
fn mismatched_config_hash_is_rejected_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path(), tiny()).distill(Mode::Scratch, 0).unwrap();
    let ckpt = dir.path().join("runs/scratch/seed0/best.ckpt");
    let mut changed = tiny();
    changed.set("distill.lambda", "0.3").unwrap();
    let mut ws = workspace(dir.path(), changed);
    match ws.evaluate(&ckpt, Split::Test) {
        Err(e @ Error::HashMismatch { .. }) => assert!(e.to_string().contains("--force")),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
    ws.force = true;
    assert!(ws.evaluate(&ckpt, Split::Test).is_ok());

    // Teacher checkpoints are keyed on the teacher config.
    let mut other_teacher = tiny();
    other_teacher.set("teacher.seed", "8").unwrap();
    let ws = workspace(dir.path(), other_teacher);
    let path = ws.teacher_path(Task::Sorting, false);
    assert!(graphkd::checkpoint::Checkpoint::load(&path, "teacher", &ws.cfg.teacher_hash(), false).is_err());
}

#[test]
fn ablation_grid_is_restartable() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = workspace(dir.path(), tiny());
    ws.verbose = false;
    let rows = ws.ablate().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.accuracies.len() == 2 && r.failures.is_empty()));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), ABLATION_HEADER);
    assert_eq!(csv.lines().count(), 3);

    let summary = dir.path().join("runs/gl_gr/seed1/summary.txt");
    let before = fs::read(&summary).unwrap();
    fs::remove_file(dir.path().join("runs/scratch/seed0/summary.txt")).unwrap();
    let again = ws.ablate().unwrap();
    assert_eq!(fs::read(&summary).unwrap(), before);
    assert_eq!(again, rows);

    let report = ws.report().unwrap();
    assert!(report.contains("gl_gr"));
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn failing_cells_are_reported_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    // Not a multiple of the student's 2x2 tap, so representation modes fail.
    cfg.set("distill.sketch_dim", "6").unwrap();
    let rows = workspace(dir.path(), cfg).ablate().unwrap();
    let scratch = rows.iter().find(|r| r.mode == Mode::Scratch).unwrap();
    let gl_gr = rows.iter().find(|r| r.mode == Mode::GlGr).unwrap();
    assert_eq!(scratch.accuracies.len(), 2);
    assert_eq!(gl_gr.accuracies.len(), 0);
    assert_eq!(gl_gr.failures.len(), 2);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("gl_gr,0,")));
}

#[test]
fn teacher_outputs_are_cached_and_teachers_stay_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), tiny());
    let teachers = ws.ensure_teachers().unwrap();
    let sums: Vec<u64> = teachers.iter().map(|t| t.params.checksum()).collect();
    let train = ws.load_split(Split::Train).unwrap();
    let first = ws.teacher_outputs(&teachers, &train).unwrap();
    assert!(dir.path().join("teachers/outputs.ckpt").exists());
    let second = ws.teacher_outputs(&teachers, &train).unwrap();
    assert_eq!(first, second);
    ws.distill(Mode::GrOnly, 0).unwrap();
    let reloaded = ws.ensure_teachers().unwrap();
    assert_eq!(reloaded.iter().map(|t| t.params.checksum()).collect::<Vec<_>>(), sums);
    let reports = ws.teacher_reports().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.pretext_score.is_some()));
}

#[test]
fn beta_sweep_adds_rows_for_representation_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.set("ablation.seeds", "0").unwrap();
    cfg.set("ablation.modes", "scratch,gl_only,gl_gr").unwrap();
    cfg.set("ablation.betas", "0.25,1").unwrap();
    let ws = workspace(dir.path(), cfg);
    let rows = ws.ablate().unwrap();
    let labels: Vec<String> = rows.iter().map(|r| r.label()).collect();
    assert_eq!(labels, ["scratch", "gl_only", "gl_gr-beta0.25", "gl_gr-beta1"]);
    assert!(rows.iter().all(|r| r.accuracies.len() == 1));

    let a = RunSummary::load(&dir.path().join("runs/gl_gr-beta0.25/seed0/summary.txt")).unwrap();
    let b = RunSummary::load(&dir.path().join("runs/gl_gr-beta1/seed0/summary.txt")).unwrap();
    assert_ne!(a.config_hash, b.config_hash);
    assert!(!dir.path().join("runs/gl_gr/seed0").exists());
    assert!(!dir.path().join("runs/gl_only-beta1").exists());

    let metrics = |p: &str| fs::read(dir.path().join(p).join("seed0/metrics.csv")).unwrap();
    assert_ne!(metrics("runs/gl_gr-beta0.25"), metrics("runs/gl_gr-beta1"));
    assert_eq!(ws.ablate().unwrap(), rows);
    assert!(ws.report().unwrap().contains("gl_gr-beta0.25"));

    let mut bad = tiny();
    bad.set("ablation.betas", "-1").unwrap();
    assert!(workspace(dir.path(), bad).ablate().is_err());
}
