mod common;

use common::*;
use graphkd_core::data::{self, Geometry};
use graphkd_core::graphs::{self, Bandwidth};
use graphkd_core::metrics;
use graphkd_core::sketch;
use graphkd_core::models::{Block, StudentModel};
use graphkd_core::trainer::{self, BatchTargets, DistillConfig, DistillData, DistillState, LabeledSet, Mode, TrainOutcome};
use graphkd_core::{Error, Tensor};
use rand::Rng as _;

const TEACHERS: usize = 3;
const CLASSES: usize = 4;

fn geometry() -> Geometry {
    Geometry {
        frames: 4,
        channels: 1,
        height: 8,
        width: 8,
        object_size: 3,
        speed: (1, 1),
        noise: 0.2,
        distractors: 0,
    }
}

fn student(seed: u64) -> StudentModel {
    StudentModel::new(&geometry(), vec![Block { out: 4, pool: true }, Block { out: 4, pool: true }], CLASSES, seed).unwrap()
}

fn config(mode: Mode, seed: u64, epochs: usize) -> DistillConfig {
    let mut cfg = DistillConfig::new(TEACHERS);
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.lr_decay_every = 10;
    cfg.sketch_dim = 16;
    cfg
}

struct Bench {
    train: LabeledSet,
    val: LabeledSet,
    teacher_logits: Vec<Tensor>,
    taps: Vec<Tensor>,
}

/// Labeled clips plus synthetic teacher outputs. Teacher 0 predicts the
/// one-hot ground truth when `oracle_teacher` is set; the rest are noise.
fn bench(seed: u64, oracle_teacher: bool) -> Bench {
    let g = geometry();
    let clips = data::generate_dataset(seed, 128, CLASSES, &g).unwrap();
    let (train, val) = clips.split_at(96);
    let train = LabeledSet::from_clips(train).unwrap();
    let mut r = rng(seed + 1000);
    let teacher_logits = (0..TEACHERS)
        .map(|k| {
            if k == 0 && oracle_teacher {
                let data = train.labels.iter().flat_map(|&y| (0..CLASSES).map(move |j| (j == y) as u8 as f64)).collect();
                Tensor::new(vec![train.len(), CLASSES], data).unwrap()
            } else {
                random_tensor(&mut r, &[train.len(), CLASSES], 3.0)
            }
        })
        .collect();
    let taps = [6, 8, 10].iter().map(|&l| random_tensor(&mut r, &[train.len(), l], 1.0)).collect();
    Bench {
        train,
        val: LabeledSet::from_clips(val).unwrap(),
        teacher_logits,
        taps,
    }
}

fn run(cfg: &DistillConfig, b: &Bench) -> TrainOutcome {
    let state = DistillState::new(cfg, student(cfg.seed), TEACHERS, &[6, 8, 10]).unwrap();
    let softened = state.softened_targets(&b.taps).unwrap();
    let data = DistillData {
        train: b.train.clone(),
        teacher_logits: b.teacher_logits.clone(),
        softened,
    };
    trainer::train(cfg, state, &data, &b.val, &mut |_, _, _| Ok(())).unwrap()
}

fn batch_parts(cfg: &DistillConfig, state: &DistillState, b: &Bench, idx: &[usize]) -> trainer::LossParts {
    let (clips, labels) = b.train.gather(idx).unwrap();
    let logits: Vec<Tensor> = b.teacher_logits.iter().map(|t| trainer::gather_rows(t, idx).unwrap()).collect();
    let softened = state
        .softened_targets(&b.taps)
        .unwrap()
        .map(|s| trainer::gather_rows(&s, idx).unwrap());
    let targets = BatchTargets {
        labels: &labels,
        teacher_logits: &logits,
        softened: softened.as_ref(),
    };
    trainer::total_loss(cfg, state, &clips, &targets).unwrap()
}

#[test]
fn scratch_total_is_cross_entropy() {
    let b = bench(1, false);
    let cfg = config(Mode::Scratch, 0, 1);
    let state = DistillState::new(&cfg, student(0), TEACHERS, &[6, 8, 10]).unwrap();
    let p = batch_parts(&cfg, &state, &b, &[0, 5, 9, 11]);
    assert_eq!(p.total, p.ce);
    assert_eq!((p.soft, p.repr), (0.0, 0.0));
}

#[test]
fn zero_lambda_silences_the_soft_term() {
    let b = bench(2, false);
    let mut cfg = config(Mode::GlOnly, 0, 1);
    cfg.lambda = 0.0;
    let state = DistillState::new(&cfg, student(0), TEACHERS, &[6, 8, 10]).unwrap();
    let p = batch_parts(&cfg, &state, &b, &[1, 2, 3]);
    assert!(p.soft > 0.0);
    assert_eq!(p.total, p.ce);
}

#[test]
fn hand_summed_batch_of_two() {
    let b = bench(3, false);
    let mut cfg = config(Mode::GlGr, 4, 1);
    cfg.lambda = 0.35;
    cfg.beta = 0.8;
    cfg.bandwidth = Bandwidth::Fixed(0.5);
    let mut state = DistillState::new(&cfg, student(4), TEACHERS, &[6, 8, 10]).unwrap();
    let mut r = rng(77);
    state
        .logits_graph
        .as_mut()
        .unwrap()
        .set_raw(random_tensor(&mut r, &[TEACHERS, TEACHERS], 1.5))
        .unwrap();
    let idx = [7, 40];
    let p = batch_parts(&cfg, &state, &b, &idx);

    let (clips, labels) = b.train.gather(&idx).unwrap();
    let (logits, tap) = state.student.forward_batch(&clips).unwrap();
    let raw = state.logits_graph.as_ref().unwrap().raw().data().to_vec();
    // Incoming weights: softmax over each receiver's edges from the other teachers.
    let mut sender_mass = [0.0; TEACHERS];
    for m in 0..TEACHERS {
        let others: Vec<usize> = (0..TEACHERS).filter(|&n| n != m).collect();
        let z: Vec<f64> = others.iter().map(|&n| raw[m * TEACHERS + n]).collect();
        for (&n, w) in others.iter().zip(softmax(&z, 1.0)) {
            sender_mass[n] += w;
        }
    }
    let spacing = 1.0 / (CLASSES - 1) as f64;
    let cost = |i: usize, j: usize| i.abs_diff(j) as f64 * spacing;
    let (mut ce, mut soft) = (0.0, 0.0);
    for (i, (&row, &y)) in idx.iter().zip(&labels).enumerate() {
        let s = logits.row(i);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - s[y];
        let eta = softmax(s, 1.0);
        for (n, tl) in b.teacher_logits.iter().enumerate() {
            let mu = softmax(tl.row(row), cfg.teacher_temperatures[n]);
            soft += sender_mass[n] * lp_transport(&mu, &eta, &cost) / TEACHERS as f64;
        }
    }
    ce /= 2.0;
    soft /= 2.0;
    assert!((p.ce - ce).abs() < 1e-10, "{} vs {ce}", p.ce);
    assert!((p.soft - soft).abs() < 1e-9, "{} vs {soft}", p.soft);

    let g = state.repr_graph.as_ref().unwrap();
    let bank = state.sketch.as_ref().unwrap();
    let per = tap.len() / 2;
    let mut repr = 0.0;
    for (i, &row) in idx.iter().enumerate() {
        let t = Tensor::new(tap.shape()[1..].to_vec(), tap.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let feats: Vec<&[f64]> = b.taps.iter().map(|x| x.row(row)).collect();
        let vertices = sketch::build_vertices(&feats, bank).unwrap();
        repr += graphs::repr_graph_loss(&t, &vertices, g, 0.5).unwrap();
    }
    repr /= 2.0;
    assert!((p.repr - repr).abs() < 1e-10, "{} vs {repr}", p.repr);
    let hand = (1.0 - cfg.lambda) * ce + cfg.lambda * soft + cfg.beta * repr;
    assert!((p.total - hand).abs() < 1e-9, "{} vs {hand}", p.total);
}

#[test]
fn full_scale_schedule_quarters_at_epoch_100() {
    let s = DistillConfig::new(4).full_scale().schedule();
    assert_eq!(s.lr(0), 0.01);
    assert_eq!(s.lr(49), 0.01);
    assert_eq!(s.lr(50), 0.005);
    assert_eq!(s.lr(100), 0.01 / 4.0);
}

#[test]
fn same_seed_gives_identical_streams() {
    let b = bench(5, false);
    let cfg = config(Mode::GlGr, 3, 3);
    let x = run(&cfg, &b);
    let y = run(&cfg, &b);
    assert_eq!(x.records, y.records);
    assert_eq!(x.best, y.best);
    assert_eq!(x.last.student.params.checksum(), y.last.student.params.checksum());
    let z = run(&config(Mode::GlGr, 4, 3), &b);
    assert_ne!(x.records, z.records);
}

#[test]
fn smoothed_training_loss_never_rises() {
    for seed in 0..5 {
        let b = bench(10 + seed, false);
        let cfg = config(Mode::GlGr, seed, 30);
        let out = run(&cfg, &b);
        let loss: Vec<f64> = out.records.iter().map(|r| r.train_total).collect();
        let smooth: Vec<f64> = loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        for (e, w) in smooth.windows(2).enumerate() {
            assert!(w[1] <= w[0], "seed {seed}: smoothed loss rises after epoch {e}: {smooth:?}");
        }
    }
}

#[test]
fn oracle_teacher_receives_the_most_weight() {
    for seed in 0..5 {
        let b = bench(20 + seed, true);
        let cfg = config(Mode::GlOnly, seed, 15);
        let out = run(&cfg, &b);
        let w = out.best.logits_graph.as_ref().unwrap().incoming_weights();
        for m in 1..TEACHERS {
            for n in 1..TEACHERS {
                if n != m {
                    assert!(w.row(m)[0] > w.row(m)[n], "seed {seed} receiver {m}: {:?}", w.row(m));
                }
            }
        }
    }
}

#[test]
fn uniform_kd_matches_gl_only_at_step_zero() {
    let b = bench(6, false);
    let uni = config(Mode::UniformKd, 2, 3);
    let gl = config(Mode::GlOnly, 2, 3);
    let su = DistillState::new(&uni, student(2), TEACHERS, &[6, 8, 10]).unwrap();
    let sg = DistillState::new(&gl, student(2), TEACHERS, &[6, 8, 10]).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    assert_eq!(batch_parts(&uni, &su, &b, &idx), batch_parts(&gl, &sg, &b, &idx));
    let out = run(&uni, &b);
    assert!(out.last.logits_graph.unwrap().raw().data().iter().all(|&v| v == 0.0));
    let out = run(&gl, &b);
    assert!(out.last.logits_graph.unwrap().raw().data().iter().any(|&v| v != 0.0));
}

#[test]
fn loss_decomposition_holds_every_epoch() {
    let b = bench(7, false);
    for mode in Mode::ALL {
        let cfg = config(mode, 1, 4);
        let out = run(&cfg, &b);
        assert_eq!(out.records.len(), 4);
        for r in &out.records {
            assert!(r.decomposition_error(&cfg) < 1e-9);
            assert_eq!(r.logits_weights.is_empty(), !mode.uses_logits_graph());
            assert_eq!(r.repr_weights.is_empty(), !mode.uses_repr_graph());
        }
    }
}

#[test]
fn best_state_has_the_best_validation_accuracy() {
    let b = bench(8, false);
    let cfg = config(Mode::Scratch, 0, 8);
    let out = run(&cfg, &b);
    let best = &out.records[out.best_epoch];
    assert!(out.records.iter().all(|r| r.val_acc <= best.val_acc));
    let acc = trainer::evaluate_student(&out.best.student, &b.val, 32).unwrap().accuracy;
    assert_eq!(acc, best.val_acc);
}

#[test]
fn non_finite_teacher_logits_abort_training() {
    let mut b = bench(9, false);
    let mut bad = b.teacher_logits[1].data().to_vec();
    bad[0] = f64::NAN;
    b.teacher_logits[1] = Tensor::new(b.teacher_logits[1].shape().to_vec(), bad).unwrap();
    let cfg = config(Mode::GlOnly, 0, 2);
    let state = DistillState::new(&cfg, student(0), TEACHERS, &[6, 8, 10]).unwrap();
    let data = DistillData {
        train: b.train.clone(),
        teacher_logits: b.teacher_logits.clone(),
        softened: None,
    };
    let err = trainer::train(&cfg, state, &data, &b.val, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err:?}");
}

#[test]
fn distillation_modes_need_teachers() {
    let cfg = DistillConfig {
        mode: Mode::GlOnly,
        teacher_temperatures: vec![],
        ..DistillConfig::new(0)
    };
    assert!(DistillState::new(&cfg, student(0), 0, &[]).is_err());
    let scratch = DistillConfig {
        mode: Mode::Scratch,
        ..cfg
    };
    assert!(DistillState::new(&scratch, student(0), 0, &[]).is_ok());
}

fn confusion_oracle(pred: &[usize], labels: &[usize], c: usize) -> Vec<Vec<usize>> {
    (0..c)
        .map(|y| (0..c).map(|p| pred.iter().zip(labels).filter(|&(&a, &b)| b == y && a == p).count()).collect())
        .collect()
}

#[test]
fn evaluation_matches_counting_oracle() {
    let mut r = rng(3);
    for _ in 0..50 {
        let c = r.gen_range(2..7);
        let n = r.gen_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let e = trainer::evaluate(&pred, &labels, c).unwrap();
        let conf = confusion_oracle(&pred, &labels, c);
        assert_eq!(e.confusion, conf);
        let correct = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert_eq!(e.accuracy, correct as f64 / n as f64);
        for k in 0..c {
            let support = labels.iter().filter(|&&y| y == k).count();
            match e.per_class[k] {
                None => assert_eq!(support, 0),
                Some(a) => assert_eq!(a, conf[k][k] as f64 / support as f64),
            }
        }
    }
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    assert_eq!(trainer::evaluate(&labels, &labels, 4).unwrap().accuracy, 1.0);
    assert_eq!(trainer::evaluate(&[2; 40], &labels, 4).unwrap().accuracy, 0.25);
    assert!(trainer::evaluate(&[], &[], 4).is_err());
    assert!(trainer::evaluate(&[0], &[0, 1], 4).is_err());
    assert_eq!(metrics::argmax(&[0.1, 0.7, 0.2]), 1);
}
