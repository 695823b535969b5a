mod common;

use graphkd_core::data::{self, Geometry, PretextConfig, Task, VideoClip};
use graphkd_core::models::{self, Block, FinetunePolicy, FitConfig, StudentModel, TeacherModel, TeacherSpec};
use graphkd_core::optim::LrSchedule;
use graphkd_core::trainer;
use graphkd_core::{Tape, Tensor};

fn blocks(spec: &str) -> Vec<Block> {
    spec.split(',')
        .map(|s| match s.strip_suffix('p') {
            Some(n) => Block {
                out: n.parse().unwrap(),
                pool: true,
            },
            None => Block {
                out: s.parse().unwrap(),
                pool: false,
            },
        })
        .collect()
}

fn small() -> Geometry {
    Geometry {
        frames: 4,
        channels: 1,
        height: 8,
        width: 8,
        object_size: 3,
        speed: (1, 1),
        noise: 0.1,
        distractors: 0,
    }
}

fn small_pretext() -> PretextConfig {
    PretextConfig {
        patch: 4,
        ..PretextConfig::default()
    }
}

fn fit(epochs: usize, lr: f64) -> FitConfig {
    FitConfig {
        epochs,
        batch_size: 16,
        schedule: LrSchedule {
            lr0: lr,
            every: 100,
            factor: 0.5,
        },
        ..FitConfig::default()
    }
}

fn teacher(task: Task, g: &Geometry, seed: u64) -> TeacherModel {
    let spec = TeacherSpec::new(task, g, blocks("4p,8p"), &small_pretext()).unwrap();
    TeacherModel::new(spec, seed)
}

fn prefixed(t: &TeacherModel, prefix: &str) -> Vec<Tensor> {
    t.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
}

#[test]
fn zero_training_steps_keep_the_seeded_init() {
    let g = small();
    let clips = data::generate_dataset(1, 40, 8, &g).unwrap();
    for task in Task::ALL {
        let mut t = teacher(task, &g, 5);
        assert_eq!(t, teacher(task, &g, 5));
        let init = t.params.clone();
        let samples = data::make_task_samples(&clips, task, &small_pretext(), g.object_size, 0).unwrap();
        let report = models::pretrain_teacher(&mut t, &samples, &samples, &fit(0, 0.01)).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(t.params, init);
        assert_eq!(t.params.checksum(), init.checksum());
    }
    assert_ne!(teacher(Task::Sorting, &g, 5).params, teacher(Task::Sorting, &g, 6).params);
}

#[test]
fn pretraining_rejects_samples_of_another_task() {
    let g = small();
    let clips = data::generate_dataset(1, 8, 8, &g).unwrap();
    let mut t = teacher(Task::Sorting, &g, 0);
    let wrong = data::make_task_samples(&clips, Task::Egomotion, &small_pretext(), g.object_size, 0).unwrap();
    assert!(models::pretrain_teacher(&mut t, &wrong, &[], &fit(1, 0.01)).is_err());
}

#[test]
fn head_only_finetune_freezes_the_encoder() {
    let g = small();
    let clips = data::generate_dataset(2, 48, 4, &g).unwrap();
    let (train, val) = clips.split_at(32);

    let mut frozen = teacher(Task::Egomotion, &g, 1);
    let enc = prefixed(&frozen, "enc.");
    models::finetune_classifier(&mut frozen, train, val, 4, FinetunePolicy::HeadOnly, &fit(2, 0.01)).unwrap();
    assert_eq!(prefixed(&frozen, "enc."), enc);
    assert_eq!(frozen.n_classes, Some(4));

    let mut full = teacher(Task::Egomotion, &g, 1);
    models::finetune_classifier(&mut full, train, val, 4, FinetunePolicy::Full, &fit(2, 0.01)).unwrap();
    assert_ne!(prefixed(&full, "enc."), enc);
}

#[test]
fn forward_with_tap_shapes_and_determinism() {
    let g = small();
    let clip = data::generate_clip(3, 0, 6, &g).unwrap();
    let mut t = teacher(Task::Tracking, &g, 2);
    assert!(models::forward_with_tap(&t, &clip).is_err());
    t.attach_classifier(6, 0);
    let (logits, tap) = models::forward_with_tap(&t, &clip).unwrap();
    assert_eq!(logits.len(), 6);
    let (c, h, w) = t.spec.tap_shape();
    assert_eq!(tap.shape(), &[c, h, w]);
    let (again, tap2) = models::forward_with_tap(&t, &clip).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&logits), bits(&again));
    assert_eq!(bits(tap.data()), bits(tap2.data()));

    let s = StudentModel::new(&g, blocks("2p,8p"), 6, 0).unwrap();
    let (logits, tap) = models::forward_with_tap(&s, &clip).unwrap();
    assert_eq!(logits.len(), 6);
    assert_eq!(tap.shape(), &[c, h, w]);
}

#[test]
fn batched_inference_matches_single_clips() {
    let g = small();
    let clips = data::generate_dataset(4, 10, 8, &g).unwrap();
    let s = StudentModel::new(&g, blocks("2p,4p"), 8, 3).unwrap();
    let (logits, taps) = models::infer(&s, &clips, 3).unwrap();
    for (i, clip) in clips.iter().enumerate() {
        let (l, t) = models::forward_with_tap(&s, clip).unwrap();
        assert_eq!(logits.row(i), &l[..]);
        assert_eq!(&taps.data()[i * t.len()..(i + 1) * t.len()], t.data());
    }
    let preds = models::predict(&s, &clips, 4).unwrap();
    assert_eq!(preds.len(), clips.len());
    assert!(models::infer(&s, &[], 4).is_err());
}

#[test]
fn default_taps_agree_and_student_is_compressed() {
    let g = Geometry::default();
    let pc = PretextConfig::default();
    let student = StudentModel::new(&g, blocks("8p,16p,16"), 8, 0).unwrap();
    let mut smallest = usize::MAX;
    for (task, b) in Task::ALL.iter().zip(["16p,32p,64,16"; 4]) {
        let mut t = TeacherModel::new(TeacherSpec::new(*task, &g, blocks(b), &pc).unwrap(), 0);
        t.attach_classifier(8, 0);
        assert_eq!(t.spec.tap_shape(), student.tap_shape());
        assert!(student.params.count_prefix("enc.") < t.encoder_param_count());
        smallest = smallest.min(t.classifier_param_count());
    }
    assert!((student.param_count() as f64) < 0.5 * smallest as f64, "{} vs {smallest}", student.param_count());
}

#[test]
fn zero_clip_gives_zero_tap() {
    let g = small();
    let clip = VideoClip {
        frames: Tensor::zeros(&[g.frames, g.channels, g.height, g.width]),
        label: 0,
        meta: data::generate_clip(0, 0, 8, &g).unwrap().meta,
    };
    let mut t = teacher(Task::Sorting, &g, 0);
    t.attach_classifier(8, 0);
    let (_, tap) = models::forward_with_tap(&t, &clip).unwrap();
    assert!(tap.data().iter().all(|&v| v == 0.0));
}

/// Per-frame tap features of a frozen encoder, concatenated over frames.
fn frame_features(t: &TeacherModel, clips: &[VideoClip]) -> Vec<Vec<f64>> {
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let batch = data::stack_clips(&refs).unwrap();
    let mut tape = Tape::new();
    let vars = t.params.bind(&mut tape, &|_| false);
    let x = tape.constant(models::frame_windows(&batch, 1, t.spec.grayscale).unwrap());
    let tap = t.spec.encoder.forward(&mut tape, &t.params, &vars, "enc", x).unwrap();
    let per_clip = tape.value(tap).len() / clips.len();
    tape.value(tap).data().chunks(per_clip).map(<[f64]>::to_vec).collect()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_regression(x: &[Vec<f64>], y: &[usize], c: usize, steps: usize, lr: f64) -> impl Fn(&[f64]) -> usize {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; c];
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; d + 1]; c];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = w.iter().map(|wk| wk[d] + wk[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect();
            let p = common::softmax(&z, 1.0);
            for k in 0..c {
                let e = p[k] - (k == yi) as u8 as f64;
                for j in 0..d {
                    grad[k][j] += e * xi[j];
                }
                grad[k][d] += e;
            }
        }
        for k in 0..c {
            for j in 0..=d {
                w[k][j] -= lr * grad[k][j] / x.len() as f64;
            }
        }
    }
    move |xi: &[f64]| {
        let z: Vec<f64> = w.iter().map(|wk| wk[d] + wk[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect();
        graphkd_core::metrics::argmax(&z)
    }
}

#[test]
fn linear_head_on_frozen_random_encoder_beats_chance() {
    let g = Geometry {
        noise: 0.0,
        ..small()
    };
    // The first four classes share one shape and differ only in motion.
    let c = 4;
    let clips = data::generate_dataset(8, 320, c, &g).unwrap();
    let (train, rest) = clips.split_at(200);
    let (val, test) = rest.split_at(40);
    let mut t = teacher(Task::Egomotion, &g, 4);
    models::finetune_classifier(&mut t, train, val, c, FinetunePolicy::HeadOnly, &fit(40, 0.03)).unwrap();
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    let head = trainer::evaluate(&models::predict(&t, test, 64).unwrap(), &labels, c).unwrap().accuracy;

    let fx = frame_features(&t, train);
    let fy: Vec<usize> = train.iter().map(|c| c.label).collect();
    let oracle = logistic_regression(&fx, &fy, c, 300, 0.5);
    let tx = frame_features(&t, test);
    let oracle_acc = tx.iter().zip(&labels).filter(|(x, &y)| oracle(x) == y).count() as f64 / labels.len() as f64;

    let chance = 1.0 / c as f64;
    assert!(oracle_acc > chance + 0.25, "oracle {oracle_acc}");
    assert!(head > chance + 0.25, "head {head}");
    assert!(head > oracle_acc - 0.15, "head {head} oracle {oracle_acc}");
}

#[test]
fn tracking_teacher_separates_held_out_triples() {
    let g = Geometry::default();
    let pc = PretextConfig::default();
    let clips = data::generate_dataset(21, 500, 8, &g).unwrap();
    for seed in 0..5 {
        let samples = data::make_task_samples(&clips, Task::Tracking, &pc, g.object_size, seed).unwrap();
        let (train, val) = samples.split_at(samples.len() * 4 / 5);
        let spec = TeacherSpec::new(Task::Tracking, &g, blocks("8p,16p,16"), &pc).unwrap();
        let mut t = TeacherModel::new(spec, seed);
        models::pretrain_teacher(&mut t, train, val, &fit(3, 0.003)).unwrap();
        let score = t.pretext_score(val, 64).unwrap();
        assert!(score > 0.7, "seed {seed}: {score}");
    }
}

#[test]
fn sorting_teacher_beats_chance_on_held_out_tuples() {
    let g = Geometry::default();
    let pc = PretextConfig::default();
    let clips = data::generate_dataset(22, 1200, 8, &g).unwrap();
    let samples = data::make_task_samples(&clips, Task::Sorting, &pc, g.object_size, 0).unwrap();
    let (train, val) = samples.split_at(1000);
    let spec = TeacherSpec::new(Task::Sorting, &g, blocks("8p,16p,16"), &pc).unwrap();
    let mut t = TeacherModel::new(spec, 0);
    models::pretrain_teacher(&mut t, train, val, &fit(10, 0.003)).unwrap();
    let score = t.pretext_score(val, 64).unwrap();
    assert!(score > 1.0 / 3.0 + 0.1, "{score}");
}
