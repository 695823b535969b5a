//! Analytic gradients against central finite differences (h = 1e-5) on 50
//! random instances per loss. Each suite returns its worst relative error.

use super::*;
use graphkd_core::data::Geometry;
use graphkd_core::graphs::{self, Bandwidth, LogitsGraph, ReprGraph};
use graphkd_core::models::{Block, StudentModel};
use graphkd_core::trainer::{self, BatchTargets, DistillConfig, DistillState, GraphVars, Mode};
use graphkd_core::{Tape, Tensor, Var};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 50;

/// Relative error of `d loss / d x` for a scalar loss built by `build` from a single
/// parameter leaf of shape `shape`.
fn check_leaf(shape: &[usize], x0: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(shape.to_vec(), x0.to_vec()).unwrap());
    let l = build(&mut tape, x);
    tape.backward(l).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    let numeric = numeric_grad(x0, H, &mut |p| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(shape.to_vec(), p.to_vec()).unwrap());
        let l = build(&mut t, x);
        t.scalar(l)
    });
    rel_error(&analytic, &numeric)
}

pub fn cross_entropy() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (b, c) = (r.gen_range(1..5), r.gen_range(2..8));
        let x0 = random_vec(&mut r, b * c, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        worst = worst.max(check_leaf(&[b, c], &x0, &|t, x| {
            let l = t.cross_entropy(x, &labels).unwrap();
            t.mean_all(l).unwrap()
        }));
    }
    worst
}

pub fn earth_mover() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (b, c) = (r.gen_range(1..5), r.gen_range(2..10));
        let x0 = random_vec(&mut r, b * c, 2.0);
        let mu: Vec<f64> = (0..b).flat_map(|_| random_dist(&mut r, c)).collect();
        let spacing = r.gen_range(0.1..1.0);
        worst = worst.max(check_leaf(&[b, c], &x0, &|t, x| {
            let eta = t.softmax_last(x, 1.0).unwrap();
            let l = t.em_rows(eta, &mu, spacing).unwrap();
            t.sum_all(l).unwrap()
        }));
    }
    worst
}

pub fn mmd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (b, cs, s, k, ck) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..6), r.gen_range(1..3), r.gen_range(1..4));
        let x0 = random_vec(&mut r, b * cs * s, 2.0);
        let y = Tensor::new(vec![b, k, ck, s], (0..b * k * ck).flat_map(|_| random_dist(&mut r, s)).collect()).unwrap();
        let bw = r.gen_range(0.1..1.0);
        worst = worst.max(check_leaf(&[b, cs, s], &x0, &|t, x| {
            let xs = t.softmax_last(x, 1.0).unwrap();
            let l = t.mmd(xs, y.clone(), bw).unwrap();
            t.sum_all(l).unwrap()
        }));
    }
    worst
}

fn random_logits_graph(r: &mut graphkd_core::rng::Rng, n: usize) -> LogitsGraph {
    let temps: Vec<f64> = (0..n).map(|_| r.gen_range(1.0..5.0)).collect();
    let mut g = LogitsGraph::new(n, temps).unwrap();
    g.set_raw(random_tensor(r, &[n, n], 1.0)).unwrap();
    g
}

pub fn logits_graph_loss() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (b, c, n) = (r.gen_range(1..4), r.gen_range(2..8), r.gen_range(1..5));
        let g = random_logits_graph(&mut r, n);
        let teachers: Vec<Tensor> = (0..n).map(|_| random_tensor(&mut r, &[b, c], 3.0)).collect();
        let s0 = random_vec(&mut r, b * c, 2.0);
        let spacing = 1.0 / (c - 1) as f64;
        // With respect to the student logits.
        let raw = g.raw().clone();
        worst = worst.max(check_leaf(&[b, c], &s0, &|t, x| {
            let rv = t.constant(raw.clone());
            let l = graphs::logits_graph_loss_on_tape(t, x, &teachers, &g, rv, spacing).unwrap();
            t.sum_all(l).unwrap()
        }));
        // With respect to the raw edge parameters.
        let s = Tensor::new(vec![b, c], s0.clone()).unwrap();
        worst = worst.max(check_leaf(&[n, n], raw.data(), &|t, rv| {
            let x = t.constant(s.clone());
            let l = graphs::logits_graph_loss_on_tape(t, x, &teachers, &g, rv, spacing).unwrap();
            t.sum_all(l).unwrap()
        }));
    }
    worst
}

pub fn repr_graph_loss() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let n_teachers = r.gen_range(2..5);
        let k = n_teachers * (n_teachers - 1) / 2;
        let edge_dims = r.gen_range(1..3);
        let temps: Vec<f64> = (0..k).map(|_| r.gen_range(0.5..5.0)).collect();
        let mut g = ReprGraph::new(n_teachers, temps, edge_dims).unwrap();
        g.set_raw(random_tensor(&mut r, &[edge_dims, k], 1.0)).unwrap();
        let (b, cs, h, w, ck) = (r.gen_range(1..3), r.gen_range(1..4), 2, 2, r.gen_range(1..3));
        let raw_vertices = random_tensor(&mut r, &[b, k, ck * h * w], 1.0);
        let softened = graphs::soften_vertex_tensor(&raw_vertices, &g, h * w).unwrap();
        let bw = Bandwidth::Fixed(r.gen_range(0.1..0.8));
        let x0 = random_vec(&mut r, b * cs * h * w, 2.0);
        let raw = g.raw().clone();
        worst = worst.max(check_leaf(&[b, cs, h, w], &x0, &|t, x| {
            let rv = t.constant(raw.clone());
            let (l, _) = graphs::repr_graph_loss_on_tape(t, x, softened.clone(), &g, rv, bw).unwrap();
            t.sum_all(l).unwrap()
        }));
        let xt = Tensor::new(vec![b, cs, h, w], x0.clone()).unwrap();
        worst = worst.max(check_leaf(&[edge_dims, k], raw.data(), &|t, rv| {
            let x = t.constant(xt.clone());
            let (l, _) = graphs::repr_graph_loss_on_tape(t, x, softened.clone(), &g, rv, bw).unwrap();
            t.sum_all(l).unwrap()
        }));
    }
    worst
}

struct Setup {
    cfg: DistillConfig,
    state: DistillState,
    clips: Tensor,
    labels: Vec<usize>,
    teacher_logits: Vec<Tensor>,
    softened: Option<Tensor>,
}

fn total_loss_setup(seed: u64, mode: Mode) -> Setup {
    let mut r = rng(500 + seed);
    let g = Geometry {
        frames: 2,
        channels: 1,
        height: 8,
        width: 8,
        ..Geometry::default()
    };
    let n_teachers = 3;
    let c = 4;
    let b = r.gen_range(2..4);
    let mut cfg = DistillConfig::new(n_teachers);
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.sketch_dim = 32;
    cfg.bandwidth = Bandwidth::Fixed(0.3);
    cfg.lambda = r.gen_range(0.1..0.9);
    cfg.beta = r.gen_range(0.1..2.0);
    let student = StudentModel::new(&g, vec![Block { out: 3, pool: true }, Block { out: 4, pool: true }], c, seed).unwrap();
    let tap_lens = [12, 8, 10];
    let mut state = DistillState::new(&cfg, student, n_teachers, &tap_lens).unwrap();
    if let Some(lg) = state.logits_graph.as_mut() {
        lg.set_raw(random_tensor(&mut r, &[n_teachers, n_teachers], 1.0)).unwrap();
    }
    if let Some(rg) = state.repr_graph.as_mut() {
        let shape = rg.raw().shape().to_vec();
        rg.set_raw(random_tensor(&mut r, &shape, 1.0)).unwrap();
    }
    let taps: Vec<Tensor> = tap_lens.iter().map(|&l| random_tensor(&mut r, &[b, l], 1.0)).collect();
    let softened = state.softened_targets(&taps).unwrap();
    Setup {
        cfg,
        clips: random_tensor(&mut r, &[b, 2, 1, 8, 8], 1.0),
        labels: (0..b).map(|_| r.gen_range(0..c)).collect(),
        teacher_logits: (0..n_teachers).map(|_| random_tensor(&mut r, &[b, c], 3.0)).collect(),
        softened,
        state,
    }
}

fn flat_params(s: &DistillState) -> Vec<f64> {
    let mut v: Vec<f64> = s.student.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    v.extend(s.logits_graph.iter().flat_map(|g| g.raw().data().to_vec()));
    v.extend(s.repr_graph.iter().flat_map(|g| g.raw().data().to_vec()));
    v
}

fn set_flat(s: &mut DistillState, p: &[f64]) {
    let mut off = 0;
    let mut take = |t: &Tensor| {
        let out = Tensor::new(t.shape().to_vec(), p[off..off + t.len()].to_vec()).unwrap();
        off += t.len();
        out
    };
    let names: Vec<String> = s.student.params.names().map(str::to_string).collect();
    for n in names {
        let t = take(s.student.params.get(&n).unwrap());
        s.student.params.set(&n, t).unwrap();
    }
    if let Some(g) = s.logits_graph.as_mut() {
        let t = take(g.raw());
        g.set_raw(t).unwrap();
    }
    if let Some(g) = s.repr_graph.as_mut() {
        let t = take(g.raw());
        g.set_raw(t).unwrap();
    }
}

pub fn total_loss() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mode = Mode::ALL[seed as usize % Mode::ALL.len()];
        let s = total_loss_setup(seed, mode);
        let targets = BatchTargets {
            labels: &s.labels,
            teacher_logits: &s.teacher_logits,
            softened: s.softened.as_ref(),
        };
        let mut tape = Tape::new();
        let svars = s.state.student.params.bind(&mut tape, &|_| true);
        let gv = GraphVars {
            logits: s.state.logits_graph.as_ref().map(|g| tape.param(g.raw().clone())),
            repr: s.state.repr_graph.as_ref().map(|g| tape.param(g.raw().clone())),
        };
        let (l, _) = trainer::total_loss_on_tape(&mut tape, &s.cfg, &s.state, &svars, gv, &s.clips, &targets).unwrap();
        tape.backward(l).unwrap();
        let mut analytic = Vec::new();
        for &v in svars.iter().chain(gv.logits.iter()).chain(gv.repr.iter()) {
            match tape.grad(v) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        let p0 = flat_params(&s.state);
        let mut work = s.state.clone();
        let numeric = numeric_grad(&p0, H, &mut |p| {
            set_flat(&mut work, p);
            trainer::total_loss(&s.cfg, &work, &s.clips, &targets).unwrap().total
        });
        let e = rel_error(&analytic, &numeric);
        worst = worst.max(e);
    }
    worst
}

pub fn column_slices_and_concatenation() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        let (b, c) = (r.gen_range(1..4), r.gen_range(4..9));
        let x0 = random_vec(&mut r, b * c, 1.0);
        let w = random_vec(&mut r, b * c, 1.0);
        let cut = r.gen_range(1..c);
        worst = worst.max(check_leaf(&[b, c], &x0, &|t, x| {
            let left = t.slice_cols(x, 0, cut).unwrap();
            let right = t.slice_cols(x, cut, c - cut).unwrap();
            let swapped = t.concat_cols(&[right, left]).unwrap();
            let sq = t.mul(swapped, swapped).unwrap();
            let wv = t.constant(Tensor::new(vec![b, c], w.clone()).unwrap());
            let y = t.mul(sq, wv).unwrap();
            t.sum_all(y).unwrap()
        }));
    }
    worst
}
