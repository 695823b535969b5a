//! Distillation objective, training loop, evaluation and ablation
//! summaries.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::VideoClip;
use crate::error::{invalid, Error, Result};
use crate::graphs::{self, Bandwidth, EdgeWeights, LogitsGraph, ReprGraph};
use crate::math;
use crate::metrics;
use crate::models::StudentModel;
use crate::optim::{Adam, LrSchedule};
use crate::rng;
use crate::sketch::{self, SketchBank};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Cross-entropy only.
    Scratch,
    /// Logits-graph loss with all edge weights frozen equal.
    UniformKd,
    /// Logits-graph loss with learned edge weights.
    GlOnly,
    /// Representation-graph loss only, next to cross-entropy.
    GrOnly,
    /// Both graphs.
    GlGr,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Scratch, Mode::UniformKd, Mode::GlOnly, Mode::GrOnly, Mode::GlGr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::UniformKd => "uniform_kd",
            Mode::GlOnly => "gl_only",
            Mode::GrOnly => "gr_only",
            Mode::GlGr => "gl_gr",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_logits_graph(self) -> bool {
        matches!(self, Mode::UniformKd | Mode::GlOnly | Mode::GlGr)
    }

    pub fn learns_logits_edges(self) -> bool {
        matches!(self, Mode::GlOnly | Mode::GlGr)
    }

    pub fn uses_repr_graph(self) -> bool {
        matches!(self, Mode::GrOnly | Mode::GlGr)
    }

    /// Weights `(ce, soft, repr)` of the three loss terms.
    pub fn weights(self, lambda: f64, beta: f64) -> (f64, f64, f64) {
        match self {
            Mode::Scratch => (1.0, 0.0, 0.0),
            Mode::UniformKd | Mode::GlOnly => (1.0 - lambda, lambda, 0.0),
            Mode::GrOnly => (1.0 - lambda, 0.0, beta),
            Mode::GlGr => (1.0 - lambda, lambda, beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Softening temperature of each teacher's logits.
    pub teacher_temperatures: Vec<f64>,
    /// Softening temperature of each representation vertex, also used to
    /// scale its edge parameters.
    pub vertex_temperatures: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: Mode,
    pub sketch_dim: usize,
    pub shared_sketch: bool,
    /// Edge parameters per representation vertex.
    pub vector_edges: usize,
    /// Distance between adjacent class bins in the Earth-Mover ground
    /// metric; `None` spaces `c` classes evenly over `[0, 1]`.
    pub ground_spacing: Option<f64>,
    pub bandwidth: Bandwidth,
}

pub const DEFAULT_TEMPERATURE: f64 = 4.0;

impl DistillConfig {
    pub fn new(n_teachers: usize) -> Self {
        let k = n_teachers * n_teachers.saturating_sub(1) / 2;
        DistillConfig {
            lambda: 0.6,
            beta: 0.5,
            teacher_temperatures: vec![DEFAULT_TEMPERATURE; n_teachers],
            vertex_temperatures: vec![DEFAULT_TEMPERATURE; k],
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            seed: 0,
            mode: Mode::GlGr,
            sketch_dim: 256,
            shared_sketch: false,
            vector_edges: 1,
            ground_spacing: None,
            bandwidth: Bandwidth::Median(256),
        }
    }

    /// The full-scale schedule: 350 epochs, batch 128, lr 0.01 halved every
    /// 50 epochs.
    pub fn full_scale(mut self) -> Self {
        self.epochs = 350;
        self.batch_size = 128;
        self.lr = 0.01;
        self.lr_decay_every = 50;
        self.lr_decay_factor = 0.5;
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr,
            every: self.lr_decay_every,
            factor: self.lr_decay_factor,
        }
    }

    pub fn validate(&self, n_teachers: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(invalid("lambda must lie in [0, 1)"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta must be nonnegative"));
        }
        if self.teacher_temperatures.iter().chain(&self.vertex_temperatures).any(|&t| !(t > 0.0)) {
            return Err(invalid("temperatures must be positive"));
        }
        if self.batch_size == 0 || self.sketch_dim == 0 || self.vector_edges == 0 {
            return Err(invalid("batch size, sketch dimension and edge dimension must be positive"));
        }
        if self.mode != Mode::Scratch {
            if n_teachers == 0 {
                return Err(invalid(format!("mode {} needs teachers", self.mode.name())));
            }
            if self.teacher_temperatures.len() != n_teachers {
                return Err(Error::LengthMismatch {
                    op: "teacher temperatures",
                    expected: n_teachers,
                    actual: self.teacher_temperatures.len(),
                });
            }
        }
        if self.mode.uses_repr_graph() {
            let k = n_teachers * n_teachers.saturating_sub(1) / 2;
            if self.vertex_temperatures.len() != k {
                return Err(Error::LengthMismatch {
                    op: "vertex temperatures",
                    expected: k,
                    actual: self.vertex_temperatures.len(),
                });
            }
        }
        Ok(())
    }
}

/// Labeled clips stacked as `[n, frames, channels, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub clips: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn from_clips(clips: &[VideoClip]) -> Result<Self> {
        let refs: Vec<&VideoClip> = clips.iter().collect();
        Ok(LabeledSet {
            clips: crate::data::stack_clips(&refs)?,
            labels: clips.iter().map(|c| c.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((gather_rows(&self.clips, idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Rows `idx` of a tensor along its first axis.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let row = t.len() / n;
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(invalid(format!("row {i} out of range for {n} rows")));
        }
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Frozen teacher outputs on the training clips.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    /// One `[n, c]` logits tensor per teacher.
    pub logits: Vec<Tensor>,
    /// One `[n, c_t, h, w]` tap tensor per teacher.
    pub taps: Vec<Tensor>,
}

/// Raw bilinear vertices of every sample, `[n, k, e]`.
pub fn vertex_tensor(taps: &[Tensor], bank: &SketchBank) -> Result<Tensor> {
    let n = taps.first().ok_or(Error::Empty("teacher taps"))?.shape()[0];
    let lens: Vec<usize> = taps.iter().map(|t| t.len() / n).collect();
    let (k, e) = (bank.n_vertices(), bank.dim());
    let mut data = Vec::with_capacity(n * k * e);
    for i in 0..n {
        let feats: Vec<&[f64]> = taps
            .iter()
            .zip(&lens)
            .map(|(t, &l)| &t.data()[i * l..(i + 1) * l])
            .collect();
        for v in sketch::build_vertices(&feats, bank)? {
            data.extend(v.vector);
        }
    }
    Tensor::new(vec![n, k, e], data)
}

/// Everything the distillation loop reads besides the student.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillData {
    pub train: LabeledSet,
    pub teacher_logits: Vec<Tensor>,
    /// Softened vertex channels `[n, k, ck, s]`, present when the mode
    /// uses the representation graph.
    pub softened: Option<Tensor>,
}

/// Student, graphs and optimizer state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub student: StudentModel,
    pub logits_graph: Option<LogitsGraph>,
    pub repr_graph: Option<ReprGraph>,
    pub sketch: Option<SketchBank>,
    pub adam: Adam,
    pub epoch: usize,
}

impl DistillState {
    /// Fresh graphs for `n_teachers` and a zeroed optimizer. The sketch
    /// bank is drawn from the run seed when the mode needs it.
    pub fn new(cfg: &DistillConfig, student: StudentModel, n_teachers: usize, teacher_tap_lens: &[usize]) -> Result<Self> {
        cfg.validate(n_teachers)?;
        let logits_graph = if cfg.mode.uses_logits_graph() {
            Some(LogitsGraph::new(n_teachers, cfg.teacher_temperatures.clone())?)
        } else {
            None
        };
        let (repr_graph, sketch) = if cfg.mode.uses_repr_graph() {
            let (_, h, w) = student.tap_shape();
            if cfg.sketch_dim % (h * w) != 0 {
                return Err(invalid(format!(
                    "sketch dimension {} is not a multiple of the student spatial size {}",
                    cfg.sketch_dim,
                    h * w
                )));
            }
            (
                Some(ReprGraph::new(n_teachers, cfg.vertex_temperatures.clone(), cfg.vector_edges)?),
                Some(SketchBank::random(teacher_tap_lens, cfg.sketch_dim, cfg.shared_sketch, cfg.seed)?),
            )
        } else {
            (None, None)
        };
        let mut lens: Vec<usize> = student.params.iter().map(|(_, t)| t.len()).collect();
        lens.extend(logits_graph.iter().map(|g| g.raw().len()));
        lens.extend(repr_graph.iter().map(|g| g.raw().len()));
        let adam = Adam::new(&lens, cfg.beta1, cfg.beta2, cfg.weight_decay)?;
        Ok(DistillState {
            student,
            logits_graph,
            repr_graph,
            sketch,
            adam,
            epoch: 0,
        })
    }

    /// Softened vertex targets for the training clips, given teacher taps.
    pub fn softened_targets(&self, taps: &[Tensor]) -> Result<Option<Tensor>> {
        match (&self.repr_graph, &self.sketch) {
            (Some(g), Some(bank)) => {
                let raw = vertex_tensor(taps, bank)?;
                let (_, h, w) = self.student.tap_shape();
                Ok(Some(graphs::soften_vertex_tensor(&raw, g, h * w)?))
            }
            _ => Ok(None),
        }
    }
}

/// Batch means of the three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub soft: f64,
    pub repr: f64,
    pub total: f64,
}

/// Graph inputs of one batch.
pub struct BatchTargets<'a> {
    pub labels: &'a [usize],
    /// Per-teacher `[b, c]` logits.
    pub teacher_logits: &'a [Tensor],
    /// `[b, k, ck, s]` softened vertex channels.
    pub softened: Option<&'a Tensor>,
}

/// Leaves of the graph parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub logits: Option<Var>,
    pub repr: Option<Var>,
}

/// The mode-weighted objective recorded on `tape`; returns the scalar
/// total and the values of its parts.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    cfg: &DistillConfig,
    state: &DistillState,
    student_vars: &[Var],
    graph_vars: GraphVars,
    clips: &Tensor,
    targets: &BatchTargets<'_>,
) -> Result<(Var, LossParts)> {
    let (w_ce, w_soft, w_repr) = cfg.mode.weights(cfg.lambda, cfg.beta);
    let (logits, tap) = state.student.forward_on_tape(tape, student_vars, clips)?;
    let b = targets.labels.len();
    let ce = tape.cross_entropy(logits, targets.labels)?;
    let ce = tape.mean_all(ce)?;
    let mut parts = LossParts {
        ce: tape.scalar(ce),
        ..LossParts::default()
    };
    let mut total = tape.scale(ce, w_ce)?;
    if cfg.mode.uses_logits_graph() {
        let g = state
            .logits_graph
            .as_ref()
            .ok_or_else(|| invalid("mode needs a logits graph"))?;
        if targets.teacher_logits.len() != g.n_teachers() {
            return Err(invalid("missing teacher logits"));
        }
        let raw = graph_vars.logits.ok_or_else(|| invalid("logits graph parameters are not bound"))?;
        let c = tape.shape(logits)[1];
        let spacing = cfg.ground_spacing.unwrap_or_else(|| metrics::default_spacing(c));
        let l = graphs::logits_graph_loss_on_tape(tape, logits, targets.teacher_logits, g, raw, spacing)?;
        let l = tape.mean_all(l)?;
        parts.soft = tape.scalar(l);
        let l = tape.scale(l, w_soft)?;
        total = tape.add(total, l)?;
    }
    if cfg.mode.uses_repr_graph() {
        let g = state
            .repr_graph
            .as_ref()
            .ok_or_else(|| invalid("mode needs a representation graph"))?;
        let softened = targets.softened.ok_or_else(|| invalid("missing representation vertices"))?;
        if softened.shape()[0] != b {
            return Err(invalid("vertex batch does not match the label batch"));
        }
        let raw = graph_vars.repr.ok_or_else(|| invalid("representation graph parameters are not bound"))?;
        let (l, _) = graphs::repr_graph_loss_on_tape(tape, tap, softened.clone(), g, raw, cfg.bandwidth)?;
        let l = tape.mean_all(l)?;
        parts.repr = tape.scalar(l);
        let l = tape.scale(l, w_repr)?;
        total = tape.add(total, l)?;
    }
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

/// Evaluates the objective without gradients.
pub fn total_loss(cfg: &DistillConfig, state: &DistillState, clips: &Tensor, targets: &BatchTargets<'_>) -> Result<LossParts> {
    let mut tape = Tape::new();
    let vars = state.student.params.bind(&mut tape, &|_| false);
    let gv = GraphVars {
        logits: state.logits_graph.as_ref().map(|g| tape.constant(g.raw().clone())),
        repr: state.repr_graph.as_ref().map(|g| tape.constant(g.raw().clone())),
    };
    Ok(total_loss_on_tape(&mut tape, cfg, state, &vars, gv, clips, targets)?.1)
}

/// One row of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_soft: f64,
    pub train_repr: f64,
    pub train_total: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    /// Incoming logits-graph weights, receiver-major `n × n`.
    pub logits_weights: Vec<f64>,
    /// Representation vertex weights.
    pub repr_weights: Vec<f64>,
}

impl MetricsRecord {
    /// `|total − (w_ce·CE + w_soft·ℓ_s + w_repr·ℒ_r)|` for `mode`.
    pub fn decomposition_error(&self, cfg: &DistillConfig) -> f64 {
        let (a, b, c) = cfg.mode.weights(cfg.lambda, cfg.beta);
        math::abs(self.train_total - (a * self.train_ce + b * self.train_soft + c * self.train_repr))
    }
}

/// Top-1 accuracy with a per-class breakdown and the confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

pub fn evaluate(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "evaluate",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(invalid(format!("class index out of range for {n_classes} classes")));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[k] as f64 / support as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        per_class,
        confusion,
        n: labels.len(),
    })
}

/// Student logits `[n, c]` for a labeled set, in batches.
pub fn student_logits(student: &StudentModel, set: &LabeledSet, batch_size: usize) -> Result<Tensor> {
    let n = set.len();
    let mut out = Vec::with_capacity(n * student.n_classes);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (clips, _) = set.gather(chunk)?;
        let (l, _) = student.forward_batch(&clips)?;
        out.extend(l.into_data());
    }
    Tensor::new(vec![n, student.n_classes], out)
}

pub fn evaluate_student(student: &StudentModel, set: &LabeledSet, batch_size: usize) -> Result<Evaluation> {
    let logits = student_logits(student, set, batch_size)?;
    let preds: Vec<usize> = logits.data().chunks(student.n_classes).map(metrics::argmax).collect();
    evaluate(&preds, &set.labels, student.n_classes)
}

fn mean_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = logits.shape()[1];
    let mut s = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        s += metrics::cross_entropy(row, y)?;
    }
    Ok(s / labels.len() as f64)
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// State after the epoch with the best validation accuracy (ties go to
    /// the lower validation cross-entropy).
    pub best: DistillState,
    pub best_epoch: usize,
    pub last: DistillState,
    pub records: Vec<MetricsRecord>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// Runs the remaining epochs of `state`. `on_epoch` sees every record
/// together with the state it describes and whether that state is the best
/// so far; returning an error stops training.
pub fn train(
    cfg: &DistillConfig,
    mut state: DistillState,
    data: &DistillData,
    val: &LabeledSet,
    on_epoch: &mut dyn FnMut(&MetricsRecord, &DistillState, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    let n_teachers = data.teacher_logits.len();
    cfg.validate(n_teachers)?;
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if cfg.mode.uses_repr_graph() && data.softened.is_none() {
        return Err(invalid("mode needs representation vertices"));
    }
    let mut decay: Vec<bool> = state.student.params.names().map(decays).collect();
    decay.extend(state.logits_graph.iter().map(|_| false));
    decay.extend(state.repr_graph.iter().map(|_| false));
    let schedule = cfg.schedule();
    let mut records = Vec::new();
    let mut best: Option<(f64, f64, DistillState)> = None;
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in state.epoch..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut r = rng::stream(rng::derive(cfg.seed, 0xd157), epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut r);
        let mut sums = LossParts::default();
        for idx in order.chunks(cfg.batch_size) {
            let (clips, labels) = data.train.gather(idx)?;
            let teacher_logits: Vec<Tensor> = data
                .teacher_logits
                .iter()
                .map(|t| gather_rows(t, idx))
                .collect::<Result<_>>()?;
            let softened = data.softened.as_ref().map(|s| gather_rows(s, idx)).transpose()?;
            let targets = BatchTargets {
                labels: &labels,
                teacher_logits: &teacher_logits,
                softened: softened.as_ref(),
            };
            let mut tape = Tape::new();
            let svars = state.student.params.bind(&mut tape, &|_| true);
            let gv = GraphVars {
                logits: state.logits_graph.as_ref().map(|g| {
                    if cfg.mode.learns_logits_edges() {
                        tape.param(g.raw().clone())
                    } else {
                        tape.constant(g.raw().clone())
                    }
                }),
                repr: state.repr_graph.as_ref().map(|g| tape.param(g.raw().clone())),
            };
            let (loss, parts) = total_loss_on_tape(&mut tape, cfg, &state, &svars, gv, &clips, &targets)
                .map_err(|e| as_divergence(epoch, e))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite loss".into(),
                });
            }
            let w = idx.len() as f64;
            sums.ce += parts.ce * w;
            sums.soft += parts.soft * w;
            sums.repr += parts.repr * w;
            sums.total += parts.total * w;
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(decay.len());
            for &v in svars.iter().chain(gv.logits.iter()).chain(gv.repr.iter()) {
                grads.push(
                    tape.grad(v)
                        .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec),
                );
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let DistillState {
                student,
                logits_graph,
                repr_graph,
                adam,
                ..
            } = &mut state;
            let mut lg_raw = logits_graph.as_ref().map(|g| g.raw().clone());
            let mut rg_raw = repr_graph.as_ref().map(|g| g.raw().clone());
            {
                let mut targets: Vec<&mut Tensor> = student.params.tensors_mut();
                targets.extend(lg_raw.iter_mut());
                targets.extend(rg_raw.iter_mut());
                adam.update(&mut targets, &grad_refs, &decay, lr)
                    .map_err(|e| as_divergence(epoch, e))?;
            }
            if let (Some(g), Some(raw)) = (logits_graph.as_mut(), lg_raw) {
                g.set_raw(raw)?;
            }
            if let (Some(g), Some(raw)) = (repr_graph.as_mut(), rg_raw) {
                g.set_raw(raw)?;
            }
        }
        state.epoch = epoch + 1;
        let val_logits = student_logits(&state.student, val, cfg.batch_size.max(64))?;
        let val_ce = mean_ce(&val_logits, &val.labels)?;
        let c = state.student.n_classes;
        let preds: Vec<usize> = val_logits.data().chunks(c).map(metrics::argmax).collect();
        let val_acc = evaluate(&preds, &val.labels, c)?.accuracy;
        let nf = n as f64;
        let record = MetricsRecord {
            epoch,
            lr,
            train_ce: sums.ce / nf,
            train_soft: sums.soft / nf,
            train_repr: sums.repr / nf,
            train_total: sums.total / nf,
            val_ce,
            val_acc,
            logits_weights: state
                .logits_graph
                .as_ref()
                .map(|g| g.weight_table().rows.concat())
                .unwrap_or_default(),
            repr_weights: state.repr_graph.as_ref().map(ReprGraph::weights).unwrap_or_default(),
        };
        let improved = match &best {
            None => true,
            Some((acc, ce, _)) => val_acc > *acc || (val_acc == *acc && val_ce < *ce),
        };
        if improved {
            best = Some((val_acc, val_ce, state.clone()));
            best_epoch = epoch;
        }
        on_epoch(&record, &state, improved)?;
        records.push(record);
    }
    let best = match best {
        Some((_, _, s)) => s,
        None => state.clone(),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: state,
        records,
    })
}

fn as_divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Mean and sample standard deviation of one ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    /// Representation-loss weight, when the row belongs to a sweep over it.
    pub beta: Option<f64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failures: Vec<String>,
}

impl AblationRow {
    pub fn new(mode: Mode, accuracies: Vec<f64>, failures: Vec<String>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        AblationRow {
            mode,
            beta: None,
            accuracies,
            mean,
            std,
            failures,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    /// Mode name, suffixed with the swept weight if there is one.
    pub fn label(&self) -> String {
        match self.beta {
            Some(b) => format!("{}-beta{b}", self.mode.name()),
            None => self.mode.name().into(),
        }
    }

    /// At least as accurate as `other` on average, and either by `min_gap`
    /// or with disjoint one-standard-deviation intervals.
    pub fn dominates(&self, other: &AblationRow, min_gap: f64) -> bool {
        self.mean >= other.mean
            && (self.mean - other.mean >= min_gap || self.mean - self.std > other.mean + other.std)
    }
}

/// Mean and sample (n − 1) standard deviation; zero spread for fewer than
/// two values, NaN mean for none.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_weights() {
        assert_eq!(Mode::Scratch.weights(0.6, 0.5), (1.0, 0.0, 0.0));
        assert_eq!(Mode::GlGr.weights(0.6, 0.5), (0.4, 0.6, 0.5));
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
    }

    #[test]
    fn evaluation_cases() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(evaluate(&labels, &labels, 4).unwrap().accuracy, 1.0);
        let e = evaluate(&[0; 8], &labels, 4).unwrap();
        assert_eq!(e.accuracy, 0.25);
        assert_eq!(e.per_class[0], Some(1.0));
        assert_eq!(e.per_class[1], Some(0.0));
        assert!(evaluate(&[], &[], 4).is_err());
    }

    #[test]
    fn dominance_rule() {
        let a = AblationRow::new(Mode::GlGr, alloc::vec![0.80, 0.82], alloc::vec![]);
        let b = AblationRow::new(Mode::Scratch, alloc::vec![0.78, 0.80], alloc::vec![]);
        assert!(a.dominates(&b, 0.01));
        assert!(!b.dominates(&a, 0.01));
        let c = AblationRow::new(Mode::UniformKd, alloc::vec![0.805, 0.815], alloc::vec![]);
        assert!(!a.dominates(&c, 0.01));
    }
}
