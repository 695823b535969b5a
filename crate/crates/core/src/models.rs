//! Small convolutional teachers and student, their pretext heads, and the
//! training loops for pretext pretraining and classification fine-tuning.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{self, Geometry, PretextConfig, PretextSample, Task, VideoClip};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::metrics;
use crate::optim::{Adam, LrSchedule};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))?;
        if e.1.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: e.1.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        e.1 = t;
        Ok(())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Order-sensitive hash of every name and value bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (n, t) in &self.entries {
            for b in n.bytes().chain(t.checksum().to_le_bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Records every entry on `tape`; entries selected by `trainable`
    /// become gradient leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

fn var(store: &ParamStore, vars: &[Var], name: &str) -> Result<Var> {
    store
        .index_of(name)
        .map(|i| vars[i])
        .ok_or_else(|| invalid(format!("missing parameter {name}")))
}

/// One 3×3 conv + ReLU, optionally followed by 2× average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub out: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<Block>,
}

impl EncoderConfig {
    /// Tap (last block) shape `(channels, h, w)` for an `h × w` input.
    pub fn tap_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let pools = self.blocks.iter().filter(|b| b.pool).count();
        (
            self.blocks.last().map_or(self.in_channels, |b| b.out),
            h >> pools,
            w >> pools,
        )
    }

    pub fn pools(&self) -> usize {
        self.blocks.iter().filter(|b| b.pool).count()
    }

    fn init(&self, prefix: &str, r: &mut rng::Rng, store: &mut ParamStore) {
        let mut c_in = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            store.push(format!("{prefix}.{i}.w"), conv_init(b.out, c_in, r));
            store.push(format!("{prefix}.{i}.b"), Tensor::zeros(&[b.out]));
            c_in = b.out;
        }
    }

    /// Records the encoder on `tape` and returns its tap output.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, vars: &[Var], prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let k = var(store, vars, &format!("{prefix}.{i}.w"))?;
            let bias = var(store, vars, &format!("{prefix}.{i}.b"))?;
            h = tape.conv2d(h, k, 1, 1)?;
            h = tape.add_bias(h, bias)?;
            h = tape.relu(h)?;
            if b.pool {
                h = tape.avg_pool2(h)?;
            }
        }
        Ok(h)
    }
}

fn uniform(shape: &[usize], bound: f64, r: &mut rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn conv_init(out: usize, c_in: usize, r: &mut rng::Rng) -> Tensor {
    uniform(&[out, c_in, 3, 3], math::sqrt(6.0 / (c_in * 9) as f64), r)
}

fn linear_init(fan_in: usize, fan_out: usize, r: &mut rng::Rng) -> Tensor {
    uniform(&[fan_in, fan_out], math::sqrt(6.0 / (fan_in + fan_out) as f64), r)
}

fn linear(tape: &mut Tape, store: &ParamStore, vars: &[Var], prefix: &str, x: Var) -> Result<Var> {
    let w = var(store, vars, &format!("{prefix}.w"))?;
    let b = var(store, vars, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    tape.reshape(x, &[s[0], rest])
}

/// Sliding windows of `window` consecutive frames, stacked on channels:
/// `[b, f, ch, h, w]` → `[b · (f − window + 1), window · ch', h, w]` where
/// `ch'` is 1 when `grayscale` is set.
pub fn frame_windows(clips: &Tensor, window: usize, grayscale: bool) -> Result<Tensor> {
    let s = clips.shape();
    if s.len() != 5 {
        return Err(invalid("clips must be [batch, frames, channels, h, w]"));
    }
    let (b, f, ch, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if window == 0 || window > f {
        return Err(invalid(format!("window of {window} frames does not fit {f} frames")));
    }
    let plane = h * w;
    let out_ch = if grayscale { 1 } else { ch };
    let nw = f - window + 1;
    let mut data = Vec::with_capacity(b * nw * window * out_ch * plane);
    for i in 0..b {
        for start in 0..nw {
            for t in start..start + window {
                let frame = &clips.data()[((i * f + t) * ch) * plane..((i * f + t + 1) * ch) * plane];
                if grayscale && ch > 1 {
                    for p in 0..plane {
                        data.push((0..ch).map(|c| frame[c * plane + p]).sum::<f64>() / ch as f64);
                    }
                } else if grayscale {
                    data.extend_from_slice(&frame[..plane]);
                } else {
                    data.extend_from_slice(frame);
                }
            }
        }
    }
    Tensor::new(vec![b * nw, window * out_ch, h, w], data)
}

/// Static description of a teacher: task, input handling and layer sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub task: Task,
    pub frames: usize,
    pub frame_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames stacked into one encoder input.
    pub window: usize,
    pub grayscale: bool,
    pub encoder: EncoderConfig,
    pub sort_n: usize,
    pub decoder_channels: usize,
    /// Width of the frame-pair fusion layer of the sorting and closeness heads.
    pub fusion_width: usize,
    pub margin: f64,
}

impl TeacherSpec {
    pub fn new(task: Task, g: &Geometry, blocks: Vec<Block>, pretext: &PretextConfig) -> Result<Self> {
        let grayscale = task == Task::Sorting;
        let window = if task == Task::Prediction { pretext.context_len } else { 1 };
        let per_frame = if grayscale { 1 } else { g.channels };
        let spec = TeacherSpec {
            task,
            frames: g.frames,
            frame_channels: g.channels,
            height: g.height,
            width: g.width,
            window,
            grayscale,
            encoder: EncoderConfig {
                in_channels: window * per_frame,
                blocks,
            },
            sort_n: pretext.sort_n,
            decoder_channels: 16,
            fusion_width: 32,
            margin: 1.0,
        };
        let pools = spec.encoder.pools();
        if spec.height % (1 << pools) != 0 || spec.width % (1 << pools) != 0 {
            return Err(Error::InvalidGeometry("frame size must be divisible by the pooling factor".into()));
        }
        if task == Task::Tracking && pretext.patch % (1 << pools) != 0 {
            return Err(Error::InvalidGeometry("patch size must be divisible by the pooling factor".into()));
        }
        Ok(spec)
    }

    pub fn n_windows(&self) -> usize {
        self.frames - self.window + 1
    }

    pub fn tap_shape(&self) -> (usize, usize, usize) {
        self.encoder.tap_shape(self.height, self.width)
    }

    pub fn tap_len(&self) -> usize {
        let (c, h, w) = self.tap_shape();
        c * h * w
    }

    fn pretext_outputs(&self) -> usize {
        match self.task {
            Task::Sorting => data::sorting_label_count(self.sort_n),
            Task::Egomotion => 2,
            Task::Tracking | Task::Prediction => 0,
        }
    }

    fn pretext_inputs(&self) -> usize {
        match self.task {
            Task::Sorting => self.sort_n,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub spec: TeacherSpec,
    pub params: ParamStore,
    pub n_classes: Option<usize>,
}

impl TeacherModel {
    /// Seeded encoder and pretext head; no classification head yet.
    pub fn new(spec: TeacherSpec, seed: u64) -> Self {
        let mut r = rng::stream(rng::derive(seed, 0x7eac), spec.task as u64);
        let mut params = ParamStore::new();
        spec.encoder.init("enc", &mut r, &mut params);
        let outputs = spec.pretext_outputs();
        if outputs > 0 {
            let n = spec.pretext_inputs();
            let h = spec.fusion_width;
            params.push("pretext.pair.w", linear_init(2 * spec.tap_len(), h, &mut r));
            params.push("pretext.pair.b", Tensor::zeros(&[h]));
            params.push("pretext.w", linear_init(n * (n - 1) / 2 * h, outputs, &mut r));
            params.push("pretext.b", Tensor::zeros(&[outputs]));
        }
        if spec.task == Task::Prediction {
            let mut c_in = spec.tap_shape().0;
            let pools = spec.encoder.pools();
            for i in 0..pools {
                let out = if i + 1 == pools {
                    spec.frame_channels
                } else {
                    spec.decoder_channels
                };
                params.push(format!("dec.{i}.w"), conv_init(out, c_in, &mut r));
                params.push(format!("dec.{i}.b"), Tensor::zeros(&[out]));
                c_in = out;
            }
        }
        TeacherModel {
            spec,
            params,
            n_classes: None,
        }
    }

    /// Parameters used for classification: encoder plus classification head.
    pub fn classifier_param_count(&self) -> usize {
        self.params.count_prefix("enc.") + self.params.count_prefix("cls.")
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count_prefix("enc.")
    }

    /// Adds a fresh `n_classes`-way head, replacing any existing one.
    pub fn attach_classifier(&mut self, n_classes: usize, seed: u64) {
        let mut r = rng::stream(rng::derive(seed, 0xc1a5), self.spec.task as u64);
        self.params.remove_prefix("cls.");
        let fan_in = self.spec.n_windows() * self.spec.tap_len();
        self.params.push("cls.w", linear_init(fan_in, n_classes, &mut r));
        self.params.push("cls.b", Tensor::zeros(&[n_classes]));
        self.n_classes = Some(n_classes);
    }

    /// Classification logits `[b, c]` and tap `[b, c_t, h, w]` (mean over
    /// frame windows) for clips `[b, f, ch, h, w]`.
    pub fn classify_on_tape(&self, tape: &mut Tape, vars: &[Var], clips: &Tensor) -> Result<(Var, Var)> {
        if self.n_classes.is_none() {
            return Err(invalid("teacher has no classification head"));
        }
        self.spec.classify(&self.params, tape, vars, clips)
    }

    /// Frozen forward pass: logits `[b, c]` and tap features `[b, c_t, h, w]`.
    pub fn forward_batch(&self, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, &|_| false);
        let (l, t) = self.classify_on_tape(&mut tape, &vars, clips)?;
        Ok((tape.value(l).clone(), tape.value(t).clone()))
    }

    /// Mean pretext loss over `batch`, recorded on `tape`.
    pub fn pretext_loss_on_tape(&self, tape: &mut Tape, vars: &[Var], batch: &[&PretextSample]) -> Result<Var> {
        self.spec.pretext_loss(&self.params, tape, vars, batch)
    }

    /// See [`TeacherSpec::pretext_score`].
    pub fn pretext_score(&self, samples: &[PretextSample], batch_size: usize) -> Result<f64> {
        self.spec.pretext_score(&self.params, samples, batch_size)
    }
}

impl TeacherSpec {
    /// Classification logits `[b, c]` and tap `[b, c_t, h, w]` (mean over
    /// frame windows) for clips `[b, f, ch, h, w]`.
    pub fn classify(&self, params: &ParamStore, tape: &mut Tape, vars: &[Var], clips: &Tensor) -> Result<(Var, Var)> {
        let b = clips.shape()[0];
        let x = tape.constant(frame_windows(clips, self.window, self.grayscale)?);
        let tap = self.encoder.forward(tape, params, vars, "enc", x)?;
        let (c, h, w) = self.tap_shape();
        let nw = self.n_windows();
        let feats = tape.reshape(tap, &[b, nw * c * h * w])?;
        let logits = linear(tape, params, vars, "cls", feats)?;
        let per_window = tape.reshape(tap, &[b, nw, c * h * w])?;
        let mean = tape.mean_axis1(per_window)?;
        let mean = tape.reshape(mean, &[b, c, h, w])?;
        Ok((logits, mean))
    }

    pub fn check_arity(&self, s: &PretextSample) -> Result<()> {
        let ok = match (self.task, s) {
            (Task::Sorting, PretextSample::Sorting { frames, .. }) => frames.shape()[0] == self.sort_n,
            (Task::Egomotion, PretextSample::Egomotion { .. })
            | (Task::Tracking, PretextSample::Tracking { .. }) => true,
            (Task::Prediction, PretextSample::Prediction { context, .. }) => context.shape()[0] == self.window,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "{} sample does not fit a {} teacher",
                s.task().name(),
                self.task.name()
            )))
        }
    }

    /// Mean pretext loss over `batch`, recorded on `tape`.
    pub fn pretext_loss(&self, params: &ParamStore, tape: &mut Tape, vars: &[Var], batch: &[&PretextSample]) -> Result<Var> {
        for s in batch {
            self.check_arity(s)?;
        }
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("pretext batch"));
        }
        let spec = self;
        match spec.task {
            Task::Sorting | Task::Egomotion => {
                let (inputs, labels) = stack_classification(batch)?;
                let logits = spec.order_logits(params, tape, vars, inputs)?;
                let ce = tape.cross_entropy(logits, &labels)?;
                tape.mean_all(ce)
            }
            Task::Tracking => {
                let (a, p, n) = self.triplet_embeddings(params, tape, vars, batch)?;
                let d_ap = sq_dist(tape, a, p)?;
                let d_an = sq_dist(tape, a, n)?;
                let diff = tape.sub(d_ap, d_an)?;
                let m = tape.constant(Tensor::full(&[b], spec.margin));
                let hinge = tape.add(diff, m)?;
                let hinge = tape.relu(hinge)?;
                tape.mean_all(hinge)
            }
            Task::Prediction => {
                let (pred, target) = self.predict_frames(params, tape, vars, batch)?;
                let t = tape.constant(target);
                let diff = tape.sub(pred, t)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean_all(sq)
            }
        }
    }

    /// Sorting and closeness logits for inputs `[b, n, ch, h, w]`. Every
    /// frame pair goes through a shared fusion layer; the fused pairs feed a
    /// linear classifier. A purely linear head over concatenated frames
    /// could not compare frames with each other.
    fn order_logits(&self, params: &ParamStore, tape: &mut Tape, vars: &[Var], inputs: Tensor) -> Result<Var> {
        let s = inputs.shape().to_vec();
        let (b, n) = (s[0], s[1]);
        let len = self.tap_len();
        let x = tape.constant(inputs.reshape(&[b * n, s[2], s[3], s[4]])?);
        let tap = self.encoder.forward(tape, params, vars, "enc", x)?;
        let feats = tape.reshape(tap, &[b, n * len])?;
        let frames: Vec<Var> = (0..n).map(|i| tape.slice_cols(feats, i * len, len)).collect::<Result<_>>()?;
        let mut fused = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let pair = tape.concat_cols(&[frames[i], frames[j]])?;
                let h = linear(tape, params, vars, "pretext.pair", pair)?;
                fused.push(tape.relu(h)?);
            }
        }
        let fused = tape.concat_cols(&fused)?;
        linear(tape, params, vars, "pretext", fused)
    }

    fn triplet_embeddings(&self, params: &ParamStore, tape: &mut Tape, vars: &[Var], batch: &[&PretextSample]) -> Result<(Var, Var, Var)> {
        let b = batch.len();
        let first = &batch[0].inputs()[0];
        let s = first.shape().to_vec();
        let mut data = Vec::with_capacity(3 * b * first.len());
        for slot in 0..3 {
            for smp in batch {
                data.extend_from_slice(smp.inputs()[slot].data());
            }
        }
        let x = tape.constant(Tensor::new(vec![3 * b, s[0], s[1], s[2]], data)?);
        let tap = self.encoder.forward(tape, params, vars, "enc", x)?;
        let emb = tape.global_avg_pool(tap)?;
        let c = tape.shape(emb)[1];
        let emb = tape.reshape(emb, &[3, b * c])?;
        // Split the three stacked groups through selector matmuls so that
        // gradients flow back to the shared encoder.
        let mut out = Vec::with_capacity(3);
        for slot in 0..3 {
            let mut sel = Tensor::zeros(&[1, 3]);
            sel.data_mut()[slot] = 1.0;
            let sel = tape.constant(sel);
            let part = tape.matmul(sel, emb)?;
            out.push(tape.reshape(part, &[b, c])?);
        }
        Ok((out[0], out[1], out[2]))
    }

    fn predict_frames(&self, params: &ParamStore, tape: &mut Tape, vars: &[Var], batch: &[&PretextSample]) -> Result<(Var, Tensor)> {
        let b = batch.len();
        let mut ctx = Vec::new();
        let mut tgt = Vec::new();
        for s in batch {
            if let PretextSample::Prediction { context, target } = s {
                ctx.extend_from_slice(context.data());
                tgt.extend_from_slice(target.data());
            }
        }
        let spec = self;
        let (h, w) = (spec.height, spec.width);
        let x = tape.constant(Tensor::new(vec![b, spec.encoder.in_channels, h, w], ctx)?);
        let mut y = spec.encoder.forward(tape, params, vars, "enc", x)?;
        let pools = spec.encoder.pools();
        for i in 0..pools {
            y = tape.upsample2(y)?;
            let k = var(params, vars, &format!("dec.{i}.w"))?;
            let bias = var(params, vars, &format!("dec.{i}.b"))?;
            y = tape.conv2d(y, k, 1, 1)?;
            y = tape.add_bias(y, bias)?;
            if i + 1 < pools {
                y = tape.relu(y)?;
            }
        }
        Ok((y, Tensor::new(vec![b, spec.frame_channels, h, w], tgt)?))
    }

    /// Held-out pretext score: accuracy for sorting and closeness, fraction
    /// of triples with `d(a,p) + margin ≤ d(a,n)` for tracking, and mean
    /// squared error for prediction.
    pub fn pretext_score(&self, params: &ParamStore, samples: &[PretextSample], batch_size: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("pretext samples"));
        }
        let mut total = 0.0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&PretextSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, &|_| false);
            total += match self.task {
                Task::Sorting | Task::Egomotion => {
                    let (inputs, labels) = stack_classification(&refs)?;
                    let logits = self.order_logits(params, &mut tape, &vars, inputs)?;
                    let l = tape.value(logits);
                    labels
                        .iter()
                        .enumerate()
                        .filter(|&(i, &y)| metrics::argmax(l.row(i)) == y)
                        .count() as f64
                }
                Task::Tracking => {
                    let (a, p, n) = self.triplet_embeddings(params, &mut tape, &vars, &refs)?;
                    let d_ap = sq_dist(&mut tape, a, p)?;
                    let d_an = sq_dist(&mut tape, a, n)?;
                    let (ap, an) = (tape.value(d_ap).data(), tape.value(d_an).data());
                    ap.iter()
                        .zip(an)
                        .filter(|(x, y)| **x + self.margin <= **y)
                        .count() as f64
                }
                Task::Prediction => {
                    let (pred, target) = self.predict_frames(params, &mut tape, &vars, &refs)?;
                    let p = tape.value(pred);
                    let per = p.len() / chunk.len();
                    p.data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / per as f64
                }
            };
        }
        Ok(total / samples.len() as f64)
    }
}

fn sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    tape.sum_last(d2)
}

fn stack_classification(batch: &[&PretextSample]) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    let mut shape = Vec::new();
    for s in batch {
        match s {
            PretextSample::Sorting { frames, label } | PretextSample::Egomotion { frames, label } => {
                if shape.is_empty() {
                    shape = frames.shape().to_vec();
                } else if shape != frames.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "pretext batch",
                        lhs: shape,
                        rhs: frames.shape().to_vec(),
                    });
                }
                data.extend_from_slice(frames.data());
                labels.push(*label);
            }
            _ => return Err(invalid("expected classification samples")),
        }
    }
    let mut full = vec![batch.len()];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub encoder: EncoderConfig,
    pub params: ParamStore,
    pub n_classes: usize,
    pub frames: usize,
    pub frame_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StudentModel {
    /// Frame-stacked encoder followed by a linear classifier on the
    /// flattened tap.
    pub fn new(g: &Geometry, blocks: Vec<Block>, n_classes: usize, seed: u64) -> Result<Self> {
        let encoder = EncoderConfig {
            in_channels: g.frames * g.channels,
            blocks,
        };
        let pools = encoder.pools();
        if g.height % (1 << pools) != 0 || g.width % (1 << pools) != 0 {
            return Err(Error::InvalidGeometry("frame size must be divisible by the pooling factor".into()));
        }
        let mut r = rng::stream(rng::derive(seed, 0x57d7), 0);
        let mut params = ParamStore::new();
        encoder.init("enc", &mut r, &mut params);
        let (c, h, w) = encoder.tap_shape(g.height, g.width);
        params.push("cls.w", linear_init(c * h * w, n_classes, &mut r));
        params.push("cls.b", Tensor::zeros(&[n_classes]));
        Ok(StudentModel {
            encoder,
            params,
            n_classes,
            frames: g.frames,
            frame_channels: g.channels,
            height: g.height,
            width: g.width,
        })
    }

    pub fn tap_shape(&self) -> (usize, usize, usize) {
        self.encoder.tap_shape(self.height, self.width)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Logits `[b, c]` and tap `[b, c_s, h, w]` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], clips: &Tensor) -> Result<(Var, Var)> {
        let s = clips.shape();
        if s.len() != 5 || s[1] != self.frames || s[2] != self.frame_channels || s[3] != self.height || s[4] != self.width {
            return Err(Error::ShapeMismatch {
                op: "StudentModel::forward",
                lhs: vec![self.frames, self.frame_channels, self.height, self.width],
                rhs: s.to_vec(),
            });
        }
        let b = s[0];
        let x = tape.constant(clips.clone().reshape(&[b, self.frames * self.frame_channels, self.height, self.width])?);
        let tap = self.encoder.forward(tape, &self.params, vars, "enc", x)?;
        let feats = flatten(tape, tap)?;
        let logits = linear(tape, &self.params, vars, "cls", feats)?;
        Ok((logits, tap))
    }

    pub fn forward_batch(&self, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, &|_| false);
        let (l, t) = self.forward_on_tape(&mut tape, &vars, clips)?;
        Ok((tape.value(l).clone(), tape.value(t).clone()))
    }
}

/// Anything that maps a clip batch to logits and a tap feature.
pub trait Classifier {
    fn classify(&self, clips: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl Classifier for TeacherModel {
    fn classify(&self, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_batch(clips)
    }
}

impl Classifier for StudentModel {
    fn classify(&self, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_batch(clips)
    }
}

/// Logits `[c]` and tap feature `[c_t, h, w]` of a single clip.
pub fn forward_with_tap<M: Classifier>(model: &M, clip: &VideoClip) -> Result<(Vec<f64>, Tensor)> {
    let batch = data::stack_clips(&[clip])?;
    let (logits, tap) = model.classify(&batch)?;
    let s = tap.shape()[1..].to_vec();
    Ok((logits.into_data(), tap.reshape(&s)?))
}

/// Batched logits `[n, c]` and taps `[n, c_t, h, w]` for a clip list.
pub fn infer<M: Classifier>(model: &M, clips: &[VideoClip], batch_size: usize) -> Result<(Tensor, Tensor)> {
    if clips.is_empty() {
        return Err(Error::Empty("clips"));
    }
    let mut logits = Vec::new();
    let mut taps = Vec::new();
    let mut shapes = (Vec::new(), Vec::new());
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&VideoClip> = chunk.iter().collect();
        let (l, t) = model.classify(&data::stack_clips(&refs)?)?;
        shapes = (l.shape()[1..].to_vec(), t.shape()[1..].to_vec());
        logits.extend(l.into_data());
        taps.extend(t.into_data());
    }
    let mut ls = vec![clips.len()];
    ls.extend(shapes.0);
    let mut ts = vec![clips.len()];
    ts.extend(shapes.1);
    Ok((Tensor::new(ls, logits)?, Tensor::new(ts, taps)?))
}

pub fn predict<M: Classifier>(model: &M, clips: &[VideoClip], batch_size: usize) -> Result<Vec<usize>> {
    let (logits, _) = infer(model, clips, batch_size)?;
    let c = logits.shape()[1];
    Ok(logits.data().chunks(c).map(metrics::argmax).collect())
}

/// Optimizer settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch_size: 32,
            schedule: LrSchedule {
                lr0: 0.003,
                every: 10,
                factor: 0.5,
            },
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    /// Validation objective per epoch (lower is better).
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// Minibatch Adam over the entries of `params` selected by `trainable`.
/// After training the parameters with the lowest validation objective are
/// kept. `loss` receives the tape, the bound variables and the sample
/// indices of one batch; `val` scores a parameter snapshot.
pub fn fit(
    params: &mut ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    n_samples: usize,
    cfg: &FitConfig,
    loss: &dyn Fn(&ParamStore, &mut Tape, &[Var], &[usize]) -> Result<Var>,
    val: &dyn Fn(&ParamStore) -> Result<f64>,
) -> Result<FitReport> {
    if n_samples == 0 {
        return Err(Error::Empty("training set"));
    }
    let selected: Vec<usize> = params.names().enumerate().filter(|(_, n)| trainable(n)).map(|(i, _)| i).collect();
    let lens: Vec<usize> = selected.iter().map(|&i| params.entries[i].1.len()).collect();
    let decay: Vec<bool> = selected.iter().map(|&i| decays(&params.entries[i].0)).collect();
    let mut opt = Adam::new(&lens, cfg.beta1, cfg.beta2, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut report = FitReport {
        epochs_run: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, params.clone());
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(rng::derive(cfg.seed, 0xf17), epoch as u64);
        order.shuffle(&mut r);
        let lr = cfg.schedule.lr(epoch);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, trainable);
            let l = loss(params, &mut tape, &vars, idx).map_err(|e| diverged(epoch, e))?;
            let value = tape.scalar(l);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite loss".to_string(),
                });
            }
            sum += value * idx.len() as f64;
            tape.backward(l)?;
            let grads: Vec<Vec<f64>> = selected
                .iter()
                .map(|&i| tape.grad(vars[i]).map_or_else(|| vec![0.0; lens_of(params, i)], <[f64]>::to_vec))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut targets: Vec<&mut Tensor> = Vec::with_capacity(selected.len());
            let mut sel = selected.iter().peekable();
            for (i, (_, t)) in params.entries.iter_mut().enumerate() {
                if sel.peek() == Some(&&i) {
                    sel.next();
                    targets.push(t);
                }
            }
            opt.update(&mut targets, &grad_refs, &decay, lr)
                .map_err(|e| diverged(epoch, e))?;
        }
        report.train_loss.push(sum / n_samples as f64);
        let v = val(params)?;
        report.val_loss.push(v);
        report.epochs_run = epoch + 1;
        if v < best.0 {
            best = (v, params.clone());
            report.best_epoch = epoch;
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }
    if report.epochs_run > 0 {
        *params = best.1;
    }
    Ok(report)
}

fn lens_of(p: &ParamStore, i: usize) -> usize {
    p.entries[i].1.len()
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains encoder and pretext head on `train`; validation loss on `val`
/// drives early stopping.
pub fn pretrain_teacher(
    model: &mut TeacherModel,
    train: &[PretextSample],
    val: &[PretextSample],
    cfg: &FitConfig,
) -> Result<FitReport> {
    let spec = &model.spec;
    for s in train.iter().chain(val) {
        spec.check_arity(s)?;
    }
    let eval_batch = cfg.batch_size.max(1) * 4;
    let loss = |p: &ParamStore, tape: &mut Tape, vars: &[Var], idx: &[usize]| {
        let batch: Vec<&PretextSample> = idx.iter().map(|&i| &train[i]).collect();
        spec.pretext_loss(p, tape, vars, &batch)
    };
    let val_fn = |p: &ParamStore| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in val.chunks(eval_batch) {
            let refs: Vec<&PretextSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, &|_| false);
            let l = spec.pretext_loss(p, &mut tape, &vars, &refs)?;
            total += tape.scalar(l) * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    };
    let trainable = |n: &str| n.starts_with("enc.") || n.starts_with("pretext.") || n.starts_with("dec.");
    fit(&mut model.params, &trainable, train.len(), cfg, &loss, &val_fn)
}

/// Which teacher parameters move during classification fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetunePolicy {
    HeadOnly,
    Full,
}

/// Attaches a fresh `n_classes`-way head and trains it on labeled clips,
/// keeping the parameters with the lowest validation cross-entropy.
pub fn finetune_classifier(
    model: &mut TeacherModel,
    train: &[VideoClip],
    val: &[VideoClip],
    n_classes: usize,
    policy: FinetunePolicy,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Empty("labeled clips"));
    }
    model.attach_classifier(n_classes, cfg.seed);
    let spec = &model.spec;
    let eval_batch = cfg.batch_size.max(1) * 4;
    let ce = |p: &ParamStore, tape: &mut Tape, vars: &[Var], clips: &[&VideoClip]| -> Result<Var> {
        let x = data::stack_clips(clips)?;
        let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        let (logits, _) = spec.classify(p, tape, vars, &x)?;
        let l = tape.cross_entropy(logits, &labels)?;
        tape.mean_all(l)
    };
    let loss = |p: &ParamStore, tape: &mut Tape, vars: &[Var], idx: &[usize]| {
        let clips: Vec<&VideoClip> = idx.iter().map(|&i| &train[i]).collect();
        ce(p, tape, vars, &clips)
    };
    let val_fn = |p: &ParamStore| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in val.chunks(eval_batch) {
            let refs: Vec<&VideoClip> = chunk.iter().collect();
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, &|_| false);
            let l = ce(p, &mut tape, &vars, &refs)?;
            total += tape.scalar(l) * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    };
    let head_only = policy == FinetunePolicy::HeadOnly;
    let trainable = move |n: &str| n.starts_with("cls.") || (!head_only && n.starts_with("enc."));
    fit(&mut model.params, &trainable, train.len(), cfg, &loss, &val_fn)
}
