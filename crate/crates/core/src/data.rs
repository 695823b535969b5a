//! Synthetic moving-shape videos and the four self-supervised task samplers
//! built on them: frame sorting, temporal closeness, patch tracking and
//! next-frame prediction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Bumped whenever rendering changes in a way that alters pixels.
pub const GENERATOR_VERSION: u32 = 1;

pub const N_SHAPES: usize = 4;
pub const N_MOTIONS: usize = 4;

/// Unit displacement of each motion pattern: right, left, down, up.
pub const MOTIONS: [(i32, i32); N_MOTIONS] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    /// Object speed in pixels per frame, drawn uniformly from this range.
    pub speed: (u32, u32),
    /// Amplitude of uniform pixel noise added before clamping.
    pub noise: f64,
    pub distractors: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            frames: 6,
            channels: 1,
            height: 16,
            width: 16,
            object_size: 5,
            speed: (1, 1),
            noise: 0.15,
            distractors: 1,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::InvalidGeometry(format!("clips need at least 4 frames, got {}", self.frames)));
        }
        if self.channels == 0 || self.object_size == 0 {
            return Err(Error::InvalidGeometry("channels and object size must be positive".into()));
        }
        if self.speed.0 > self.speed.1 {
            return Err(Error::InvalidGeometry("speed range is empty".into()));
        }
        let travel = (self.frames - 1) * self.speed.1 as usize;
        let side = self.height.min(self.width);
        if self.object_size + travel > side {
            return Err(Error::InvalidGeometry(format!(
                "object of size {} moving {} pixels does not fit a {}x{} frame",
                self.object_size, travel, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidGeometry("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distractor {
    pub start: (i32, i32),
    pub velocity: (i32, i32),
    pub intensity: f64,
}

/// Everything needed to re-render a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    pub shape: usize,
    /// Top-left corner of the object in frame 0, as `(x, y)`.
    pub start: (i32, i32),
    /// Displacement per frame, as `(dx, dy)`.
    pub velocity: (i32, i32),
    pub intensity: f64,
    pub distractors: Vec<Distractor>,
    pub noise_seed: u64,
}

impl ClipMeta {
    /// Top-left corner of the object in frame `t`.
    pub fn position(&self, t: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * t as i32,
            self.start.1 + self.velocity.1 * t as i32,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[frames, channels, height, width]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub meta: ClipMeta,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let len = self.frames.len() / self.n_frames();
        &self.frames.data()[t * len..(t + 1) * len]
    }
}

/// Class `k` is the pair (shape `k / 4`, motion `k % 4`).
pub fn class_parts(label: usize) -> (usize, usize) {
    (label / N_MOTIONS, label % N_MOTIONS)
}

/// Whether pixel `(r, c)` of a `size × size` stamp belongs to `shape`.
pub fn shape_mask(shape: usize, size: usize, r: usize, c: usize) -> bool {
    let last = size - 1;
    let mid = size / 2;
    match shape {
        0 => true,
        1 => r == 0 || c == 0 || r == last || c == last,
        2 => r == mid || c == mid,
        _ => r == c || r + c == last,
    }
}

/// Renders `meta` into a `[frames, channels, height, width]` tensor.
pub fn render(meta: &ClipMeta, g: &Geometry) -> Result<Tensor> {
    let (h, w) = (g.height as i32, g.width as i32);
    let size = g.object_size;
    let mut noise_rng = rng::stream(meta.noise_seed, 0);
    let mut data = vec![0.0; g.clip_len()];
    for t in 0..g.frames {
        let mut plane = vec![0.0f64; g.height * g.width];
        for d in &meta.distractors {
            let x0 = d.start.0 + d.velocity.0 * t as i32;
            let y0 = d.start.1 + d.velocity.1 * t as i32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let x = (x0 + dx).rem_euclid(w) as usize;
                    let y = (y0 + dy).rem_euclid(h) as usize;
                    let p = &mut plane[y * g.width + x];
                    *p = p.max(d.intensity);
                }
            }
        }
        let (x0, y0) = meta.position(t);
        for r in 0..size {
            for c in 0..size {
                if !shape_mask(meta.shape, size, r, c) {
                    continue;
                }
                let (x, y) = (x0 + c as i32, y0 + r as i32);
                if x < 0 || y < 0 || x >= w || y >= h {
                    return Err(Error::InvalidGeometry(format!("object leaves the frame at t={t}")));
                }
                let p = &mut plane[y as usize * g.width + x as usize];
                *p = p.max(meta.intensity);
            }
        }
        for ch in 0..g.channels {
            let off = (t * g.channels + ch) * g.height * g.width;
            for (dst, &v) in data[off..off + plane.len()].iter_mut().zip(&plane) {
                let n = if g.noise > 0.0 {
                    noise_rng.gen_range(-g.noise..g.noise)
                } else {
                    0.0
                };
                *dst = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![g.frames, g.channels, g.height, g.width], data)
}

/// Clip `index` of the dataset drawn from `seed`; pure in `(seed, index)`.
/// Labels cycle through the classes so every split of a multiple of
/// `n_classes` consecutive clips is balanced.
pub fn generate_clip(seed: u64, index: usize, n_classes: usize, g: &Geometry) -> Result<VideoClip> {
    if n_classes < 2 || n_classes > N_SHAPES * N_MOTIONS {
        return Err(Error::InvalidArgument(format!(
            "n_classes must lie in 2..={}",
            N_SHAPES * N_MOTIONS
        )));
    }
    g.validate()?;
    let mut r = rng::stream(seed, index as u64);
    let label = index % n_classes;
    let (shape, motion) = class_parts(label);
    let speed = r.gen_range(g.speed.0..=g.speed.1) as i32;
    let (ux, uy) = MOTIONS[motion];
    let velocity = (ux * speed, uy * speed);
    let travel = (g.frames as i32 - 1) * speed;
    let size = g.object_size as i32;
    let axis_start = |r: &mut Rng, extent: i32, v: i32| -> i32 {
        let free = extent - size - travel * v.abs().signum();
        let s = r.gen_range(0..=free);
        if v < 0 {
            s + travel
        } else {
            s
        }
    };
    let start = (
        axis_start(&mut r, g.width as i32, velocity.0),
        axis_start(&mut r, g.height as i32, velocity.1),
    );
    let intensity = r.gen_range(0.6..1.0);
    let distractors = (0..g.distractors)
        .map(|_| Distractor {
            start: (r.gen_range(0..g.width as i32), r.gen_range(0..g.height as i32)),
            velocity: (r.gen_range(-1..=1), r.gen_range(-1..=1)),
            intensity: r.gen_range(0.3..0.9),
        })
        .collect();
    let meta = ClipMeta {
        shape,
        start,
        velocity,
        intensity,
        distractors,
        noise_seed: r.gen(),
    };
    let frames = render(&meta, g)?;
    Ok(VideoClip { frames, label, meta })
}

pub fn generate_dataset(seed: u64, n_clips: usize, n_classes: usize, g: &Geometry) -> Result<Vec<VideoClip>> {
    (0..n_clips).map(|i| generate_clip(seed, i, n_classes, g)).collect()
}

/// Stacks clips into `[b, frames, channels, height, width]`.
pub fn stack_clips(clips: &[&VideoClip]) -> Result<Tensor> {
    let first = clips.first().ok_or(Error::Empty("stack_clips"))?;
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(first.frames.shape());
    let mut data = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        if c.frames.shape() != first.frames.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_clips",
                lhs: first.frames.shape().to_vec(),
                rhs: c.frames.shape().to_vec(),
            });
        }
        data.extend_from_slice(c.frames.data());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Sorting,
    Egomotion,
    Tracking,
    Prediction,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Sorting, Task::Egomotion, Task::Tracking, Task::Prediction];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Sorting => "S",
            Task::Egomotion => "M",
            Task::Tracking => "T",
            Task::Prediction => "P",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sorting => "sorting",
            Task::Egomotion => "egomotion",
            Task::Tracking => "tracking",
            Task::Prediction => "prediction",
        }
    }

    /// Accepts either the one-letter tag or the full name.
    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL
            .into_iter()
            .find(|t| s.eq_ignore_ascii_case(t.tag()) || s.eq_ignore_ascii_case(t.name()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretextSample {
    /// `frames` is `[n, 1, h, w]` in shuffled order.
    Sorting { frames: Tensor, label: usize },
    /// `frames` is `[2, ch, h, w]`; label is [`EGO_CLOSE`] or [`EGO_FAR`].
    Egomotion { frames: Tensor, label: usize },
    /// Three `[ch, p, p]` patches.
    Tracking {
        anchor: Tensor,
        positive: Tensor,
        negative: Tensor,
    },
    /// `context` is `[context_len, ch, h, w]`, `target` is `[ch, h, w]`.
    Prediction { context: Tensor, target: Tensor },
}

impl PretextSample {
    pub fn task(&self) -> Task {
        match self {
            PretextSample::Sorting { .. } => Task::Sorting,
            PretextSample::Egomotion { .. } => Task::Egomotion,
            PretextSample::Tracking { .. } => Task::Tracking,
            PretextSample::Prediction { .. } => Task::Prediction,
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor> {
        match self {
            PretextSample::Sorting { frames, .. } | PretextSample::Egomotion { frames, .. } => vec![frames],
            PretextSample::Tracking {
                anchor,
                positive,
                negative,
            } => vec![anchor, positive, negative],
            PretextSample::Prediction { context, target } => vec![context, target],
        }
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Number of order classes for `n` frames, each permutation identified
/// with its reverse.
pub fn sorting_label_count(n: usize) -> usize {
    if n < 2 {
        1
    } else {
        factorial(n) / 2
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Canonical permutations (`p[0] < p[n-1]`) in lexicographic order.
pub fn canonical_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    loop {
        if n < 2 || p[0] < p[n - 1] {
            out.push(p.clone());
        }
        if !next_permutation(&mut p) {
            break;
        }
    }
    out
}

pub fn encode_sorting(perm: &[usize]) -> Result<usize> {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &v in perm {
        if v >= n || seen[v] {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
        seen[v] = true;
    }
    let mut canon = perm.to_vec();
    if n >= 2 && canon[0] > canon[n - 1] {
        canon.reverse();
    }
    Ok(canonical_permutations(n)
        .iter()
        .position(|p| *p == canon)
        .expect("canonical permutation is enumerated"))
}

/// The canonical permutation of `label`; its reverse carries the same label.
pub fn decode_sorting(label: usize, n: usize) -> Result<Vec<usize>> {
    canonical_permutations(n)
        .into_iter()
        .nth(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of range for n={n}")))
}

fn grayscale(frame: &[f64], channels: usize) -> Vec<f64> {
    let plane = frame.len() / channels;
    (0..plane)
        .map(|i| (0..channels).map(|c| frame[c * plane + i]).sum::<f64>() / channels as f64)
        .collect()
}

/// `n` consecutive frames from a random start, shown in a random order and
/// converted to one channel.
pub fn make_sorting_sample(clip: &VideoClip, n: usize, r: &mut Rng) -> Result<PretextSample> {
    let f = clip.n_frames();
    if !(3..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("sorting tuples have 3 or 4 frames, got {n}")));
    }
    if n > f {
        return Err(Error::InvalidArgument(format!("cannot sort {n} of {f} frames")));
    }
    let s = clip.frames.shape();
    let start = r.gen_range(0..=f - n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    let mut data = Vec::with_capacity(n * s[2] * s[3]);
    for &p in &perm {
        data.extend(grayscale(clip.frame(start + p), s[1]));
    }
    Ok(PretextSample::Sorting {
        frames: Tensor::new(vec![n, 1, s[2], s[3]], data)?,
        label: encode_sorting(&perm)?,
    })
}

pub const EGO_CLOSE: usize = 0;
pub const EGO_FAR: usize = 1;

/// Gap thresholds of the closeness task: gaps up to `close_max` are close,
/// gaps of at least `far_min` are far, anything in between is never drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgomotionConfig {
    pub close_max: usize,
    pub far_min: usize,
}

impl Default for EgomotionConfig {
    fn default() -> Self {
        EgomotionConfig {
            close_max: 1,
            far_min: 3,
        }
    }
}

pub fn make_egomotion_sample(clip: &VideoClip, cfg: EgomotionConfig, r: &mut Rng) -> Result<PretextSample> {
    let f = clip.n_frames();
    if cfg.close_max == 0 || cfg.close_max >= cfg.far_min || cfg.far_min >= f {
        return Err(Error::InvalidArgument(format!(
            "closeness thresholds {}/{} are incompatible with {f} frames",
            cfg.close_max, cfg.far_min
        )));
    }
    let label = if r.gen::<bool>() { EGO_CLOSE } else { EGO_FAR };
    let gap = if label == EGO_CLOSE {
        r.gen_range(1..=cfg.close_max)
    } else {
        r.gen_range(cfg.far_min..f)
    };
    let first = r.gen_range(0..f - gap);
    let (a, b) = if r.gen::<bool>() {
        (first, first + gap)
    } else {
        (first + gap, first)
    };
    let mut shape = clip.frames.shape().to_vec();
    shape[0] = 2;
    let mut data = clip.frame(a).to_vec();
    data.extend_from_slice(clip.frame(b));
    Ok(PretextSample::Egomotion {
        frames: Tensor::new(shape, data)?,
        label,
    })
}

/// Top-left corner `(x, y)` of a square patch.
pub type PatchCorner = (i32, i32);

pub fn crop(clip: &VideoClip, t: usize, corner: PatchCorner, size: usize) -> Result<Tensor> {
    let s = clip.frames.shape();
    let (ch, h, w) = (s[1], s[2] as i32, s[3] as i32);
    let (x0, y0) = corner;
    if x0 < 0 || y0 < 0 || x0 + size as i32 > w || y0 + size as i32 > h {
        return Err(Error::InvalidGeometry(format!("patch at {corner:?} leaves the frame")));
    }
    let frame = clip.frame(t);
    let mut data = Vec::with_capacity(ch * size * size);
    for c in 0..ch {
        for y in 0..size {
            let row = (c * h as usize + y0 as usize + y) * w as usize + x0 as usize;
            data.extend_from_slice(&frame[row..row + size]);
        }
    }
    Tensor::new(vec![ch, size, size], data)
}

pub fn patch_iou(a: PatchCorner, b: PatchCorner, size: usize) -> f64 {
    let s = size as i32;
    let ix = (s - (a.0 - b.0).abs()).max(0);
    let iy = (s - (a.1 - b.1).abs()).max(0);
    let inter = (ix * iy) as f64;
    inter / (2.0 * (s * s) as f64 - inter)
}

/// Corners of the anchor patch at `t` (centred on the object) and of the
/// positive patch at `t + delta` (moved by the object's velocity). Near a
/// border both patches are shifted together until they fit.
pub fn tracking_corners(clip: &VideoClip, t: usize, delta: usize, patch: usize, object_size: usize) -> (PatchCorner, PatchCorner) {
    let s = clip.frames.shape();
    let (x, y) = clip.meta.position(t);
    let off = object_size as i32 / 2 - patch as i32 / 2;
    let v = clip.meta.velocity;
    let (dx, dy) = (v.0 * delta as i32, v.1 * delta as i32);
    let fit = |p: i32, d: i32, extent: usize| {
        let hi = extent as i32 - patch as i32;
        let lo = (-d).max(0);
        let hi = hi.min(hi - d);
        if lo > hi {
            p
        } else {
            p.clamp(lo, hi)
        }
    };
    let anchor = (fit(x + off, dx, s[3]), fit(y + off, dy, s[2]));
    (anchor, (anchor.0 + dx, anchor.1 + dy))
}

pub const MAX_NEGATIVE_IOU: f64 = 0.25;

/// Anchor/positive/negative patch triple. Returns `Ok(None)` when the
/// object's patch leaves the frame or no admissible negative is found.
pub fn make_tracking_sample(
    clip: &VideoClip,
    patch: usize,
    delta: usize,
    object_size: usize,
    r: &mut Rng,
) -> Result<Option<PretextSample>> {
    let s = clip.frames.shape();
    let (f, h, w) = (s[0], s[2], s[3]);
    if patch == 0 || patch >= h.min(w) {
        return Err(Error::InvalidArgument(format!("patch size {patch} must be below the frame size")));
    }
    if delta == 0 || delta >= f {
        return Err(Error::InvalidArgument(format!("tracking offset {delta} must lie in 1..{f}")));
    }
    let t = r.gen_range(0..f - delta);
    let (a, p) = tracking_corners(clip, t, delta, patch, object_size);
    let (Ok(anchor), Ok(positive)) = (crop(clip, t, a, patch), crop(clip, t + delta, p, patch)) else {
        return Ok(None);
    };
    for _ in 0..100 {
        let n = (
            r.gen_range(0..=(w - patch) as i32),
            r.gen_range(0..=(h - patch) as i32),
        );
        if patch_iou(n, p, patch) <= MAX_NEGATIVE_IOU {
            let negative = crop(clip, t + delta, n, patch)?;
            return Ok(Some(PretextSample::Tracking {
                anchor,
                positive,
                negative,
            }));
        }
    }
    Ok(None)
}

pub fn make_prediction_sample(clip: &VideoClip, context_len: usize) -> Result<PretextSample> {
    let f = clip.n_frames();
    if context_len == 0 || context_len >= f {
        return Err(Error::InvalidArgument(format!(
            "context of {context_len} frames leaves no target in a {f}-frame clip"
        )));
    }
    let s = clip.frames.shape();
    let frame_len = clip.frames.len() / f;
    let data = &clip.frames.data()[..context_len * frame_len];
    let context = Tensor::new(vec![context_len, s[1], s[2], s[3]], data.to_vec())?;
    let target = Tensor::new(vec![s[1], s[2], s[3]], clip.frame(context_len).to_vec())?;
    Ok(PretextSample::Prediction { context, target })
}

/// Sampler settings for all four tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextConfig {
    pub sort_n: usize,
    pub egomotion: EgomotionConfig,
    pub patch: usize,
    pub track_delta: usize,
    pub context_len: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            sort_n: 3,
            egomotion: EgomotionConfig::default(),
            patch: 8,
            track_delta: 1,
            context_len: 2,
        }
    }
}

/// One sample of `task` per clip (tracking may skip clips), drawn from a
/// stream derived from `seed` and the task.
pub fn make_task_samples(
    clips: &[VideoClip],
    task: Task,
    cfg: &PretextConfig,
    object_size: usize,
    seed: u64,
) -> Result<Vec<PretextSample>> {
    let mut r = rng::stream(rng::derive(seed, 0x9e7e), task as u64);
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        match task {
            Task::Sorting => out.push(make_sorting_sample(clip, cfg.sort_n, &mut r)?),
            Task::Egomotion => out.push(make_egomotion_sample(clip, cfg.egomotion, &mut r)?),
            Task::Tracking => {
                if let Some(s) = make_tracking_sample(clip, cfg.patch, cfg.track_delta, object_size, &mut r)? {
                    out.push(s);
                }
            }
            Task::Prediction => out.push(make_prediction_sample(clip, cfg.context_len)?),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_space_sizes() {
        assert_eq!(sorting_label_count(3), 3);
        assert_eq!(sorting_label_count(4), 12);
        assert_eq!(canonical_permutations(4).len(), 12);
    }

    #[test]
    fn reversed_permutation_shares_label() {
        for p in [[0usize, 2, 1, 3], [3, 1, 0, 2], [1, 0, 3, 2]] {
            let mut q = p;
            q.reverse();
            assert_eq!(encode_sorting(&p).unwrap(), encode_sorting(&q).unwrap());
        }
        assert!(encode_sorting(&[0, 0, 1]).is_err());
    }

    #[test]
    fn geometry_rejects_oversized_object() {
        let g = Geometry {
            object_size: 20,
            ..Geometry::default()
        };
        assert!(matches!(generate_clip(1, 0, 8, &g), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn iou_cases() {
        assert_eq!(patch_iou((0, 0), (0, 0), 4), 1.0);
        assert_eq!(patch_iou((0, 0), (4, 0), 4), 0.0);
        assert!((patch_iou((0, 0), (2, 0), 4) - 8.0 / 24.0).abs() < 1e-15);
    }
}
