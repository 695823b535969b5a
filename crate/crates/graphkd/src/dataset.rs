//! `data/<split>/clips.bin` plus a plain-text `manifest.txt`.
//!
//! `clips.bin` layout, all little-endian: magic `GKDCLIPS`, format version
//! (u32), clip count (u64), frames, channels, height, width (u32 each), then
//! per clip: label (u32), shape (u32), start x/y (i32), velocity x/y (i32),
//! intensity (f64), noise seed (u64), distractor count (u32) with start,
//! velocity and intensity of each, and finally the frame pixels as f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use graphkd_core::data::{self, ClipMeta, Distractor, Geometry, VideoClip, GENERATOR_VERSION};
use graphkd_core::Tensor;

use crate::codec::{self, Reader, Writer};
use crate::config::DataPlan;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GKDCLIPS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Pretext,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Pretext];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Pretext => "pretext",
        }
    }
}

/// Generator seed and clip index range of a split. The labeled splits are
/// consecutive ranges of one stream; pretext clips come from their own seed.
pub fn split_range(plan: &DataPlan, split: Split) -> (u64, usize, usize) {
    match split {
        Split::Train => (plan.seed, 0, plan.train),
        Split::Val => (plan.seed, plan.train, plan.val),
        Split::Test => (plan.seed, plan.train + plan.val, plan.clips - plan.train - plan.val),
        Split::Pretext => (graphkd_core::rng::derive(plan.seed, 0x7072_6574), 0, plan.pretext_clips),
    }
}

pub fn generate_split(plan: &DataPlan, split: Split) -> Result<Vec<VideoClip>> {
    let (seed, first, n) = split_range(plan, split);
    (first..first + n)
        .map(|i| data::generate_clip(seed, i, plan.classes, &plan.geometry).map_err(Error::from))
        .collect()
}

pub fn split_dir(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(split.name())
}

pub fn encode_clips(clips: &[VideoClip], g: &Geometry) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(clips.len() as u64);
    for d in [g.frames, g.channels, g.height, g.width] {
        w.u32(d as u32);
    }
    for c in clips {
        let m = &c.meta;
        w.u32(c.label as u32);
        w.u32(m.shape as u32);
        w.i32(m.start.0);
        w.i32(m.start.1);
        w.i32(m.velocity.0);
        w.i32(m.velocity.1);
        w.f64(m.intensity);
        w.u64(m.noise_seed);
        w.u32(m.distractors.len() as u32);
        for d in &m.distractors {
            w.i32(d.start.0);
            w.i32(d.start.1);
            w.i32(d.velocity.0);
            w.i32(d.velocity.1);
            w.f64(d.intensity);
        }
        w.f64s(c.frames.data());
    }
    w.buf
}

/// Decodes a clip file; returns the clips and their `[F, C, H, W]` shape.
pub fn decode_clips(bytes: &[u8], path: &Path) -> Result<(Vec<VideoClip>, [usize; 4])> {
    let mut r = Reader::new(bytes, path);
    if r.bytes(8)? != MAGIC {
        return Err(r.err("not a clip file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("unsupported clip format version {version}")));
    }
    let n = r.usize()?;
    let mut shape = [0usize; 4];
    for s in &mut shape {
        *s = r.u32()? as usize;
    }
    let len: usize = shape.iter().product();
    let mut clips = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let label = r.u32()? as usize;
        let shape_id = r.u32()? as usize;
        let start = (r.i32()?, r.i32()?);
        let velocity = (r.i32()?, r.i32()?);
        let intensity = r.f64()?;
        let noise_seed = r.u64()?;
        let nd = r.u32()? as usize;
        let mut distractors = Vec::with_capacity(nd.min(1024));
        for _ in 0..nd {
            distractors.push(Distractor {
                start: (r.i32()?, r.i32()?),
                velocity: (r.i32()?, r.i32()?),
                intensity: r.f64()?,
            });
        }
        let frames = Tensor::new(shape.to_vec(), r.f64s(len)?)?;
        clips.push(VideoClip {
            frames,
            label,
            meta: ClipMeta {
                shape: shape_id,
                start,
                velocity,
                intensity,
                distractors,
                noise_seed,
            },
        });
    }
    r.finish()?;
    Ok((clips, shape))
}

/// `key = value` manifest describing one split.
pub fn manifest(plan: &DataPlan, split: Split, data_hash: &str) -> String {
    let (seed, first, n) = split_range(plan, split);
    let g = &plan.geometry;
    let mut s = String::new();
    let _ = writeln!(s, "generator_version = {GENERATOR_VERSION}");
    let _ = writeln!(s, "split = {}", split.name());
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "first_index = {first}");
    let _ = writeln!(s, "clips = {n}");
    let _ = writeln!(s, "classes = {}", plan.classes);
    let _ = writeln!(s, "shape = {}x{}x{}x{}", g.frames, g.channels, g.height, g.width);
    let _ = writeln!(s, "object_size = {}", g.object_size);
    let _ = writeln!(s, "speed = {}..={}", g.speed.0, g.speed.1);
    let _ = writeln!(s, "noise = {}", g.noise);
    let _ = writeln!(s, "distractors = {}", g.distractors);
    let _ = writeln!(s, "data_hash = {data_hash}");
    s
}

pub fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn save_split(data_dir: &Path, split: Split, clips: &[VideoClip], plan: &DataPlan, data_hash: &str) -> Result<()> {
    let dir = split_dir(data_dir, split);
    codec::write_file(&dir.join("clips.bin"), &encode_clips(clips, &plan.geometry))?;
    codec::write_file(&dir.join("manifest.txt"), manifest(plan, split, data_hash).as_bytes())
}

/// Loads a split and checks it against the manifest and, unless `force`,
/// against the data hash of the current config.
pub fn load_split(data_dir: &Path, split: Split, data_hash: &str, force: bool) -> Result<Vec<VideoClip>> {
    let dir = split_dir(data_dir, split);
    let mpath = dir.join("manifest.txt");
    let bpath = dir.join("clips.bin");
    if !mpath.exists() || !bpath.exists() {
        return Err(Error::Missing(bpath));
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_manifest(&text);
    let found = m.get("data_hash").cloned().unwrap_or_default();
    if !force && found != data_hash {
        return Err(Error::HashMismatch {
            path: mpath,
            expected: data_hash.to_string(),
            found,
        });
    }
    if m.get("generator_version").map(String::as_str) != Some(&GENERATOR_VERSION.to_string()) {
        return Err(Error::format(&mpath, "generator version differs from this build"));
    }
    let (clips, shape) = decode_clips(&codec::read_file(&bpath)?, &bpath)?;
    let declared = format!("{}x{}x{}x{}", shape[0], shape[1], shape[2], shape[3]);
    if m.get("shape") != Some(&declared) || m.get("clips") != Some(&clips.len().to_string()) {
        return Err(Error::format(&mpath, "manifest disagrees with clips.bin"));
    }
    Ok(clips)
}
