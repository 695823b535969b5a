//! Versioned binary checkpoints.
//!
//! Layout, all little-endian: magic `GKDCKPT\0`, format version (u32),
//! kind, config hash, metadata count (u32) with `key`/`value` strings, then
//! tensor count (u32) and per tensor its name, rank (u32), dimensions (u64
//! each) and raw f64 data. Strings are a u32 byte length plus UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use graphkd_core::models::{ParamStore, StudentModel, TeacherModel};
use graphkd_core::sketch::{SketchBank, SketchParams};
use graphkd_core::trainer::{DistillState, Mode};
use graphkd_core::Tensor;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    pub fn put_meta(&mut self, k: &str, v: impl ToString) {
        self.meta.insert(k.to_string(), v.to_string());
    }

    pub fn meta_num<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        self.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("checkpoint metadata {k} is missing or malformed")))
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {name}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.kind);
        w.str(&self.config_hash);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.bytes(8)? != MAGIC {
            return Err(r.err("not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.str()?;
        let config_hash = r.str()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err("tensor size overflow"))?;
            let data = r.f64s(len)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Checkpoint {
            kind,
            config_hash,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }

    /// Reads a checkpoint of `kind`. A config hash other than `expected` is
    /// an error unless `force` is set.
    pub fn load(path: &Path, kind: &str, expected: &str, force: bool) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let c = Checkpoint::decode(&codec::read_file(path)?, path)?;
        if c.kind != kind {
            return Err(Error::format(path, format!("holds a {} checkpoint, expected {kind}", c.kind)));
        }
        if !force && c.config_hash != expected {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: c.config_hash,
            });
        }
        Ok(c)
    }
}

fn put_params(c: &mut Checkpoint, prefix: &str, p: &ParamStore) {
    for (name, t) in p.iter() {
        c.put(format!("{prefix}{name}"), t.clone());
    }
}

/// Overwrites every entry of `p` from `c`, checking shapes.
fn take_params(c: &Checkpoint, prefix: &str, p: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        let t = c.require(&format!("{prefix}{name}"))?;
        p.set(&name, t.clone())?;
    }
    Ok(())
}

pub fn teacher_checkpoint(t: &TeacherModel, config_hash: &str) -> Checkpoint {
    let mut c = Checkpoint::new("teacher", config_hash);
    c.put_meta("task", t.spec.task.tag());
    if let Some(n) = t.n_classes {
        c.put_meta("classes", n);
    }
    put_params(&mut c, "", &t.params);
    c
}

/// Restores the parameters of `t` (built from the same config) from `c`.
/// A checkpoint with a classification head attaches one first.
pub fn restore_teacher(c: &Checkpoint, t: &mut TeacherModel) -> Result<()> {
    if c.meta.get("task").map(String::as_str) != Some(t.spec.task.tag()) {
        return Err(Error::Config("checkpoint belongs to a different pretext task".into()));
    }
    if let Some(n) = c.meta.get("classes") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config("malformed class count".into()))?;
        t.attach_classifier(n, 0);
    }
    take_params(c, "", &mut t.params)
}

fn put_sketch(c: &mut Checkpoint, key: &str, p: &SketchParams) {
    c.put(format!("{key}.h"), Tensor::from_vec(p.h.iter().map(|&h| h as f64).collect()));
    c.put(format!("{key}.s"), Tensor::from_vec(p.s.clone()));
}

fn take_sketch(c: &Checkpoint, key: &str, dim: usize) -> Result<SketchParams> {
    let h = c
        .require(&format!("{key}.h"))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    let s = c.require(&format!("{key}.s"))?.data().to_vec();
    Ok(SketchParams::new(h, s, dim)?)
}

/// Student parameters, graph parameters, sketch bank and optimizer state.
pub fn run_checkpoint(s: &DistillState, run: &(Mode, u64), config_hash: &str, best_epoch: usize) -> Checkpoint {
    let mut c = Checkpoint::new("student", config_hash);
    c.put_meta("mode", run.0.name());
    c.put_meta("seed", run.1);
    c.put_meta("epoch", s.epoch);
    c.put_meta("best_epoch", best_epoch);
    c.put_meta("adam.step", s.adam.step);
    put_params(&mut c, "student.", &s.student.params);
    if let Some(g) = &s.logits_graph {
        c.put("graph.logits.raw", g.raw().clone());
    }
    if let Some(g) = &s.repr_graph {
        c.put("graph.repr.raw", g.raw().clone());
    }
    if let Some(bank) = &s.sketch {
        c.put_meta("sketch.dim", bank.dim());
        for (k, (p1, p2)) in bank.params.iter().enumerate() {
            put_sketch(&mut c, &format!("sketch.{k}.a"), p1);
            put_sketch(&mut c, &format!("sketch.{k}.b"), p2);
        }
    }
    for (i, (m, v)) in s.adam.m.iter().zip(&s.adam.v).enumerate() {
        c.put(format!("adam.m.{i}"), Tensor::from_vec(m.clone()));
        c.put(format!("adam.v.{i}"), Tensor::from_vec(v.clone()));
    }
    c
}

/// Loads a run checkpoint into `s`, a fresh state built from the same
/// config.
pub fn restore_run(c: &Checkpoint, s: &mut DistillState) -> Result<()> {
    take_params(c, "student.", &mut s.student.params)?;
    if let Some(g) = s.logits_graph.as_mut() {
        g.set_raw(c.require("graph.logits.raw")?.clone())?;
    }
    if let Some(g) = s.repr_graph.as_mut() {
        g.set_raw(c.require("graph.repr.raw")?.clone())?;
    }
    if let Some(bank) = s.sketch.as_mut() {
        let dim: usize = c.meta_num("sketch.dim")?;
        let params = (0..bank.pairs.len())
            .map(|k| {
                Ok((
                    take_sketch(c, &format!("sketch.{k}.a"), dim)?,
                    take_sketch(c, &format!("sketch.{k}.b"), dim)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        *bank = SketchBank {
            pairs: bank.pairs.clone(),
            params,
        };
    }
    for i in 0..s.adam.m.len() {
        let m = c.require(&format!("adam.m.{i}"))?;
        let v = c.require(&format!("adam.v.{i}"))?;
        if m.len() != s.adam.m[i].len() || v.len() != s.adam.v[i].len() {
            return Err(Error::Config(format!("optimizer slot {i} has the wrong length")));
        }
        s.adam.m[i] = m.data().to_vec();
        s.adam.v[i] = v.data().to_vec();
    }
    s.adam.step = c.meta_num("adam.step")?;
    s.epoch = c.meta_num("epoch")?;
    Ok(())
}

/// The student alone, for evaluation.
pub fn restore_student(c: &Checkpoint, student: &mut StudentModel) -> Result<()> {
    take_params(c, "student.", &mut student.params)
}
