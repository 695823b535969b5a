//! Experiment configuration: a flat `key = value` text file over a fixed,
//! documented schema. Unknown keys are rejected; missing keys take their
//! defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use graphkd_core::data::{EgomotionConfig, Geometry, PretextConfig, Task};
use graphkd_core::graphs::Bandwidth;
use graphkd_core::models::{Block, FinetunePolicy, FitConfig};
use graphkd_core::optim::LrSchedule;
use graphkd_core::trainer::{DistillConfig, Mode};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `(key, default, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("data.seed", "1", "seed of the labeled clip generator"),
    ("data.clips", "2000", "labeled clips, split into train/val/test"),
    ("data.classes", "8", "number of (shape, motion) classes, 2..=16"),
    ("data.train", "1200", "clips in the train split"),
    ("data.val", "400", "clips in the validation split; the rest are test"),
    ("data.pretext_clips", "1200", "unlabeled clips for pretext training"),
    ("data.frames", "6", "frames per clip"),
    ("data.channels", "1", "channels per frame"),
    ("data.height", "16", "frame height"),
    ("data.width", "16", "frame width"),
    ("data.object_size", "5", "side of the moving shape"),
    ("data.speed_min", "1", "minimum object speed, pixels per frame"),
    ("data.speed_max", "1", "maximum object speed, pixels per frame"),
    ("data.noise", "0.8", "uniform pixel noise amplitude"),
    ("data.distractors", "3", "small moving blobs per clip"),
    ("pretext.sort_n", "3", "frames per sorting tuple (3 or 4)"),
    ("pretext.close_max", "1", "largest frame gap labeled close"),
    ("pretext.far_min", "3", "smallest frame gap labeled far"),
    ("pretext.patch", "8", "tracking patch side"),
    ("pretext.track_delta", "1", "frame offset of the tracked patch"),
    ("pretext.context_len", "2", "context frames for next-frame prediction"),
    ("teachers", "S,M,T,P", "pretext tasks of the teachers, in graph order"),
    ("teacher.blocks", "16p,32p,64,16", "teacher conv widths; a trailing p pools 2x"),
    ("teacher.seed", "7", "teacher initialization seed"),
    ("student.blocks", "8p,16p,16", "student conv widths; a trailing p pools 2x"),
    ("pretrain.epochs", "12", ""),
    ("pretrain.batch_size", "32", ""),
    ("pretrain.lr", "0.003", ""),
    ("pretrain.lr_decay_every", "6", ""),
    ("pretrain.lr_decay_factor", "0.5", ""),
    ("pretrain.weight_decay", "0.0001", ""),
    ("pretrain.patience", "10", "epochs without validation improvement before stopping"),
    ("finetune.epochs", "12", ""),
    ("finetune.batch_size", "32", ""),
    ("finetune.lr", "0.003", ""),
    ("finetune.lr_decay_every", "6", ""),
    ("finetune.lr_decay_factor", "0.5", ""),
    ("finetune.weight_decay", "0.0001", ""),
    ("finetune.patience", "10", ""),
    ("finetune.policy", "full", "full or head"),
    ("distill.lambda", "0.6", "weight of the logits-graph loss; cross-entropy gets 1 - lambda"),
    ("distill.beta", "0.5", "weight of the representation-graph loss"),
    ("distill.temperature", "4.0", "default temperature of every teacher and vertex"),
    ("distill.teacher_temperatures", "", "comma list overriding the per-teacher temperature"),
    ("distill.vertex_temperatures", "", "comma list overriding the per-vertex temperature"),
    ("distill.epochs", "60", ""),
    ("distill.batch_size", "32", ""),
    ("distill.lr", "0.01", ""),
    ("distill.lr_decay_every", "20", ""),
    ("distill.lr_decay_factor", "0.5", ""),
    ("distill.beta1", "0.9", "Adam first-moment decay"),
    ("distill.beta2", "0.999", "Adam second-moment decay"),
    ("distill.weight_decay", "0.0001", "L2 penalty on student weights"),
    ("distill.seed", "0", "student initialization, shuffling and sketch seed"),
    ("distill.mode", "gl_gr", "scratch, uniform_kd, gl_only, gr_only or gl_gr"),
    ("distill.sketch_dim", "256", "compact bilinear dimension; a multiple of the student tap size"),
    ("distill.shared_sketch", "false", "reuse one sketch for both operands of a pair"),
    ("distill.vector_edges", "1", "edge parameters per representation vertex"),
    ("distill.ground_spacing", "auto", "bin spacing of the Earth-Mover metric; auto = 1/(c-1)"),
    ("distill.bandwidth", "median:256", "median:<max vectors> or fixed:<value>"),
    ("ablation.seeds", "0,1,2,3,4", "seeds of the ablation grid"),
    ("ablation.modes", "scratch,uniform_kd,gl_only,gr_only,gl_gr", "modes of the ablation grid"),
    ("ablation.betas", "", "representation-loss weights swept for gr_only and gl_gr; empty keeps distill.beta"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Every key in sorted order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 prefix over the keys starting with any of `prefixes`
    /// (all keys when empty).
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of everything that determines the datasets.
    pub fn data_hash(&self) -> String {
        self.hash_of(&["data."])
    }

    /// Hash of everything that determines a teacher checkpoint.
    pub fn teacher_hash(&self) -> String {
        self.hash_of(&["data.", "pretext.", "teacher.", "pretrain.", "finetune."])
    }

    /// Hash of everything that determines the shared teacher outputs.
    pub fn teachers_hash(&self) -> String {
        self.hash_of(&["data.", "pretext.", "teacher", "pretrain.", "finetune."])
    }

    /// Hash of everything that determines one distillation run; the
    /// ablation grid itself is excluded.
    pub fn run_hash(&self) -> String {
        self.hash_of(&["data.", "pretext.", "teacher", "student.", "pretrain.", "finetune.", "distill."])
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = {} is not a valid number", self.get(key))))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s}")))
            })
            .collect()
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("{key} = {other} is not a boolean"))),
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry {
            frames: self.parse_num("data.frames")?,
            channels: self.parse_num("data.channels")?,
            height: self.parse_num("data.height")?,
            width: self.parse_num("data.width")?,
            object_size: self.parse_num("data.object_size")?,
            speed: (self.parse_num("data.speed_min")?, self.parse_num("data.speed_max")?),
            noise: self.parse_num("data.noise")?,
            distractors: self.parse_num("data.distractors")?,
        })
    }

    pub fn data_plan(&self) -> Result<DataPlan> {
        let plan = DataPlan {
            seed: self.parse_num("data.seed")?,
            clips: self.parse_num("data.clips")?,
            classes: self.parse_num("data.classes")?,
            train: self.parse_num("data.train")?,
            val: self.parse_num("data.val")?,
            pretext_clips: self.parse_num("data.pretext_clips")?,
            geometry: self.geometry()?,
        };
        if plan.train + plan.val >= plan.clips {
            return Err(Error::Config("data.train + data.val must leave clips for the test split".into()));
        }
        Ok(plan)
    }

    pub fn pretext(&self) -> Result<PretextConfig> {
        Ok(PretextConfig {
            sort_n: self.parse_num("pretext.sort_n")?,
            egomotion: EgomotionConfig {
                close_max: self.parse_num("pretext.close_max")?,
                far_min: self.parse_num("pretext.far_min")?,
            },
            patch: self.parse_num("pretext.patch")?,
            track_delta: self.parse_num("pretext.track_delta")?,
            context_len: self.parse_num("pretext.context_len")?,
        })
    }

    pub fn teachers(&self) -> Result<Vec<Task>> {
        self.get("teachers")
            .split(',')
            .map(|s| Task::parse(s.trim()).ok_or_else(|| Error::Config(format!("unknown task {s}"))))
            .collect()
    }

    pub fn blocks(&self, key: &str) -> Result<Vec<Block>> {
        self.get(key)
            .split(',')
            .map(|s| {
                let s = s.trim();
                let (num, pool) = match s.strip_suffix('p') {
                    Some(n) => (n, true),
                    None => (s, false),
                };
                let out = num
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse block {s}")))?;
                Ok(Block { out, pool })
            })
            .collect()
    }

    pub fn fit(&self, section: &str, seed: u64) -> Result<FitConfig> {
        let k = |name: &str| format!("{section}.{name}");
        Ok(FitConfig {
            epochs: self.parse_num(&k("epochs"))?,
            batch_size: self.parse_num(&k("batch_size"))?,
            schedule: LrSchedule {
                lr0: self.parse_num(&k("lr"))?,
                every: self.parse_num(&k("lr_decay_every"))?,
                factor: self.parse_num(&k("lr_decay_factor"))?,
            },
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: self.parse_num(&k("weight_decay"))?,
            patience: self.parse_num(&k("patience"))?,
            seed,
        })
    }

    pub fn finetune_policy(&self) -> Result<FinetunePolicy> {
        match self.get("finetune.policy") {
            "full" => Ok(FinetunePolicy::Full),
            "head" => Ok(FinetunePolicy::HeadOnly),
            other => Err(Error::Config(format!("finetune.policy = {other} is neither full nor head"))),
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        Mode::parse(self.get("distill.mode"))
            .ok_or_else(|| Error::Config(format!("unknown mode {}", self.get("distill.mode"))))
    }

    pub fn modes(&self) -> Result<Vec<Mode>> {
        self.get("ablation.modes")
            .split(',')
            .map(|s| Mode::parse(s.trim()).ok_or_else(|| Error::Config(format!("unknown mode {s}"))))
            .collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.parse_list("ablation.seeds")
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        let b: Vec<f64> = self.parse_list("ablation.betas")?;
        if b.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config(format!("ablation.betas must be nonnegative, got {}", self.get("ablation.betas"))));
        }
        Ok(b)
    }

    pub fn distill(&self, n_teachers: usize) -> Result<DistillConfig> {
        let mut d = DistillConfig::new(n_teachers);
        let t: f64 = self.parse_num("distill.temperature")?;
        d.teacher_temperatures = vec![t; n_teachers];
        d.vertex_temperatures = vec![t; d.vertex_temperatures.len()];
        let tt: Vec<f64> = self.parse_list("distill.teacher_temperatures")?;
        if !tt.is_empty() {
            d.teacher_temperatures = tt;
        }
        let vt: Vec<f64> = self.parse_list("distill.vertex_temperatures")?;
        if !vt.is_empty() {
            d.vertex_temperatures = vt;
        }
        d.lambda = self.parse_num("distill.lambda")?;
        d.beta = self.parse_num("distill.beta")?;
        d.epochs = self.parse_num("distill.epochs")?;
        d.batch_size = self.parse_num("distill.batch_size")?;
        d.lr = self.parse_num("distill.lr")?;
        d.lr_decay_every = self.parse_num("distill.lr_decay_every")?;
        d.lr_decay_factor = self.parse_num("distill.lr_decay_factor")?;
        d.beta1 = self.parse_num("distill.beta1")?;
        d.beta2 = self.parse_num("distill.beta2")?;
        d.weight_decay = self.parse_num("distill.weight_decay")?;
        d.seed = self.parse_num("distill.seed")?;
        d.mode = self.mode()?;
        d.sketch_dim = self.parse_num("distill.sketch_dim")?;
        d.shared_sketch = self.parse_bool("distill.shared_sketch")?;
        d.vector_edges = self.parse_num("distill.vector_edges")?;
        d.ground_spacing = match self.get("distill.ground_spacing") {
            "auto" => None,
            _ => Some(self.parse_num("distill.ground_spacing")?),
        };
        let bw = self.get("distill.bandwidth");
        d.bandwidth = match bw.split_once(':') {
            Some(("median", n)) => Bandwidth::Median(
                n.parse()
                    .map_err(|_| Error::Config(format!("distill.bandwidth = {bw}")))?,
            ),
            Some(("fixed", v)) => Bandwidth::Fixed(
                v.parse()
                    .map_err(|_| Error::Config(format!("distill.bandwidth = {bw}")))?,
            ),
            _ => return Err(Error::Config(format!("distill.bandwidth = {bw} is neither median:<n> nor fixed:<v>"))),
        };
        d.validate(n_teachers)?;
        Ok(d)
    }

    /// Switches to the full-scale distillation schedule.
    pub fn apply_full_scale(&mut self) {
        for (k, v) in [
            ("distill.epochs", "350"),
            ("distill.batch_size", "128"),
            ("distill.lr", "0.01"),
            ("distill.lr_decay_every", "50"),
            ("distill.lr_decay_factor", "0.5"),
        ] {
            self.values.insert(k.to_string(), v.to_string());
        }
    }

    /// The schema rendered as a commented config file.
    pub fn documented() -> String {
        let mut s = String::new();
        for (k, v, doc) in SCHEMA {
            if !doc.is_empty() {
                let _ = writeln!(s, "# {doc}");
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Sizes and seeds of the generated datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPlan {
    pub seed: u64,
    pub clips: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub pretext_clips: usize,
    pub geometry: Geometry,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = Config::default();
        assert_eq!(c.teachers().unwrap().len(), 4);
        let d = c.distill(4).unwrap();
        assert_eq!(d.lambda, 0.6);
        assert_eq!(d.vertex_temperatures.len(), 6);
        assert_eq!(c.blocks("teacher.blocks").unwrap()[0], Block { out: 16, pool: true });
        assert!(c.data_plan().is_ok());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(Config::parse("nope = 1").is_err());
        assert!(Config::parse("data.seed").is_err());
        let c = Config::parse("# comment\ndata.seed = 9 # trailing\n").unwrap();
        assert_eq!(c.get("data.seed"), "9");
    }

    #[test]
    fn hash_tracks_relevant_keys() {
        let a = Config::default();
        let mut b = a.clone();
        b.set("distill.seed", "3").unwrap();
        assert_eq!(a.teacher_hash(), b.teacher_hash());
        assert_ne!(a.run_hash(), b.run_hash());
        assert_eq!(Config::parse(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn full_scale_preset() {
        let mut c = Config::default();
        c.apply_full_scale();
        let d = c.distill(4).unwrap();
        assert_eq!((d.epochs, d.batch_size, d.lr_decay_every), (350, 128, 50));
        assert_eq!(d.schedule().lr(100), d.lr / 4.0);
    }
}
