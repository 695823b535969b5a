//! Per-run output files.
//!
//! `metrics.csv` has the fixed header [`METRICS_HEADER`], one row per
//! epoch. `logits_weights` holds the incoming edge-weight table of the
//! logits graph flattened receiver-major, `repr_weights` the vertex
//! weights of the representation graph; both are `;`-separated and empty
//! when the mode has no such graph. `best` is 1 on epochs that improved
//! the validation accuracy. Numbers use the shortest representation that
//! round-trips, so identical runs produce identical files.
//!
//! `summary.txt` is a flat JSON object, see [`RunSummary`].

use std::fmt::Write as _;
use std::path::Path;

use graphkd_core::trainer::MetricsRecord;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,lr,train_ce,train_soft,train_repr,train_total,val_ce,val_acc,best,logits_weights,repr_weights";

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn metrics_row(r: &MetricsRecord, best: bool) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.train_ce,
        r.train_soft,
        r.train_repr,
        r.train_total,
        r.val_ce,
        r.val_acc,
        u8::from(best),
        join(&r.logits_weights),
        join(&r.repr_weights)
    )
}

/// Parsed `metrics.csv` row, for reports and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_soft: f64,
    pub train_repr: f64,
    pub train_total: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    pub best: bool,
    pub logits_weights: Vec<f64>,
    pub repr_weights: Vec<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    let bad = |n: usize| Error::format(path, format!("malformed row {n}"));
    let list = |s: &str| -> Option<Vec<f64>> {
        if s.is_empty() {
            Some(Vec::new())
        } else {
            s.split(';').map(|x| x.parse().ok()).collect()
        }
    };
    lines
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 11 {
                return Err(bad(n));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n));
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad(n))?,
                lr: num(1)?,
                train_ce: num(2)?,
                train_soft: num(3)?,
                train_repr: num(4)?,
                train_total: num(5)?,
                val_ce: num(6)?,
                val_acc: num(7)?,
                best: f[8] == "1",
                logits_weights: list(f[9]).ok_or_else(|| bad(n))?,
                repr_weights: list(f[10]).ok_or_else(|| bad(n))?,
            })
        })
        .collect()
}

/// Outcome of one distillation run. Wall-clock time lives only here, never
/// in `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub per_class: Vec<Option<f64>>,
    pub student_params: usize,
    pub smallest_teacher_params: usize,
    pub teachers_unchanged: bool,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        let per_class: Vec<String> = self
            .per_class
            .iter()
            .map(|a| a.map_or_else(|| "null".to_string(), |v| v.to_string()))
            .collect();
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"mode\": \"{}\",", self.mode);
        let _ = writeln!(s, "  \"seed\": {},", self.seed);
        let _ = writeln!(s, "  \"config_hash\": \"{}\",", self.config_hash);
        let _ = writeln!(s, "  \"status\": \"{}\",", self.status);
        let _ = writeln!(s, "  \"epochs_run\": {},", self.epochs_run);
        let _ = writeln!(s, "  \"best_epoch\": {},", self.best_epoch);
        let _ = writeln!(s, "  \"val_acc\": {},", self.val_acc);
        let _ = writeln!(s, "  \"test_acc\": {},", self.test_acc);
        let _ = writeln!(s, "  \"per_class_acc\": [{}],", per_class.join(", "));
        let _ = writeln!(s, "  \"student_params\": {},", self.student_params);
        let _ = writeln!(s, "  \"smallest_teacher_params\": {},", self.smallest_teacher_params);
        let _ = writeln!(s, "  \"teachers_unchanged\": {},", self.teachers_unchanged);
        let _ = writeln!(s, "  \"wall_clock_secs\": {:.3}", self.wall_clock_secs);
        s.push_str("}\n");
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim().trim_end_matches(',');
            if let Some((k, v)) = line.split_once(':') {
                fields.insert(k.trim().trim_matches('"').to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(|v| v.trim_matches('"').to_string())
                .ok_or_else(|| Error::format(path, format!("missing field {k}")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::format(path, format!("bad {k}"))) };
        let per_class = get("per_class_acc")?
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| if s == "null" { None } else { s.parse().ok() })
            .collect();
        Ok(RunSummary {
            mode: get("mode")?,
            seed: num("seed")? as u64,
            config_hash: get("config_hash")?,
            status: get("status")?,
            epochs_run: num("epochs_run")? as usize,
            best_epoch: num("best_epoch")? as usize,
            val_acc: num("val_acc")?,
            test_acc: num("test_acc")?,
            per_class,
            student_params: num("student_params")? as usize,
            smallest_teacher_params: num("smallest_teacher_params")? as usize,
            teachers_unchanged: get("teachers_unchanged")? == "true",
            wall_clock_secs: num("wall_clock_secs")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_row_roundtrip() {
        let r = MetricsRecord {
            epoch: 3,
            lr: 0.01,
            train_ce: 1.0 / 3.0,
            train_soft: 0.25,
            train_repr: 0.0,
            train_total: 0.1,
            val_ce: 2.0,
            val_acc: 0.5,
            logits_weights: vec![0.5, 0.25],
            repr_weights: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{METRICS_HEADER}\n{}\n", metrics_row(&r, true))).unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows[0].train_ce, r.train_ce);
        assert_eq!(rows[0].logits_weights, r.logits_weights);
        assert!(rows[0].best && rows[0].repr_weights.is_empty());
    }

    #[test]
    fn summary_roundtrip() {
        let s = RunSummary {
            mode: "gl_gr".into(),
            seed: 2,
            config_hash: "ab12".into(),
            status: "ok".into(),
            epochs_run: 30,
            best_epoch: 17,
            val_acc: 0.875,
            test_acc: 0.8625,
            per_class: vec![Some(1.0), None, Some(0.5)],
            student_params: 10,
            smallest_teacher_params: 100,
            teachers_unchanged: true,
            wall_clock_secs: 1.5,
        };
        assert_eq!(RunSummary::parse(&s.to_json(), Path::new("s")).unwrap(), s);
    }
}
