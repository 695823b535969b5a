//! Workdir layout and the steps of an experiment.
//!
//! ```text
//! <workdir>/config.txt                      effective config of the last command
//! <workdir>/data/<split>/{clips.bin,manifest.txt}
//! <workdir>/teachers/<T>.pretrained.ckpt    encoder + pretext head
//! <workdir>/teachers/<T>.ckpt               fine-tuned classifier
//! <workdir>/teachers/outputs.ckpt           cached teacher logits and taps on train
//! <workdir>/runs/<mode>/seed<k>/{metrics.csv,summary.txt,best.ckpt,last.ckpt}
//! <workdir>/ablation.csv
//! <workdir>/report.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graphkd_core::data::{self, Task, VideoClip};
use graphkd_core::models::{self, StudentModel, TeacherModel, TeacherSpec};
use graphkd_core::trainer::{
    self, AblationRow, DistillData, DistillState, Evaluation, LabeledSet, MetricsRecord, Mode, TeacherOutputs,
};
use graphkd_core::rng;

use crate::checkpoint::{self, Checkpoint};
use crate::codec;
use crate::config::Config;
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::runlog::{self, RunSummary, METRICS_HEADER};

const EVAL_BATCH: usize = 64;

pub const ABLATION_HEADER: &str = "mode,runs,mean_acc,std_acc,accuracies,failures";

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: Config,
    /// Load artifacts whose config hash differs from the current config.
    pub force: bool,
    pub verbose: bool,
    /// Appended to the mode directory of each run, for sweep variants.
    run_suffix: String,
}

/// Scores of one teacher after fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReport {
    pub task: Task,
    pub pretext_score: Option<f64>,
    pub val_acc: f64,
    pub test_acc: f64,
    pub params: usize,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: Config) -> Self {
        Workspace {
            root: root.into(),
            cfg,
            force: false,
            verbose: false,
            run_suffix: String::new(),
        }
    }

    /// The same workspace with `distill.beta` set to `beta`. Its runs live
    /// in `runs/<mode>-beta<beta>/`.
    pub fn beta_variant(&self, beta: f64) -> Result<Workspace> {
        let mut ws = self.clone();
        ws.cfg.set("distill.beta", &beta.to_string())?;
        ws.run_suffix = format!("-beta{beta}");
        Ok(ws)
    }

    /// One workspace per ablation row of `mode`, with the swept weight.
    fn row_variants(&self, mode: Mode) -> Result<Vec<(Workspace, Option<f64>)>> {
        let betas = self.cfg.betas()?;
        if !mode.uses_repr_graph() || betas.is_empty() {
            return Ok(vec![(self.clone(), None)]);
        }
        betas.into_iter().map(|b| Ok((self.beta_variant(b)?, Some(b)))).collect()
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn teacher_path(&self, task: Task, pretrained: bool) -> PathBuf {
        let stem = if pretrained { ".pretrained.ckpt" } else { ".ckpt" };
        self.root.join("teachers").join(format!("{}{stem}", task.tag()))
    }

    pub fn run_dir(&self, mode: Mode, seed: u64) -> PathBuf {
        self.root
            .join("runs")
            .join(format!("{}{}", mode.name(), self.run_suffix))
            .join(format!("seed{seed}"))
    }

    pub fn write_config(&self) -> Result<()> {
        codec::write_file(&self.root.join("config.txt"), self.cfg.to_text().as_bytes())
    }

    // ---- data

    pub fn gen_data(&self) -> Result<Vec<(Split, usize)>> {
        let plan = self.cfg.data_plan()?;
        let hash = self.cfg.data_hash();
        let mut out = Vec::new();
        for split in Split::ALL {
            let clips = dataset::generate_split(&plan, split)?;
            dataset::save_split(&self.data_dir(), split, &clips, &plan, &hash)?;
            self.log(format!("wrote {} {} clips", clips.len(), split.name()));
            out.push((split, clips.len()));
        }
        Ok(out)
    }

    fn data_present(&self) -> bool {
        Split::ALL
            .iter()
            .all(|&s| dataset::split_dir(&self.data_dir(), s).join("clips.bin").exists())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoClip>> {
        dataset::load_split(&self.data_dir(), split, &self.cfg.data_hash(), self.force)
    }

    /// Generates the datasets unless all splits are already on disk.
    pub fn ensure_data(&self) -> Result<()> {
        if !self.data_present() {
            self.gen_data()?;
        }
        Ok(())
    }

    // ---- teachers

    pub fn teacher_spec(&self, task: Task) -> Result<TeacherSpec> {
        Ok(TeacherSpec::new(
            task,
            &self.cfg.geometry()?,
            self.cfg.blocks("teacher.blocks")?,
            &self.cfg.pretext()?,
        )?)
    }

    fn teacher_seed(&self) -> Result<u64> {
        self.cfg
            .get("teacher.seed")
            .parse()
            .map_err(|_| Error::Config("teacher.seed is not an integer".into()))
    }

    /// Pretrains the encoder of one teacher on its pretext task.
    pub fn pretrain(&self, task: Task) -> Result<f64> {
        self.ensure_data()?;
        let clips = self.load_split(Split::Pretext)?;
        let seed = self.teacher_seed()?;
        let pc = self.cfg.pretext()?;
        let g = self.cfg.geometry()?;
        let samples = data::make_task_samples(&clips, task, &pc, g.object_size, rng::derive(seed, task as u64))?;
        let cut = samples.len() * 4 / 5;
        let (train, val) = samples.split_at(cut);
        let mut t = TeacherModel::new(self.teacher_spec(task)?, seed);
        let fit = self.cfg.fit("pretrain", seed)?;
        let start = Instant::now();
        let rep = models::pretrain_teacher(&mut t, train, val, &fit)?;
        let score = t.pretext_score(val, EVAL_BATCH)?;
        self.log(format!(
            "pretrained {} teacher: {} epochs, best {}, held-out pretext score {score:.4}, {:.1}s",
            task.name(),
            rep.epochs_run,
            rep.best_epoch,
            start.elapsed().as_secs_f64()
        ));
        let mut c = checkpoint::teacher_checkpoint(&t, &self.cfg.teacher_hash());
        c.put_meta("pretext_score", score);
        c.save(&self.teacher_path(task, true))?;
        Ok(score)
    }

    /// Fine-tunes a classification head (and, with policy `full`, the
    /// encoder) on the labeled train split.
    pub fn finetune(&self, task: Task) -> Result<TeacherReport> {
        let path = self.teacher_path(task, true);
        if !path.exists() {
            self.pretrain(task)?;
        }
        let pre = Checkpoint::load(&path, "teacher", &self.cfg.teacher_hash(), self.force)?;
        let seed = self.teacher_seed()?;
        let mut t = TeacherModel::new(self.teacher_spec(task)?, seed);
        checkpoint::restore_teacher(&pre, &mut t)?;
        let train = self.load_split(Split::Train)?;
        let val = self.load_split(Split::Val)?;
        let test = self.load_split(Split::Test)?;
        let classes = self.cfg.data_plan()?.classes;
        let fit = self.cfg.fit("finetune", seed)?;
        let start = Instant::now();
        models::finetune_classifier(&mut t, &train, &val, classes, self.cfg.finetune_policy()?, &fit)?;
        let acc = |clips: &[VideoClip]| -> Result<f64> {
            let p = models::predict(&t, clips, EVAL_BATCH)?;
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
            Ok(trainer::evaluate(&p, &labels, classes)?.accuracy)
        };
        let report = TeacherReport {
            task,
            pretext_score: pre.meta.get("pretext_score").and_then(|s| s.parse().ok()),
            val_acc: acc(&val)?,
            test_acc: acc(&test)?,
            params: t.classifier_param_count(),
        };
        self.log(format!(
            "fine-tuned {} teacher: val {:.4} test {:.4}, {} params, {:.1}s",
            task.name(),
            report.val_acc,
            report.test_acc,
            report.params,
            start.elapsed().as_secs_f64()
        ));
        let mut c = checkpoint::teacher_checkpoint(&t, &self.cfg.teacher_hash());
        c.meta.extend(pre.meta.into_iter().filter(|(k, _)| k == "pretext_score"));
        c.put_meta("val_acc", report.val_acc);
        c.put_meta("test_acc", report.test_acc);
        c.save(&self.teacher_path(task, false))?;
        Ok(report)
    }

    /// Loads every configured teacher, training the missing ones.
    pub fn ensure_teachers(&self) -> Result<Vec<TeacherModel>> {
        let mut out = Vec::new();
        for task in self.cfg.teachers()? {
            let path = self.teacher_path(task, false);
            if !path.exists() {
                self.finetune(task)?;
            }
            let c = Checkpoint::load(&path, "teacher", &self.cfg.teacher_hash(), self.force)?;
            let mut t = TeacherModel::new(self.teacher_spec(task)?, self.teacher_seed()?);
            checkpoint::restore_teacher(&c, &mut t)?;
            out.push(t);
        }
        Ok(out)
    }

    pub fn teacher_reports(&self) -> Result<Vec<TeacherReport>> {
        let mut out = Vec::new();
        for task in self.cfg.teachers()? {
            let c = Checkpoint::load(&self.teacher_path(task, false), "teacher", &self.cfg.teacher_hash(), self.force)?;
            let mut t = TeacherModel::new(self.teacher_spec(task)?, self.teacher_seed()?);
            checkpoint::restore_teacher(&c, &mut t)?;
            out.push(TeacherReport {
                task,
                pretext_score: c.meta.get("pretext_score").and_then(|s| s.parse().ok()),
                val_acc: c.meta_num("val_acc")?,
                test_acc: c.meta_num("test_acc")?,
                params: t.classifier_param_count(),
            });
        }
        Ok(out)
    }

    /// Teacher logits and taps on the train split, computed once and cached.
    pub fn teacher_outputs(&self, teachers: &[TeacherModel], train: &[VideoClip]) -> Result<TeacherOutputs> {
        let path = self.root.join("teachers").join("outputs.ckpt");
        let hash = self.cfg.teachers_hash();
        if path.exists() {
            let c = Checkpoint::load(&path, "teacher-outputs", &hash, self.force)?;
            let n: usize = c.meta_num("teachers")?;
            return Ok(TeacherOutputs {
                logits: (0..n).map(|i| c.require(&format!("logits.{i}")).cloned()).collect::<Result<_>>()?,
                taps: (0..n).map(|i| c.require(&format!("taps.{i}")).cloned()).collect::<Result<_>>()?,
            });
        }
        let start = Instant::now();
        let mut outs = TeacherOutputs {
            logits: Vec::new(),
            taps: Vec::new(),
        };
        for t in teachers {
            let (l, tap) = models::infer(t, train, EVAL_BATCH)?;
            outs.logits.push(l);
            outs.taps.push(tap);
        }
        self.log(format!("teacher inference on train: {:.1}s", start.elapsed().as_secs_f64()));
        let mut c = Checkpoint::new("teacher-outputs", &hash);
        c.put_meta("teachers", teachers.len());
        for (i, (l, t)) in outs.logits.iter().zip(&outs.taps).enumerate() {
            c.put(format!("logits.{i}"), l.clone());
            c.put(format!("taps.{i}"), t.clone());
        }
        c.save(&path)?;
        Ok(outs)
    }

    // ---- distillation

    /// The config of one grid cell.
    pub fn run_config(&self, mode: Mode, seed: u64) -> Config {
        let mut c = self.cfg.clone();
        c.set("distill.mode", mode.name()).expect("schema key");
        c.set("distill.seed", &seed.to_string()).expect("schema key");
        c
    }

    pub fn new_student(&self, seed: u64) -> Result<StudentModel> {
        let plan = self.cfg.data_plan()?;
        Ok(StudentModel::new(
            &plan.geometry,
            self.cfg.blocks("student.blocks")?,
            plan.classes,
            seed,
        )?)
    }

    /// Trains one student and writes its run directory.
    pub fn distill(&self, mode: Mode, seed: u64) -> Result<RunSummary> {
        let start = Instant::now();
        let rc = self.run_config(mode, seed);
        let hash = rc.run_hash();
        let teachers = self.ensure_teachers()?;
        let n_teachers = teachers.len();
        let dcfg = rc.distill(n_teachers)?;
        let train = self.load_split(Split::Train)?;
        let val = LabeledSet::from_clips(&self.load_split(Split::Val)?)?;
        let test = LabeledSet::from_clips(&self.load_split(Split::Test)?)?;
        let before: Vec<u64> = teachers.iter().map(|t| t.params.checksum()).collect();
        let outputs = self.teacher_outputs(&teachers, &train)?;
        let student = self.new_student(seed)?;
        let tap_lens: Vec<usize> = teachers.iter().map(|t| t.spec.tap_len()).collect();
        let state = DistillState::new(&dcfg, student, n_teachers, &tap_lens)?;
        let softened = state.softened_targets(&outputs.taps)?;
        let data = DistillData {
            train: LabeledSet::from_clips(&train)?,
            teacher_logits: outputs.logits,
            softened,
        };

        let dir = self.run_dir(mode, seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = fs::remove_file(dir.join("summary.txt"));
        let mpath = dir.join("metrics.csv");
        let mut metrics = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&mpath, e))?;
        let run_id = (mode, seed);
        let mut io_error: Option<Error> = None;
        let mut best_epoch = 0;
        let mut on_epoch = |r: &MetricsRecord, s: &DistillState, improved: bool| -> graphkd_core::Result<()> {
            let res = (|| -> Result<()> {
                writeln!(metrics, "{}", runlog::metrics_row(r, improved)).map_err(|e| Error::io(&mpath, e))?;
                if improved {
                    best_epoch = r.epoch;
                    checkpoint::run_checkpoint(s, &run_id, &hash, best_epoch).save(&dir.join("best.ckpt"))?;
                }
                checkpoint::run_checkpoint(s, &run_id, &hash, best_epoch).save(&dir.join("last.ckpt"))
            })();
            res.map_err(|e| {
                let msg = e.to_string();
                io_error = Some(e);
                graphkd_core::Error::InvalidArgument(msg)
            })
        };
        let outcome = trainer::train(&dcfg, state, &data, &val, &mut on_epoch);
        drop(metrics);
        if let Some(e) = io_error {
            return Err(e);
        }
        let outcome = outcome?;
        let after: Vec<u64> = teachers.iter().map(|t| t.params.checksum()).collect();
        let test_eval = trainer::evaluate_student(&outcome.best.student, &test, EVAL_BATCH)?;
        let val_eval = trainer::evaluate_student(&outcome.best.student, &val, EVAL_BATCH)?;
        let summary = RunSummary {
            mode: mode.name().to_string(),
            seed,
            config_hash: hash,
            status: "ok".to_string(),
            epochs_run: outcome.records.len(),
            best_epoch: outcome.best_epoch,
            val_acc: val_eval.accuracy,
            test_acc: test_eval.accuracy,
            per_class: test_eval.per_class,
            student_params: outcome.best.student.param_count(),
            smallest_teacher_params: teachers.iter().map(TeacherModel::classifier_param_count).min().unwrap_or(0),
            teachers_unchanged: before == after,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        codec::write_file(&dir.join("summary.txt"), summary.to_json().as_bytes())?;
        self.log(format!(
            "{}{} seed {seed}: test {:.4} (best epoch {}), {:.1}s",
            mode.name(),
            self.run_suffix,
            summary.test_acc,
            summary.best_epoch,
            summary.wall_clock_secs
        ));
        Ok(summary)
    }

    /// Evaluates the student stored at `ckpt` on `split`. The checkpoint
    /// must come from the current config unless `force` is set.
    pub fn evaluate(&self, ckpt: &Path, split: Split) -> Result<Evaluation> {
        let c = Checkpoint::load(ckpt, "student", "", true)?;
        let mode = c
            .meta
            .get("mode")
            .and_then(|m| Mode::parse(m))
            .ok_or_else(|| Error::format(ckpt, "no run mode recorded"))?;
        let seed: u64 = c.meta_num("seed")?;
        let expected = self.run_config(mode, seed).run_hash();
        if !self.force && c.config_hash != expected {
            return Err(Error::HashMismatch {
                path: ckpt.to_path_buf(),
                expected,
                found: c.config_hash,
            });
        }
        let mut student = self.new_student(seed)?;
        checkpoint::restore_student(&c, &mut student)?;
        let set = LabeledSet::from_clips(&self.load_split(split)?)?;
        Ok(trainer::evaluate_student(&student, &set, EVAL_BATCH)?)
    }

    // ---- ablation and report

    /// A finished run whose summary matches the current config, if any.
    pub fn finished_run(&self, mode: Mode, seed: u64) -> Option<RunSummary> {
        let s = RunSummary::load(&self.run_dir(mode, seed).join("summary.txt")).ok()?;
        (s.status == "ok" && s.config_hash == self.run_config(mode, seed).run_hash()).then_some(s)
    }

    /// Runs every (mode, seed) cell of the grid, reusing finished cells.
    /// With `ablation.betas` set, the representation modes get one row per
    /// weight. A failing cell is recorded in its row and the grid continues.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        self.ensure_teachers()?;
        let seeds = self.cfg.seeds()?;
        let mut rows = Vec::new();
        for mode in self.cfg.modes()? {
            for (ws, beta) in self.row_variants(mode)? {
                let name = format!("{}{}", mode.name(), ws.run_suffix);
                let mut accs = Vec::new();
                let mut failures = Vec::new();
                for &seed in &seeds {
                    let result = match ws.finished_run(mode, seed) {
                        Some(s) => {
                            self.log(format!("{name} seed {seed}: reusing finished run"));
                            Ok(s)
                        }
                        None => ws.distill(mode, seed),
                    };
                    match result {
                        Ok(s) => accs.push(s.test_acc),
                        Err(e) => {
                            self.log(format!("{name} seed {seed} failed: {e}"));
                            failures.push(format!("seed{seed}: {e}"));
                        }
                    }
                }
                let row = AblationRow::new(mode, accs, failures);
                rows.push(match beta {
                    Some(b) => row.with_beta(b),
                    None => row,
                });
            }
        }
        codec::write_file(&self.root.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
        Ok(rows)
    }

    /// Ablation table, teacher scores and parameter counts as text; also
    /// written to `report.txt`.
    pub fn report(&self) -> Result<String> {
        let mut s = String::new();
        let teachers = self.teacher_reports()?;
        let _ = writeln!(s, "teachers");
        for t in &teachers {
            let _ = writeln!(
                s,
                "  {:<11} pretext {:>8}  val {:.4}  test {:.4}  params {}",
                t.task.name(),
                t.pretext_score.map_or("-".to_string(), |v| format!("{v:.4}")),
                t.val_acc,
                t.test_acc,
                t.params
            );
        }
        let student = self.new_student(0)?.param_count();
        let smallest = teachers.iter().map(|t| t.params).min().unwrap_or(0);
        let _ = writeln!(
            s,
            "student params {student}, smallest teacher {smallest}, ratio {:.4}",
            student as f64 / smallest.max(1) as f64
        );
        let mut rows = Vec::new();
        let seeds = self.cfg.seeds()?;
        for mode in self.cfg.modes()? {
            for (ws, beta) in self.row_variants(mode)? {
                let accs: Vec<f64> = seeds
                    .iter()
                    .filter_map(|&seed| ws.finished_run(mode, seed).map(|r| r.test_acc))
                    .collect();
                let missing: Vec<String> = seeds
                    .iter()
                    .filter(|&&seed| ws.finished_run(mode, seed).is_none())
                    .map(|seed| format!("seed{seed}: not run"))
                    .collect();
                let row = AblationRow::new(mode, accs, missing);
                rows.push(match beta {
                    Some(b) => row.with_beta(b),
                    None => row,
                });
            }
        }
        s.push_str(&ablation_table(&rows));
        codec::write_file(&self.root.join("report.txt"), s.as_bytes())?;
        Ok(s)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label(),
            r.accuracies.len(),
            r.mean,
            r.std,
            accs.join(";"),
            r.failures.join(";").replace(',', " ")
        );
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>5} {:>9} {:>9}  failures", "mode", "runs", "mean", "std");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>9.4} {:>9.4}  {}",
            r.label(),
            r.accuracies.len(),
            r.mean,
            r.std,
            r.failures.len()
        );
    }
    s
}

/// Rebuilds the full training state of a run from its checkpoint.
pub fn load_run_state(ws: &Workspace, mode: Mode, seed: u64, which: &str) -> Result<DistillState> {
    let rc = ws.run_config(mode, seed);
    let teachers = ws.cfg.teachers()?;
    let dcfg = rc.distill(teachers.len())?;
    let tap_lens: Vec<usize> = teachers
        .iter()
        .map(|&t| ws.teacher_spec(t).map(|s| s.tap_len()))
        .collect::<Result<_>>()?;
    let mut state = DistillState::new(&dcfg, ws.new_student(seed)?, teachers.len(), &tap_lens)?;
    let c = Checkpoint::load(&ws.run_dir(mode, seed).join(which), "student", &rc.run_hash(), ws.force)?;
    checkpoint::restore_run(&c, &mut state)?;
    Ok(state)
}
