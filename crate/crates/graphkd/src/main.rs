use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use graphkd::dataset::Split;
use graphkd::pipeline::{ablation_table, Workspace};
use graphkd::Config;
use graphkd_core::data::Task;

/// Multi-teacher video distillation with learned logits and representation
/// graphs, on a synthetic moving-shapes benchmark.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Directory holding data, teachers and runs.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Config file of `key = value` lines; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Distillation seed (distill.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Distillation mode (distill.mode).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Use the full-scale distillation schedule (350 epochs, batch 128,
    /// lr 0.01 halved every 50 epochs).
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Load artifacts even when their config hash differs.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val, test and pretext splits.
    GenData,
    /// Pretrain one teacher on its pretext task (S, M, T or P).
    Pretrain { task: String },
    /// Fine-tune teacher classifiers (all configured teachers by default).
    Finetune { task: Option<String> },
    /// Distill one student with the configured mode and seed.
    Distill,
    /// Evaluate a student checkpoint.
    Evaluate {
        /// Defaults to the best checkpoint of the configured mode and seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the mode × seed grid, reusing finished runs.
    Ablate,
    /// Summarize teachers, parameter counts and the ablation grid.
    Report,
    /// Print the documented config schema with defaults.
    Schema,
}

fn parse_task(s: &str) -> anyhow::Result<Task> {
    Task::parse(s).with_context(|| format!("unknown task {s}; expected S, M, T or P"))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if cli.paper_scale {
        cfg.apply_full_scale();
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("distill.seed", &seed.to_string())?;
    }
    if let Some(mode) = &cli.mode {
        cfg.set("distill.mode", mode)?;
    }
    let mut ws = Workspace::new(cli.workdir.clone(), cfg);
    ws.force = cli.force;
    ws.verbose = !cli.quiet;
    if !matches!(cli.command, Command::Schema) {
        ws.write_config()?;
    }
    match cli.command {
        Command::GenData => {
            for (split, n) in ws.gen_data()? {
                println!("{:<8} {n} clips", split.name());
            }
        }
        Command::Pretrain { task } => {
            let task = parse_task(&task)?;
            let score = ws.pretrain(task)?;
            println!("{} pretext score {score:.4}", task.name());
        }
        Command::Finetune { task } => {
            let tasks = match task {
                Some(t) => vec![parse_task(&t)?],
                None => ws.cfg.teachers()?,
            };
            for t in tasks {
                let r = ws.finetune(t)?;
                println!(
                    "{:<11} val {:.4}  test {:.4}  params {}",
                    t.name(),
                    r.val_acc,
                    r.test_acc,
                    r.params
                );
            }
        }
        Command::Distill => {
            let mode = ws.cfg.mode()?;
            let seed = ws.cfg.get("distill.seed").parse()?;
            let s = ws.distill(mode, seed)?;
            println!(
                "{} seed {seed}: test accuracy {:.4}, best epoch {}, run dir {}",
                s.mode,
                s.test_acc,
                s.best_epoch,
                ws.run_dir(mode, seed).display()
            );
        }
        Command::Evaluate { checkpoint, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => bail!("unknown split {other}; expected train, val or test"),
            };
            let path = match checkpoint {
                Some(p) => p,
                None => {
                    let seed = ws.cfg.get("distill.seed").parse()?;
                    ws.run_dir(ws.cfg.mode()?, seed).join("best.ckpt")
                }
            };
            let e = ws.evaluate(&path, split)?;
            println!("accuracy {:.4} on {} clips", e.accuracy, e.n);
            for (c, a) in e.per_class.iter().enumerate() {
                match a {
                    Some(a) => println!("  class {c}: {a:.4}"),
                    None => println!("  class {c}: -"),
                }
            }
        }
        Command::Ablate => {
            let rows = ws.ablate()?;
            print!("{}", ablation_table(&rows));
        }
        Command::Report => print!("{}", ws.report()?),
        Command::Schema => print!("{}", Config::documented()),
    }
    Ok(())
}
