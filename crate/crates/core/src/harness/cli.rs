//! Command-line entry point. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envsdata::{
    all_tasks, find_task, finetune_tasks, generate_dataset, pretrain_tasks, save_dataset, Mixture, TaskSpec,
};
use crate::error::{Error, Result};
use crate::model::{export_embeddings, load_checkpoint, save_checkpoint, write_embeddings_csv, Checkpoint, LayerSel};

use super::pipeline::{checkpoint_routing, learner_checkpoint, reported_fraction};
use super::{
    evaluate_all, finetune_continual, finetune_single, load_suite, pretrain, Method, MetricsLog, Mode, RunConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "l2m",
    about = "Multi-domain decision transformer: pretraining, fine-tuning and continual adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Steps per task (fine-tuning) or total steps (pretraining).
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// `all`, `pretrain`, `finetune` or comma-separated task ids.
    #[arg(long, global = true)]
    tasks: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate synthetic datasets for the suite.
    GenData,
    Pretrain,
    /// Fine-tune on each held-out task separately.
    Finetune,
    /// Fine-tune on held-out tasks in sequence.
    Continual,
    /// Zero-shot evaluation of a checkpoint.
    Eval,
    ExportEmbeddings,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::GenData => Mode::GenData,
            Command::Pretrain => Mode::Pretrain,
            Command::Finetune => Mode::Finetune,
            Command::Continual => Mode::Continual,
            Command::Eval => Mode::Eval,
            Command::ExportEmbeddings => Mode::ExportEmbeddings,
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(&cfg) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::UnknownTask(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.mode = cli.command.mode();
    if let Some(m) = &cli.method {
        cfg.method = m.parse::<Method>()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.steps {
        if cfg.mode == Mode::Pretrain {
            cfg.pretrain_steps = s;
        } else {
            cfg.steps_per_task = s;
        }
    }
    if let Some(o) = &cli.out {
        cfg.out.clone_from(o);
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(t) = &cli.tasks {
        cfg.tasks.clone_from(t);
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves a task selector.
pub fn select_tasks(sel: &str, default: Vec<TaskSpec>) -> Result<Vec<TaskSpec>> {
    match sel {
        "" => Ok(default),
        "all" => Ok(all_tasks()),
        "pretrain" => Ok(pretrain_tasks()),
        "finetune" => Ok(finetune_tasks()),
        list => list.split(',').map(|t| find_task(t.trim())).collect(),
    }
}

fn ids(tasks: &[TaskSpec]) -> Vec<String> {
    tasks.iter().map(|t| t.task_id.clone()).collect()
}

fn require_checkpoint(cfg: &RunConfig) -> Result<Checkpoint<f32>> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config(format!("`{}` needs --checkpoint", cfg.mode)))?;
    load_checkpoint(path)
}

fn write_outputs(out: &Path, stem: &str, log: &MetricsLog, extra: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut csv = BufWriter::new(File::create(out.join(format!("{stem}.csv")))?);
    log.write_csv(&mut csv)?;
    csv.flush()?;
    let summary = format!("{extra}{}", log.summary());
    fs::write(out.join(format!("{stem}_summary.txt")), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Selector given on the command line, or the mode's default.
fn tasks_or(cfg: &RunConfig, default: Vec<TaskSpec>) -> Result<Vec<TaskSpec>> {
    select_tasks(if cfg.tasks == "all" { "" } else { &cfg.tasks }, default)
}

fn execute(cfg: &RunConfig) -> Result<()> {
    let bins = cfg.model_config().action_bins;
    match cfg.mode {
        Mode::GenData => {
            let tasks = select_tasks(&cfg.tasks, all_tasks())?;
            let dir = &cfg.data_dir;
            fs::create_dir_all(dir)?;
            for (i, t) in tasks.iter().enumerate() {
                let ds = generate_dataset(
                    t,
                    cfg.episodes_per_task,
                    &Mixture::default(),
                    cfg.seed.wrapping_add(i as u64),
                )?;
                save_dataset(dir, &ds)?;
                println!(
                    "{:<16} episodes={} expert={:.3} random={:.3} max_return={:.3}",
                    t.task_id,
                    ds.episodes.len(),
                    ds.meta.expert_score,
                    ds.meta.random_score,
                    ds.meta.max_return
                );
            }
            Ok(())
        }
        Mode::Pretrain => {
            let suite = load_suite(&cfg.data_dir, &pretrain_tasks(), bins)?;
            let report = pretrain(cfg, &suite)?;
            fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("pretrain.mddt");
            save_checkpoint(&path, &report.checkpoint)?;
            write_outputs(
                &cfg.out,
                "pretrain",
                &report.log,
                &format!("checkpoint: {}\n", path.display()),
            )
        }
        Mode::Finetune => {
            let ckpt = require_checkpoint(cfg)?;
            let tasks = tasks_or(cfg, finetune_tasks())?;
            let suite = load_suite(&cfg.data_dir, &tasks, bins)?;
            let mut log = MetricsLog::default();
            let mut extra = format!("{:<16} {:>8} {:>8} {:>10}\n", "task", "final", "best", "trainable");
            for t in &tasks {
                let r = finetune_single(cfg, &ckpt.model, &suite, &t.task_id)?;
                extra.push_str(&format!(
                    "{:<16} {:>8.3} {:>8.3} {:>9.4}%\n",
                    t.task_id,
                    r.final_eval.success_rate,
                    r.best.success_rate,
                    100.0 * reported_fraction(&r.learner)
                ));
                log.records.extend(r.log.records);
            }
            write_outputs(
                &cfg.out,
                &format!("finetune_{}_s{}", cfg.method, cfg.seed),
                &log,
                &extra,
            )
        }
        Mode::Continual => {
            let ckpt = require_checkpoint(cfg)?;
            let sequence = tasks_or(cfg, finetune_tasks())?;
            let mut specs = pretrain_tasks();
            specs.extend(
                sequence
                    .iter()
                    .filter(|s| !specs.iter().any(|p| p.task_id == s.task_id))
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            let suite = load_suite(&cfg.data_dir, &specs, bins)?;
            let mut log = MetricsLog::default();
            let stem = format!("continual_{}_s{}", cfg.method, cfg.seed);
            let result = finetune_continual(cfg, &ckpt.model, &suite, &ids(&sequence), &mut log);
            // the partial log is flushed even when training failed
            write_outputs(&cfg.out, &stem, &log, "")?;
            let learner = result?;
            save_checkpoint(
                &cfg.out.join(format!("{stem}.mddt")),
                &learner_checkpoint(&learner, cfg)?,
            )
        }
        Mode::Eval => {
            let ckpt = require_checkpoint(cfg)?;
            let tasks = select_tasks(&cfg.tasks, all_tasks())?;
            let suite = load_suite(&cfg.data_dir, &tasks, bins)?;
            let routing = checkpoint_routing(&ckpt, cfg)?;
            let mut log = MetricsLog::default();
            evaluate_all(
                &ckpt.model,
                &routing,
                &suite,
                &ids(&tasks),
                &ids(&finetune_tasks()),
                cfg,
                0,
                "zero-shot",
                &mut log,
            )?;
            write_outputs(&cfg.out, "eval", &log, "")
        }
        Mode::ExportEmbeddings => {
            let ckpt = require_checkpoint(cfg)?;
            let tasks = select_tasks(&cfg.tasks, all_tasks())?;
            let suite = load_suite(&cfg.data_dir, &tasks, bins)?;
            let layer: LayerSel = cfg.embed_layer.parse()?;
            let shape = crate::trajectory::ContextShape {
                context_len: ckpt.model.config.context_len,
                max_action_dim: ckpt.model.config.max_action_dim,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut seqs = Vec::new();
            for t in &tasks {
                let one = [t.task_id.clone()];
                seqs.push((
                    t.task_id.clone(),
                    suite.sample_batch(&one, cfg.batch_size, shape, &mut rng)?,
                ));
            }
            let rows = export_embeddings(&ckpt.model, &seqs, layer, cfg.embed_token)?;
            fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("embeddings.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            write_embeddings_csv(&mut w, &rows)?;
            w.flush()?;
            println!("{} rows written to {}", rows.len(), path.display());
            Ok(())
        }
    }
}
