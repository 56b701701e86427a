//! Pretraining, single-task and sequential fine-tuning flows.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envsdata::{load_dataset, pretrain_tasks, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Mddt};
use crate::modulators::{build_queries, select_key, ModulationPool};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParameterStore, Tensor, WarmupCosine};

use super::metrics::{EvalRecord, MetricsLog};
use super::trainer::{evaluate_task, Learner, Routing, Suite, TaskEval, PEFT_PREFIX};
use super::{Method, RunConfig};

/// Loads the listed tasks' datasets from `dir`; the error names the first missing task.
pub fn load_suite(dir: &Path, tasks: &[TaskSpec], bins: usize) -> Result<Suite> {
    let datasets = tasks.iter().map(|t| load_dataset(dir, t)).collect::<Result<Vec<_>>>()?;
    Suite::new(datasets, bins)
}

/// Evaluates every task in `tasks` and appends one record each.
/// `sequence` gives oracle pools their task indices.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_all(
    model: &Mddt<f32>,
    routing: &Routing,
    suite: &Suite,
    tasks: &[String],
    sequence: &[String],
    cfg: &RunConfig,
    step: u64,
    phase: &str,
    log: &mut MetricsLog,
) -> Result<Vec<TaskEval>> {
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        let salt = suite
            .datasets
            .get_index_of(t)
            .ok_or_else(|| crate::error::Error::UnknownTask(t.clone()))? as u64;
        let index = sequence.iter().position(|s| s == t);
        let e = evaluate_task(model, routing, suite, t, index, cfg.eval_episodes, cfg.seed, salt)?;
        log.push(EvalRecord {
            step,
            phase: phase.to_string(),
            task_id: t.clone(),
            success_rate: e.success_rate,
            mean_return: e.mean_return,
            normalized_score: e.normalized_score,
        });
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub checkpoint: Checkpoint<f32>,
    pub log: MetricsLog,
    pub pretrain_keys: Vec<Vec<f32>>,
}

fn pretrain_ids(suite: &Suite) -> Result<Vec<String>> {
    let ids: Vec<String> = pretrain_tasks()
        .into_iter()
        .map(|t| t.task_id)
        .filter(|id| suite.datasets.contains_key(id))
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingDataset {
            task: pretrain_tasks()[0].task_id.clone(),
            path: "suite".into(),
        });
    }
    Ok(ids)
}

/// Full-model training on batches drawn uniformly across the pretraining
/// tasks, then (optionally) key training for the pretraining tasks on the
/// frozen result. Keys are stored in the checkpoint as frozen `mod.prekey.*`.
pub fn pretrain(cfg: &RunConfig, suite: &Suite) -> Result<PretrainReport> {
    let cfg = &RunConfig {
        batch_size: cfg.pretrain_batch_size.unwrap_or(cfg.batch_size),
        ..cfg.clone()
    };
    let tasks = pretrain_ids(suite)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Mddt::new(cfg.model_config(), &mut rng)?;
    let ft = RunConfig {
        method: Method::Ft,
        lr: Some(cfg.pretrain_lr),
        ..cfg.clone()
    };
    let mut learner = Learner::new(&ft, model, 0, &[])?;
    let steps = cfg.pretrain_steps;
    learner.schedule = WarmupCosine {
        peak: cfg.pretrain_lr,
        floor: cfg.min_lr,
        warmup: cfg.warmup.min(steps),
        total: steps,
    };
    let mut log = MetricsLog::default();
    for step in 1..=steps {
        learner.train_on(suite, &tasks)?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != steps {
            evaluate_all(
                &learner.model,
                &learner.routing,
                suite,
                &tasks,
                &[],
                cfg,
                step,
                "pretrain",
                &mut log,
            )?;
        }
    }
    evaluate_all(
        &learner.model,
        &learner.routing,
        suite,
        &tasks,
        &[],
        cfg,
        steps,
        "pretrain",
        &mut log,
    )?;
    let mut model = learner.model;
    let keys = if cfg.pretrain_keys > 0 && cfg.key_steps > 0 {
        train_pretrain_keys(&model, suite, &tasks, cfg)?
    } else {
        Vec::new()
    };
    for (j, k) in keys.iter().enumerate() {
        model.params.insert(
            ModulationPool::pretrain_key_name(j),
            Tensor::from_slice(&[k.len()], k)?,
            false,
        )?;
    }
    Ok(PretrainReport {
        checkpoint: Checkpoint {
            model,
            kind: "base".into(),
            pool: None,
        },
        log,
        pretrain_keys: keys,
    })
}

/// Keys without bundles: each pretraining task in turn pulls its selected
/// keys towards its queries, with counts snapshotted between tasks.
pub fn train_pretrain_keys(
    model: &Mddt<f32>,
    suite: &Suite,
    tasks: &[String],
    cfg: &RunConfig,
) -> Result<Vec<Vec<f32>>> {
    let d = model.config.embed_dim;
    let m = cfg.pretrain_keys;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b65_7973);
    let mut store = ParameterStore::new();
    for j in 0..m {
        store.insert(
            format!("k.{j}"),
            Tensor::<f32>::uniform(&[d], -1.0, 1.0, &mut rng),
            false,
        )?;
    }
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        grad_clip: None,
        ..AdamWConfig::default()
    });
    let mut counts = vec![1u64; m];
    let mut frozen = counts.clone();
    let per_task = (cfg.key_steps / tasks.len() as u64).max(1);
    let shape = crate::trajectory::ContextShape {
        context_len: model.config.context_len,
        max_action_dim: model.config.max_action_dim,
    };
    for t in tasks {
        let one = [t.clone()];
        for _ in 0..per_task {
            let batch = suite.sample_batch(&one, cfg.batch_size, shape, &mut rng)?;
            let qs = build_queries(model, &batch, &cfg.query)?;
            let picks = {
                let keys: Vec<&[f32]> = (0..m)
                    .map(|j| store.get(&format!("k.{j}")).map(Tensor::data))
                    .collect::<Result<_>>()?;
                qs.iter()
                    .map(|q| select_key(&keys, &frozen, q))
                    .collect::<Result<Vec<_>>>()?
            };
            store.freeze_all();
            let mut g = Graph::new();
            let mut acc = None;
            for (q, &j) in qs.iter().zip(&picks) {
                counts[j] += 1;
                let name = format!("k.{j}");
                store.set_trainable(&name, true)?;
                let k = g.param(&store, &name)?;
                let q = g.constant(Tensor::from_slice(&[d], q)?);
                let s = g.cosine(q, k)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            let Some(total) = acc else { continue };
            let loss = g.scale(total, (-cfg.lambda / qs.len() as f64) as f32);
            let grads = g.backward(loss)?;
            opt.step(&mut store, &grads, cfg.key_lr)?;
        }
        frozen.clone_from(&counts);
    }
    (0..m)
        .map(|j| Ok(store.get(&format!("k.{j}"))?.data().to_vec()))
        .collect()
}

/// Pretraining keys stored in a checkpoint, in index order.
pub(crate) fn stored_pretrain_keys(model: &Mddt<f32>) -> Vec<Vec<f32>> {
    (0..)
        .map_while(|j| model.params.get(&ModulationPool::pretrain_key_name(j)).ok())
        .map(|t| t.data().to_vec())
        .collect()
}

/// Trains `sequence` in order (or their union for multi-task methods),
/// evaluating `eval_tasks` before training, every `eval_every` steps and at
/// each block end. Records are appended to `log` as they are produced, so a
/// failure leaves the partial history in place.
pub(crate) fn run_sequence(
    cfg: &RunConfig,
    base: &Mddt<f32>,
    suite: &Suite,
    sequence: &[String],
    eval_tasks: &[String],
    log: &mut MetricsLog,
) -> Result<Learner> {
    if sequence.is_empty() {
        return Err(Error::config("empty task sequence"));
    }
    for t in sequence.iter().chain(eval_tasks) {
        suite.get(t)?;
    }
    let model = if cfg.method == Method::FtMtScratch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Mddt::new(base.config.clone(), &mut rng)?
    } else {
        base.clone()
    };
    let keys = stored_pretrain_keys(base);
    let mut learner = Learner::new(cfg, model, sequence.len(), &keys)?;
    let eval = |l: &Learner, step: u64, phase: &str, log: &mut MetricsLog| {
        evaluate_all(&l.model, &l.routing, suite, eval_tasks, sequence, cfg, step, phase, log).map(|_| ())
    };
    eval(&learner, 0, "zero-shot", log)?;
    let steps = cfg.steps_per_task;
    if cfg.method.is_multitask() {
        let total = steps * sequence.len() as u64;
        for s in 1..=total {
            learner.train_on(suite, sequence)?;
            if cfg.eval_every > 0 && s % cfg.eval_every == 0 && s != total {
                eval(&learner, s, "multitask", log)?;
            }
        }
        eval(&learner, total, "multitask", log)?;
        for t in sequence {
            log.mark_block_end(t, total);
        }
        return Ok(learner);
    }
    let mut global = 0u64;
    for t in sequence {
        let phase = format!("train:{t}");
        let one = [t.clone()];
        for s in 1..=steps {
            learner.train_on(suite, &one)?;
            global += 1;
            if cfg.eval_every > 0 && s % cfg.eval_every == 0 && s != steps {
                eval(&learner, global, &phase, log)?;
            }
        }
        eval(&learner, global, &phase, log)?;
        log.mark_block_end(t, global);
        learner.end_task(suite, t)?;
    }
    Ok(learner)
}

/// Continual fine-tuning over `sequence`, evaluating every task in the suite.
pub fn finetune_continual(
    cfg: &RunConfig,
    base: &Mddt<f32>,
    suite: &Suite,
    sequence: &[String],
    log: &mut MetricsLog,
) -> Result<Learner> {
    let all: Vec<String> = suite.datasets.keys().cloned().collect();
    run_sequence(cfg, base, suite, sequence, &all, log)
}

#[derive(Debug, Clone)]
pub struct SingleReport {
    pub log: MetricsLog,
    pub final_eval: TaskEval,
    pub best: TaskEval,
    /// Elements updated for this task over base-model elements.
    pub trainable_fraction: f64,
    pub learner: Learner,
}

/// Fine-tunes on one held-out task and evaluates it alone.
pub fn finetune_single(cfg: &RunConfig, base: &Mddt<f32>, suite: &Suite, task: &str) -> Result<SingleReport> {
    if pretrain_tasks().iter().any(|t| t.task_id == task) {
        return Err(Error::config(format!("`{task}` is a pretraining task")));
    }
    let one = [task.to_string()];
    let mut log = MetricsLog::default();
    let learner = run_sequence(cfg, base, suite, &one, &one, &mut log)?;
    let evals: Vec<TaskEval> = log
        .records
        .iter()
        .filter(|r| r.step > 0 || cfg.steps_per_task == 0)
        .map(|r| TaskEval {
            success_rate: r.success_rate,
            mean_return: r.mean_return,
            normalized_score: r.normalized_score,
        })
        .collect();
    let final_eval = *evals.last().ok_or_else(|| Error::invalid("no evaluation recorded"))?;
    let best = evals.iter().copied().fold(
        final_eval,
        |b, e| if e.normalized_score > b.normalized_score { e } else { b },
    );
    Ok(SingleReport {
        trainable_fraction: reported_fraction(&learner),
        final_eval,
        best,
        log,
        learner,
    })
}

/// Fraction of base elements a method trains per task: one bundle (and its
/// key) for pools, the trainable set otherwise.
pub fn reported_fraction(learner: &Learner) -> f64 {
    let base = learner.model.num_base_params() as f64;
    match learner.pool() {
        Some(pool) => {
            let key = if pool.oracle { 0 } else { learner.model.config.embed_dim };
            (pool.kind.num_params(&learner.model.config) + key) as f64 / base
        }
        None => learner.trainable_fraction(),
    }
}

/// Checkpoint of a trained learner. Single modulators are tagged with their
/// serialized kind so evaluation can rebuild the routing.
pub fn learner_checkpoint(learner: &Learner, cfg: &RunConfig) -> Result<Checkpoint<f32>> {
    let kind = match (&learner.routing, cfg.modulator()) {
        (Routing::Pool { pool, .. }, _) => pool.kind.kind_name().to_string(),
        (Routing::Fixed(_), Some(k)) => serde_json::to_string(&k)?,
        (Routing::Fixed(_), None) => "base".to_string(),
    };
    Ok(Checkpoint {
        model: learner.model.clone(),
        kind,
        pool: learner.pool().cloned(),
    })
}

/// Routing that reproduces how a checkpoint was trained to be queried.
pub fn checkpoint_routing(ckpt: &Checkpoint<f32>, cfg: &RunConfig) -> Result<Routing> {
    if let Some(pool) = &ckpt.pool {
        return Ok(Routing::Pool {
            pool: pool.clone(),
            query: cfg.query,
        });
    }
    if ckpt.kind == "base" {
        return Ok(Routing::Fixed(crate::modulators::Modulation::none()));
    }
    let kind: crate::modulators::ModulatorKind = serde_json::from_str(&ckpt.kind)
        .map_err(|_| Error::Malformed(format!("unknown checkpoint kind `{}`", ckpt.kind)))?;
    Ok(Routing::Fixed(kind.modulation(PEFT_PREFIX)))
}
