//! The training loop shared by every method, and evaluation routing.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envsdata::{suite_layout, Dataset};
use crate::error::{Error, Result};
use crate::model::{block_name, evaluate_episodes, Dropout, Mddt, MOD_PREFIX};
use crate::modulators::{attach, build_queries, Modulation, ModulationPool, QueryConfig};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor, WarmupCosine};
use crate::regularizers::{model_fisher, total_penalty, FisherAnchor};
use crate::trajectory::{make_context, ActionTokenizer, ContextShape, ModelContext, UnifiedStateLayout};

use super::metrics::normalized_score;
use super::{Method, RunConfig};

/// Loaded datasets keyed by task id, with the shared state layout and tokenizer.
#[derive(Debug, Clone)]
pub struct Suite {
    pub datasets: IndexMap<String, Dataset>,
    pub layout: UnifiedStateLayout,
    pub tokenizer: ActionTokenizer,
}

impl Suite {
    pub fn new(datasets: Vec<Dataset>, bins: usize) -> Result<Self> {
        let specs: Vec<_> = datasets.iter().map(|d| d.spec.clone()).collect();
        let layout = suite_layout(&specs)?;
        Ok(Suite {
            datasets: datasets.into_iter().map(|d| (d.spec.task_id.clone(), d)).collect(),
            layout,
            tokenizer: ActionTokenizer::new(bins)?,
        })
    }

    pub fn get(&self, task_id: &str) -> Result<&Dataset> {
        self.datasets
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// `n` contexts: task uniform over `tasks`, then episode and timestep uniform.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        tasks: &[String],
        n: usize,
        shape: ContextShape,
        rng: &mut R,
    ) -> Result<Vec<ModelContext>> {
        if tasks.is_empty() {
            return Err(Error::invalid("cannot sample from an empty task list"));
        }
        (0..n)
            .map(|_| {
                let ds = self.get(&tasks[rng.gen_range(0..tasks.len())])?;
                if ds.episodes.is_empty() {
                    return Err(Error::invalid(format!("dataset `{}` has no episodes", ds.spec.task_id)));
                }
                let ep = &ds.episodes[rng.gen_range(0..ds.episodes.len())];
                let t = rng.gen_range(0..ep.len());
                make_context(ep, t, shape, &self.layout, &self.tokenizer, ds.spec.reward_scale())
            })
            .collect()
    }
}

/// How contexts are mapped to modulations at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    Fixed(Modulation),
    Pool { pool: ModulationPool, query: QueryConfig },
}

impl Routing {
    /// `task_index` is the position of the evaluated task in the fine-tuning
    /// sequence, used only by oracle pools.
    pub fn modulations(
        &self,
        model: &Mddt<f32>,
        ctxs: &[ModelContext],
        task_index: Option<usize>,
    ) -> Result<Vec<Modulation>> {
        match self {
            Routing::Fixed(m) => Ok(vec![m.clone(); ctxs.len()]),
            Routing::Pool { pool, .. } if pool.oracle => {
                let m = match task_index {
                    Some(i) => pool.modulation(pool.oracle_select(i)?),
                    None => Modulation::none(),
                };
                Ok(vec![m; ctxs.len()])
            }
            Routing::Pool { pool, query } => build_queries(model, ctxs, query)?
                .iter()
                .map(|q| {
                    Ok(match pool.select_eval(&model.params, q)? {
                        crate::modulators::Selection::Pretrain(_) => Modulation::none(),
                        crate::modulators::Selection::Finetune(j) => pool.modulation(j),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskEval {
    pub success_rate: f64,
    pub mean_return: f64,
    pub normalized_score: f64,
}

/// Greedy rollouts of one task, seeded by `(seed, task position, episode)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    model: &Mddt<f32>,
    routing: &Routing,
    suite: &Suite,
    task_id: &str,
    task_index: Option<usize>,
    episodes: usize,
    seed: u64,
    salt: u64,
) -> Result<TaskEval> {
    let ds = suite.get(task_id)?;
    let seeds: Vec<u64> = (0..episodes as u64)
        .map(|e| (1 << 40) + seed * 1_000_003 + salt * 1009 + e)
        .collect();
    let mut route = |m: &Mddt<f32>, ctxs: &[ModelContext]| routing.modulations(m, ctxs, task_index);
    let results = evaluate_episodes(
        model,
        &ds.spec,
        &suite.layout,
        &suite.tokenizer,
        ds.meta.max_return,
        &seeds,
        &mut route,
    )?;
    let n = results.len() as f64;
    let success_rate = results.iter().filter(|r| r.success).count() as f64 / n;
    let mean_return = results.iter().map(|r| f64::from(r.episode_return)).sum::<f64>() / n;
    let normalized = normalized_score(
        mean_return,
        f64::from(ds.meta.expert_score),
        f64::from(ds.meta.random_score),
    )?;
    Ok(TaskEval {
        success_rate,
        mean_return,
        normalized_score: normalized,
    })
}

/// Model, method state and optimizer for one run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub method: Method,
    pub model: Mddt<f32>,
    pub routing: Routing,
    pub anchors: Vec<FisherAnchor<f32>>,
    pub schedule: WarmupCosine,
    pub steps: u64,
    /// Position in the fine-tuning sequence of the task being trained.
    pub task_index: usize,
    opt: AdamW<f32>,
    dropout: f64,
    batch_size: usize,
    lambda_reg: f64,
    fisher_batches: usize,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

pub const PEFT_PREFIX: &str = "mod.peft";

impl Learner {
    /// Applies the method's attach/freeze policy to `model`. Pool methods get
    /// `pretrain_keys` ahead of their own keys; `n_tasks` sizes oracle pools.
    pub fn new(cfg: &RunConfig, mut model: Mddt<f32>, n_tasks: usize, pretrain_keys: &[Vec<f32>]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
        model.params.remove_prefix(&format!("{MOD_PREFIX}prekey."));
        let method = cfg.method;
        let base = model.base_names();
        let mut routing = Routing::Fixed(Modulation::none());
        match method {
            Method::Ft | Method::Ewc | Method::L2 | Method::FtMtScratch | Method::FtMtPretrained => {
                for n in &base {
                    model.params.set_trainable(n, true)?;
                }
            }
            Method::FtHead | Method::FtLastHead => {
                model.params.freeze_all();
                model.params.set_trainable_prefix("head.", true);
                if method == Method::FtLastHead {
                    let last = model.config.n_layers - 1;
                    model.params.set_trainable_prefix(&block_name(last, ""), true);
                    model.params.set_trainable_prefix("final.ln.", true);
                }
            }
            _ => {
                let kind = cfg
                    .modulator()
                    .ok_or_else(|| Error::config(format!("method {method} has no modulator")))?;
                if method.is_pool() {
                    let oracle = method == Method::L2mOracle;
                    let size = if oracle { n_tasks } else { cfg.pool_size() };
                    let mut pool = ModulationPool::install(&mut model, kind, size, cfg.lambda, oracle, &mut rng)?;
                    pool.check_oracle_size(n_tasks)?;
                    if !oracle && !pretrain_keys.is_empty() {
                        pool.attach_pretrain_keys(&mut model.params, pretrain_keys)?;
                    }
                    routing = Routing::Pool { pool, query: cfg.query };
                } else {
                    routing = Routing::Fixed(attach(&mut model, &kind, PEFT_PREFIX, &mut rng)?);
                }
            }
        }
        let opt = AdamW::new(AdamWConfig {
            weight_decay: cfg.weight_decay,
            grad_clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
            ..AdamWConfig::default()
        });
        Ok(Learner {
            method,
            model,
            routing,
            anchors: Vec::new(),
            schedule: WarmupCosine::constant(cfg.lr()),
            steps: 0,
            task_index: 0,
            opt,
            dropout: if method.uses_dropout() { cfg.dropout } else { 0.0 },
            batch_size: cfg.batch_size,
            lambda_reg: cfg.lambda_reg,
            fisher_batches: cfg.fisher_batches,
            rng,
            data_rng,
        })
    }

    pub fn shape(&self) -> ContextShape {
        ContextShape {
            context_len: self.model.config.context_len,
            max_action_dim: self.model.config.max_action_dim,
        }
    }

    pub fn pool(&self) -> Option<&ModulationPool> {
        match &self.routing {
            Routing::Pool { pool, .. } => Some(pool),
            Routing::Fixed(_) => None,
        }
    }

    /// Trainable elements over base elements, as configured right now.
    pub fn trainable_fraction(&self) -> f64 {
        crate::modulators::trainable_fraction(&self.model)
    }

    /// One optimizer step on a batch from `tasks`; returns the loss.
    pub fn train_on(&mut self, suite: &Suite, tasks: &[String]) -> Result<f64> {
        let batch = suite.sample_batch(tasks, self.batch_size, self.shape(), &mut self.data_rng)?;
        self.train_step(&batch)
    }

    pub fn train_step(&mut self, batch: &[ModelContext]) -> Result<f64> {
        let mut g = Graph::new();
        let rate = self.dropout;
        let loss = match &mut self.routing {
            Routing::Pool { pool, .. } if pool.oracle => {
                let j = pool.oracle_select(self.task_index)?;
                pool.set_active(&mut self.model.params, &[j]);
                let drop = Some(Dropout {
                    rate,
                    rng: &mut self.rng,
                });
                self.model.action_loss(&mut g, batch, &pool.modulation(j), drop)?.0
            }
            Routing::Pool { pool, query } => {
                let qs = build_queries(&self.model, batch, query)?;
                let mut groups: IndexMap<usize, Vec<usize>> = IndexMap::new();
                for (i, q) in qs.iter().enumerate() {
                    let j = pool.select_train(&self.model.params, q)?;
                    groups.entry(j).or_default().push(i);
                }
                let active: Vec<usize> = groups.keys().copied().collect();
                pool.set_active(&mut self.model.params, &active);
                let mut parts = Vec::with_capacity(groups.len());
                let mut total = 0usize;
                let mut pull = None;
                for (&j, items) in &groups {
                    let sub: Vec<ModelContext> = items.iter().map(|&i| batch[i].clone()).collect();
                    let drop = Some(Dropout {
                        rate,
                        rng: &mut self.rng,
                    });
                    let (l, n) = self.model.action_loss(&mut g, &sub, &pool.modulation(j), drop)?;
                    parts.push((l, n));
                    total += n;
                    let key = g.param(&self.model.params, &ModulationPool::key_name(j))?;
                    for &i in items {
                        let q = g.constant(Tensor::from_slice(&[qs[i].len()], &qs[i])?);
                        let sim = g.cosine(q, key)?;
                        pull = Some(match pull {
                            Some(acc) => g.add(acc, sim)?,
                            None => sim,
                        });
                    }
                }
                // sub-batch means re-weighted by their share of scored tokens
                let mut task = None;
                for (l, n) in parts {
                    let w = g.scale(l, n as f32 / total as f32);
                    task = Some(match task {
                        Some(acc) => g.add(acc, w)?,
                        None => w,
                    });
                }
                let task = task.ok_or(Error::EmptyMask)?;
                let pull = pull.ok_or(Error::EmptyMask)?;
                let pull = g.scale(pull, (pool.lambda / batch.len() as f64) as f32);
                g.sub(task, pull)?
            }
            Routing::Fixed(m) => {
                let drop = Some(Dropout {
                    rate,
                    rng: &mut self.rng,
                });
                let (l, _) = self.model.action_loss(&mut g, batch, m, drop)?;
                match total_penalty(&mut g, &self.model.params, &self.anchors)? {
                    Some(p) => g.add(l, p)?,
                    None => l,
                }
            }
        };
        let grads = g.backward(loss)?;
        let trainable = self.model.params.trainable_names();
        if grads.len() != trainable.len() {
            return Err(Error::invalid(format!(
                "{} trainable tensors but {} received gradients",
                trainable.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let lr = self.schedule.lr_at(self.steps);
        self.opt.step(&mut self.model.params, &grads, lr)?;
        Ok(f64::from(grads.loss))
    }

    /// Closes the current task: pools snapshot counts, EWC and L2 add an
    /// anchor at the current weights.
    pub fn end_task(&mut self, suite: &Suite, task_id: &str) -> Result<()> {
        if let Routing::Pool { pool, .. } = &mut self.routing {
            pool.end_task();
        }
        match self.method {
            Method::Ewc => {
                let tasks = [task_id.to_string()];
                let shape = self.shape();
                let batches = (0..self.fisher_batches)
                    .map(|_| suite.sample_batch(&tasks, self.batch_size, shape, &mut self.data_rng))
                    .collect::<Result<Vec<_>>>()?;
                let fisher = model_fisher(&self.model, &batches, &Modulation::none())?;
                let fisher = fisher
                    .into_iter()
                    .filter(|(n, _)| self.model.params.is_trainable(n))
                    .collect();
                self.anchors
                    .push(FisherAnchor::new(&self.model.params, fisher, self.lambda_reg)?);
            }
            Method::L2 => {
                let names = self.model.params.trainable_names();
                self.anchors
                    .push(FisherAnchor::l2(&self.model.params, &names, self.lambda_reg)?);
            }
            _ => {}
        }
        self.task_index += 1;
        Ok(())
    }

    pub fn evaluate(
        &self,
        suite: &Suite,
        task_id: &str,
        task_index: Option<usize>,
        episodes: usize,
        seed: u64,
        salt: u64,
    ) -> Result<TaskEval> {
        evaluate_task(
            &self.model,
            &self.routing,
            suite,
            task_id,
            task_index,
            episodes,
            seed,
            salt,
        )
    }
}
