//! Flat `key = value` run configuration with per-method defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{MddtConfig, TokenType};
use crate::modulators::{LoraTarget, ModulatorKind, PromptMode, QueryConfig};

use super::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    GenData,
    Pretrain,
    Finetune,
    Continual,
    Eval,
    ExportEmbeddings,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Continual => "continual",
            Mode::Eval => "eval",
            Mode::ExportEmbeddings => "export-embeddings",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Mode::GenData,
            Mode::Pretrain,
            Mode::Finetune,
            Mode::Continual,
            Mode::Eval,
            Mode::ExportEmbeddings,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub method: Method,
    pub seed: u64,

    pub steps_per_task: u64,
    pub pretrain_steps: u64,
    pub warmup: u64,
    /// Evaluate every this many steps inside a block; 0 evaluates only at block ends.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub batch_size: usize,
    /// Batch size while pre-training; `None` uses `batch_size`.
    pub pretrain_batch_size: Option<usize>,
    /// Fine-tuning learning rate; `None` takes the method default.
    pub lr: Option<f64>,
    pub pretrain_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,

    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub dropout: f64,

    pub rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    pub reduction: usize,
    pub prompt_len: usize,
    /// `None` takes 30 for modulator pools and 100 for prompt pools.
    pub pool_size: Option<usize>,
    pub lambda: f64,
    pub lambda_reg: f64,
    pub fisher_batches: usize,
    pub pretrain_keys: usize,
    pub key_steps: u64,
    pub key_lr: f64,
    pub query: QueryConfig,

    pub episodes_per_task: usize,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// `all`, `pretrain`, `finetune` or a comma-separated list of task ids.
    pub tasks: String,
    pub embed_layer: String,
    pub embed_token: TokenType,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = MddtConfig::desk();
        RunConfig {
            mode: Mode::Continual,
            method: Method::L2m,
            seed: 0,
            steps_per_task: 5000,
            pretrain_steps: 20_000,
            warmup: 4000,
            eval_every: 0,
            eval_episodes: 10,
            batch_size: 64,
            pretrain_batch_size: None,
            lr: None,
            pretrain_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 0.01,
            grad_clip: 0.25,
            n_layers: desk.n_layers,
            n_heads: desk.n_heads,
            embed_dim: desk.embed_dim,
            context_len: desk.context_len,
            dropout: desk.dropout,
            rank: 8,
            lora_targets: LoraTarget::DEFAULT.to_vec(),
            reduction: 16,
            prompt_len: 25,
            pool_size: None,
            lambda: 0.5,
            lambda_reg: 1e4,
            fisher_batches: 256,
            pretrain_keys: 100,
            key_steps: 2000,
            key_lr: 1e-3,
            query: QueryConfig::default(),
            episodes_per_task: 200,
            data_dir: std::env::var_os("L2M_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from),
            out: PathBuf::from("runs"),
            checkpoint: None,
            tasks: "all".into(),
            embed_layer: "embed".into(),
            embed_token: TokenType::State,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "steps_per_task" | "steps" => self.steps_per_task = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = Some(parse(key, v)?),
            "lr" => self.lr = Some(parse(key, v)?),
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "context_len" => self.context_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "lora_targets" => {
                self.lora_targets = v.split(',').map(|t| t.trim().parse()).collect::<Result<_>>()?;
            }
            "reduction" => self.reduction = parse(key, v)?,
            "prompt_len" => self.prompt_len = parse(key, v)?,
            "pool_size" => self.pool_size = Some(parse(key, v)?),
            "lambda" => self.lambda = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "fisher_batches" => self.fisher_batches = parse(key, v)?,
            "pretrain_keys" => self.pretrain_keys = parse(key, v)?,
            "key_steps" => self.key_steps = parse(key, v)?,
            "key_lr" => self.key_lr = parse(key, v)?,
            "query_source" => self.query.source = v.parse()?,
            "query_layer" => self.query.layer = v.parse()?,
            "query_history" => self.query.history = parse(key, v)?,
            "episodes_per_task" => self.episodes_per_task = parse(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out" => self.out = v.into(),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "tasks" => self.tasks = v.to_string(),
            "embed_layer" => self.embed_layer = v.to_string(),
            "embed_token" => self.embed_token = v.parse()?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every non-comment line of a `key = value` text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> MddtConfig {
        MddtConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            context_len: self.context_len,
            dropout: self.dropout,
            ..MddtConfig::desk()
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.method.default_lr())
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
            .unwrap_or(if self.method.is_prompt_based() { 100 } else { 30 })
    }

    /// Modulator installed by the method, if any.
    pub fn modulator(&self) -> Option<ModulatorKind> {
        let prompt = |mode| ModulatorKind::Prompt {
            mode,
            len: self.prompt_len,
        };
        Some(match self.method {
            Method::Lora | Method::L2m | Method::L2mOracle => ModulatorKind::Lora {
                rank: self.rank,
                targets: self.lora_targets.clone(),
            },
            Method::Ia3 => ModulatorKind::Ia3,
            Method::Adapters => ModulatorKind::Adapter {
                reduction: self.reduction,
            },
            Method::Prompt | Method::L2pPt => prompt(PromptMode::Prompt),
            Method::Prefix | Method::L2pPret => prompt(PromptMode::Prefix),
            Method::PTuningV2 | Method::L2pPv2 => prompt(PromptMode::PTuningV2),
            _ => return None,
        })
    }

    /// Cross-field checks: model shape, positive schedule sizes and method knobs.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        if self.batch_size == 0 || self.pretrain_batch_size == Some(0) || self.eval_episodes == 0 {
            return Err(Error::config("batch sizes and eval_episodes must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr()),
            ("pretrain_lr", self.pretrain_lr),
            ("key_lr", self.key_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lambda < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::config("lambda and lambda_reg must be non-negative"));
        }
        if let Some(kind) = self.modulator() {
            kind.validate(&model)?;
        }
        if self.method.is_pool() && self.pool_size() == 0 {
            return Err(Error::config("pool_size must be positive"));
        }
        if matches!(self.method, Method::Ewc) && self.fisher_batches == 0 {
            return Err(Error::config("ewc needs fisher_batches > 0"));
        }
        if self.query.history == 0 || self.query.history > self.context_len {
            return Err(Error::config(format!(
                "query_history {} must lie in 1..={}",
                self.query.history, self.context_len
            )));
        }
        Ok(())
    }
}
