//! Parameter-efficient modulators (LoRA, (IA)³, adapters, prompts) and the
//! key-addressed modulation pool.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mddt, MddtConfig, TokenType, MOD_PREFIX};
use crate::numerics::{cosine, Graph, ParameterStore, Real, Tensor, Var};
use crate::trajectory::ModelContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    AttnQuery,
    AttnKey,
    AttnValue,
    FfnActivation,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::AttnQuery,
        LoraTarget::AttnKey,
        LoraTarget::AttnValue,
        LoraTarget::FfnActivation,
    ];

    /// Query and value projections plus the feed-forward activation.
    pub const DEFAULT: [LoraTarget; 3] = [LoraTarget::AttnQuery, LoraTarget::AttnValue, LoraTarget::FfnActivation];

    fn short(self) -> &'static str {
        match self {
            LoraTarget::AttnQuery => "q",
            LoraTarget::AttnKey => "k",
            LoraTarget::AttnValue => "v",
            LoraTarget::FfnActivation => "ff",
        }
    }

    /// `(d_in, d_out)` of the adapted weight.
    pub fn shape(self, cfg: &MddtConfig) -> (usize, usize) {
        match self {
            LoraTarget::FfnActivation => (cfg.embed_dim, cfg.ffn_dim()),
            _ => (cfg.embed_dim, cfg.embed_dim),
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraTarget::AttnQuery => "attn_query",
            LoraTarget::AttnKey => "attn_key",
            LoraTarget::AttnValue => "attn_value",
            LoraTarget::FfnActivation => "ffn_activation",
        })
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL.into_iter().find(|t| t.to_string() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown modulation target `{s}` (expected attn_query, attn_key, attn_value or ffn_activation)"
            ))
        })
    }
}

/// Activations scaled by (IA)³ vectors inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ia3Site {
    Ln1,
    Query,
    Key,
    Value,
    AttnOut,
    Ln2,
    FfnHidden,
    FfnOut,
}

impl Ia3Site {
    pub const ALL: [Ia3Site; 8] = [
        Ia3Site::Ln1,
        Ia3Site::Query,
        Ia3Site::Key,
        Ia3Site::Value,
        Ia3Site::AttnOut,
        Ia3Site::Ln2,
        Ia3Site::FfnHidden,
        Ia3Site::FfnOut,
    ];

    fn short(self) -> &'static str {
        match self {
            Ia3Site::Ln1 => "ln1",
            Ia3Site::Query => "q",
            Ia3Site::Key => "k",
            Ia3Site::Value => "v",
            Ia3Site::AttnOut => "attn",
            Ia3Site::Ln2 => "ln2",
            Ia3Site::FfnHidden => "ff",
            Ia3Site::FfnOut => "out",
        }
    }

    pub fn width(self, cfg: &MddtConfig) -> usize {
        match self {
            Ia3Site::FfnHidden => cfg.ffn_dim(),
            _ => cfg.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    /// Learnable tokens prepended to the input sequence.
    Prompt,
    /// Learnable key/value rows prepended inside every attention layer.
    Prefix,
    /// Learnable per-layer hidden prompts projected by the frozen key/value weights.
    PTuningV2,
}

impl PromptMode {
    pub fn kind_name(self) -> &'static str {
        match self {
            PromptMode::Prompt => "prompt",
            PromptMode::Prefix => "prefix",
            PromptMode::PTuningV2 => "ptv2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSite {
    pub prefix: String,
    pub targets: Vec<LoraTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSite {
    pub mode: PromptMode,
    pub prefix: String,
}

/// Which modulator tensors a forward pass reads. The default is the bare model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Modulation {
    pub lora: Option<LoraSite>,
    pub ia3: Option<String>,
    pub adapter: Option<String>,
    pub prompt: Option<PromptSite>,
}

impl Modulation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

pub fn lora_names(prefix: &str, layer: usize, target: LoraTarget) -> (String, String) {
    let base = format!("{prefix}.{layer}.{}", target.short());
    (format!("{base}.a"), format!("{base}.b"))
}

pub fn ia3_name(prefix: &str, layer: usize, site: Ia3Site) -> String {
    format!("{prefix}.{layer}.{}", site.short())
}

/// `[down.w, down.b, up.w, up.b]` for the adapter after `which` ("attn" or "ffn").
pub fn adapter_names(prefix: &str, layer: usize, which: &str) -> [String; 4] {
    let b = format!("{prefix}.{layer}.{which}");
    [
        format!("{b}.down.w"),
        format!("{b}.down.b"),
        format!("{b}.up.w"),
        format!("{b}.up.b"),
    ]
}

/// Tensor names for a prompt bundle: `[tokens]`, `[k, v]` or `[hidden]`.
pub fn prompt_names(prefix: &str, mode: PromptMode, layer: usize) -> Vec<String> {
    match mode {
        PromptMode::Prompt => vec![format!("{prefix}.tokens")],
        PromptMode::Prefix => vec![format!("{prefix}.{layer}.k"), format!("{prefix}.{layer}.v")],
        PromptMode::PTuningV2 => vec![format!("{prefix}.{layer}.h")],
    }
}

/// Stand-alone low-rank update in row form: `x·W + (x·A)·B`.
pub fn lora_forward<T: Real>(w: &Tensor<T>, x: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "lora rank",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let base = x.matmul(w)?;
    let delta = x.matmul(a)?.matmul(b)?;
    if base.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "lora output",
            left: base.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let data = base.data().iter().zip(delta.data()).map(|(&p, &q)| p + q).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// A single modulator bundle's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModulatorKind {
    Lora { rank: usize, targets: Vec<LoraTarget> },
    Ia3,
    Adapter { reduction: usize },
    Prompt { mode: PromptMode, len: usize },
}

impl ModulatorKind {
    pub fn lora(rank: usize) -> Self {
        ModulatorKind::Lora {
            rank,
            targets: LoraTarget::DEFAULT.to_vec(),
        }
    }

    /// Archive `kind` tag.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModulatorKind::Lora { .. } => "lora",
            ModulatorKind::Ia3 => "ia3",
            ModulatorKind::Adapter { .. } => "adapter",
            ModulatorKind::Prompt { mode, .. } => mode.kind_name(),
        }
    }

    pub fn validate(&self, cfg: &MddtConfig) -> Result<()> {
        match self {
            ModulatorKind::Lora { rank, targets } => {
                if targets.is_empty() {
                    return Err(Error::config("LoRA needs at least one target"));
                }
                for t in targets {
                    let (din, _) = t.shape(cfg);
                    if *rank == 0 || *rank > din / 2 {
                        return Err(Error::config(format!(
                            "LoRA rank {rank} must lie in 1..={} for target {t}",
                            din / 2
                        )));
                    }
                }
            }
            ModulatorKind::Adapter { reduction } => {
                if *reduction == 0 || cfg.embed_dim / reduction == 0 {
                    return Err(Error::config(format!(
                        "adapter reduction {reduction} leaves no bottleneck width for d={}",
                        cfg.embed_dim
                    )));
                }
            }
            ModulatorKind::Prompt { len, .. } => {
                if *len == 0 {
                    return Err(Error::config("prompt length must be positive"));
                }
            }
            ModulatorKind::Ia3 => {}
        }
        Ok(())
    }

    /// The modulation that reads a bundle installed under `prefix`.
    pub fn modulation(&self, prefix: &str) -> Modulation {
        let p = prefix.to_string();
        match self {
            ModulatorKind::Lora { targets, .. } => Modulation {
                lora: Some(LoraSite {
                    prefix: p,
                    targets: targets.clone(),
                }),
                ..Default::default()
            },
            ModulatorKind::Ia3 => Modulation {
                ia3: Some(p),
                ..Default::default()
            },
            ModulatorKind::Adapter { .. } => Modulation {
                adapter: Some(p),
                ..Default::default()
            },
            ModulatorKind::Prompt { mode, .. } => Modulation {
                prompt: Some(PromptSite { mode: *mode, prefix: p }),
                ..Default::default()
            },
        }
    }

    /// Fresh tensors for one bundle, named under `prefix`.
    pub fn init_tensors<T: Real, R: Rng + ?Sized>(
        &self,
        cfg: &MddtConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Vec<(String, Tensor<T>)>> {
        self.validate(cfg)?;
        let d = cfg.embed_dim;
        let std = 0.02;
        let mut out = Vec::new();
        for l in 0..cfg.n_layers {
            match self {
                ModulatorKind::Lora { rank, targets } => {
                    for &t in targets {
                        let (din, dout) = t.shape(cfg);
                        let (an, bn) = lora_names(prefix, l, t);
                        out.push((an, Tensor::randn(&[din, *rank], std, rng)));
                        out.push((bn, Tensor::zeros(&[*rank, dout])));
                    }
                }
                ModulatorKind::Ia3 => {
                    for site in Ia3Site::ALL {
                        out.push((ia3_name(prefix, l, site), Tensor::ones(&[site.width(cfg)])));
                    }
                }
                ModulatorKind::Adapter { reduction } => {
                    let r = d / reduction;
                    for which in ["attn", "ffn"] {
                        let [dw, db, uw, ub] = adapter_names(prefix, l, which);
                        out.push((dw, Tensor::randn(&[d, r], std, rng)));
                        out.push((db, Tensor::zeros(&[r])));
                        out.push((uw, Tensor::zeros(&[r, d])));
                        out.push((ub, Tensor::zeros(&[d])));
                    }
                }
                ModulatorKind::Prompt { mode, len } => {
                    if *mode == PromptMode::Prompt && l > 0 {
                        continue;
                    }
                    for name in prompt_names(prefix, *mode, l) {
                        out.push((name, Tensor::randn(&[*len, d], std, rng)));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Trainable tensor elements in one bundle.
    pub fn num_params(&self, cfg: &MddtConfig) -> usize {
        let d = cfg.embed_dim;
        let per_layer = match self {
            ModulatorKind::Lora { rank, targets } => targets
                .iter()
                .map(|t| {
                    let (i, o) = t.shape(cfg);
                    rank * (i + o)
                })
                .sum(),
            ModulatorKind::Ia3 => Ia3Site::ALL.iter().map(|s| s.width(cfg)).sum(),
            ModulatorKind::Adapter { reduction } => {
                let r = d / reduction;
                2 * (d * r + r + r * d + d)
            }
            ModulatorKind::Prompt { mode, len } => match mode {
                PromptMode::Prompt => return len * d,
                PromptMode::Prefix => 2 * len * d,
                PromptMode::PTuningV2 => len * d,
            },
        };
        per_layer * cfg.n_layers
    }
}

/// Installs a bundle under `prefix`, freezes every base parameter and leaves
/// only the new tensors trainable.
pub fn attach<T: Real, R: Rng + ?Sized>(
    model: &mut Mddt<T>,
    kind: &ModulatorKind,
    prefix: &str,
    rng: &mut R,
) -> Result<Modulation> {
    if !prefix.starts_with(MOD_PREFIX) {
        return Err(Error::config(format!(
            "modulator prefix `{prefix}` must start with `{MOD_PREFIX}`"
        )));
    }
    let tensors = kind.init_tensors(&model.config, prefix, rng)?;
    model.params.freeze_all();
    for (name, t) in tensors {
        model.params.insert(name, t, true)?;
    }
    Ok(kind.modulation(prefix))
}

/// Removes every tensor installed under `prefix`.
pub fn detach<T: Real>(model: &mut Mddt<T>, prefix: &str) -> usize {
    model.params.remove_prefix(&format!("{prefix}."))
}

/// Trainable elements over base-model elements.
pub fn trainable_fraction<T: Real>(model: &Mddt<T>) -> f64 {
    model.params.num_trainable_elements() as f64 / model.num_base_params() as f64
}

/// Where in the model a query is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryLayer {
    /// Per-type token embeddings, before timestep embeddings are added.
    Embed,
    First,
    Mid,
    Last,
}

impl FromStr for QueryLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(QueryLayer::Embed),
            "block-1" | "block-first" => Ok(QueryLayer::First),
            "block-mid" => Ok(QueryLayer::Mid),
            "block-last" => Ok(QueryLayer::Last),
            other => Err(Error::config(format!(
                "unknown query layer `{other}` (expected embed, block-1, block-mid or block-last)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    State,
    Action,
    Reward,
    Rtg,
    StateAction,
    StateRtg,
}

impl QuerySource {
    fn token_types(self) -> &'static [TokenType] {
        match self {
            QuerySource::State => &[TokenType::State],
            QuerySource::Action => &[TokenType::Action],
            QuerySource::Reward => &[TokenType::Reward],
            QuerySource::Rtg => &[TokenType::Rtg],
            QuerySource::StateAction => &[TokenType::State, TokenType::Action],
            QuerySource::StateRtg => &[TokenType::State, TokenType::Rtg],
        }
    }
}

impl FromStr for QuerySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(QuerySource::State),
            "action" => Ok(QuerySource::Action),
            "reward" => Ok(QuerySource::Reward),
            "rtg" => Ok(QuerySource::Rtg),
            "state_action" => Ok(QuerySource::StateAction),
            "state_rtg" => Ok(QuerySource::StateRtg),
            other => Err(Error::config(format!(
                "unknown query source `{other}` (expected state, action, reward, rtg, state_action or state_rtg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub source: QuerySource,
    pub layer: QueryLayer,
    pub history: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            source: QuerySource::State,
            layer: QueryLayer::Embed,
            history: 5,
        }
    }
}

/// One query per context: mean over the last `history` real timesteps of the
/// chosen token representations, computed without gradients on the bare model.
pub fn build_queries<T: Real>(model: &Mddt<T>, batch: &[ModelContext], qc: &QueryConfig) -> Result<Vec<Vec<T>>> {
    let cfg = &model.config;
    if qc.history == 0 || qc.history > cfg.context_len {
        return Err(Error::config(format!(
            "query history {} must lie in 1..={}",
            qc.history, cfg.context_len
        )));
    }
    let mut g = Graph::no_grad();
    let (h, rows_per_item, prompt) = match qc.layer {
        QueryLayer::Embed => (model.embed_tokens(&mut g, batch)?, cfg.seq_len(), 0),
        layer => {
            let fwd = model.forward(&mut g, batch, &Modulation::none(), None)?;
            let idx = match layer {
                QueryLayer::First => 0,
                QueryLayer::Mid => cfg.n_layers / 2,
                _ => cfg.n_layers - 1,
            };
            (fwd.blocks[idx], fwd.rows_per_item(), fwd.prompt_len)
        }
    };
    let hv = g.value(h);
    let d = cfg.embed_dim;
    let mut out = Vec::with_capacity(batch.len());
    for (i, ctx) in batch.iter().enumerate() {
        let steps: Vec<usize> = (0..cfg.context_len)
            .rev()
            .filter(|&c| ctx.valid[c])
            .take(qc.history)
            .collect();
        let mut q = vec![T::zero(); d];
        for &ty in qc.source.token_types() {
            let slots = if ty == TokenType::Action {
                ctx.action_dim.max(1)
            } else {
                1
            };
            let mut acc = vec![T::zero(); d];
            let mut n = 0usize;
            for &c in &steps {
                for s in 0..slots {
                    let row = i * rows_per_item + prompt + cfg.position(c, ty, s);
                    acc.iter_mut().zip(hv.row(row)).for_each(|(a, &v)| *a = *a + v);
                    n += 1;
                }
            }
            let inv = T::lit(1.0 / (n.max(1) * qc.source.token_types().len()) as f64);
            q.iter_mut().zip(&acc).for_each(|(a, &v)| *a = *a + v * inv);
        }
        out.push(q);
    }
    Ok(out)
}

/// Index maximising `cos(q, k_i) / n_i`; ties go to the lowest index.
pub fn select_key<T: Real>(keys: &[&[T]], counts: &[u64], q: &[T]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::invalid("cannot select from an empty pool"));
    }
    if counts.len() != keys.len() {
        return Err(Error::ShapeMismatch {
            op: "select_key",
            left: vec![keys.len()],
            right: vec![counts.len()],
        });
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, (k, &n)) in keys.iter().zip(counts).enumerate() {
        let score = cosine(q, k).to_f64_lossy() / n.max(1) as f64;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// `task_loss − λ·cos(stopgrad(q), key)`.
pub fn pool_loss<T: Real>(g: &mut Graph<T>, task_loss: Var, q: Var, key: Var, lambda: f64) -> Result<Var> {
    let q = g.detach(q);
    let sim = g.cosine(q, key)?;
    let pull = g.scale(sim, T::lit(lambda));
    g.sub(task_loss, pull)
}

/// Result of routing a query through the concatenated pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// One of the keys trained for pre-training tasks; the bare model serves it.
    Pretrain(usize),
    Finetune(usize),
}

/// `M` learnable keys, each owning one modulator bundle, with selection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationPool {
    pub kind: ModulatorKind,
    pub size: usize,
    pub lambda: f64,
    pub counts: Vec<u64>,
    /// Counts as they stood at the end of the previous task; used for scoring.
    pub frozen_counts: Vec<u64>,
    pub n_pretrain_keys: usize,
    /// Address bundles by task index instead of keys.
    pub oracle: bool,
}

impl ModulationPool {
    pub fn bundle_prefix(j: usize) -> String {
        format!("{MOD_PREFIX}pool.{j}")
    }

    pub fn key_name(j: usize) -> String {
        format!("{MOD_PREFIX}key.{j}")
    }

    pub fn pretrain_key_name(j: usize) -> String {
        format!("{MOD_PREFIX}prekey.{j}")
    }

    /// Creates `size` bundles and keys (uniform in `[-1, 1]`) inside `model`,
    /// freezing the base. Everything starts frozen; training toggles the
    /// selected bundle on.
    pub fn install<T: Real, R: Rng + ?Sized>(
        model: &mut Mddt<T>,
        kind: ModulatorKind,
        size: usize,
        lambda: f64,
        oracle: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("pool size must be positive"));
        }
        model.params.freeze_all();
        let d = model.config.embed_dim;
        for j in 0..size {
            for (name, t) in kind.init_tensors::<T, R>(&model.config, &Self::bundle_prefix(j), rng)? {
                model.params.insert(name, t, false)?;
            }
            if !oracle {
                model
                    .params
                    .insert(Self::key_name(j), Tensor::uniform(&[d], -1.0, 1.0, rng), false)?;
            }
        }
        Ok(ModulationPool {
            kind,
            size,
            lambda,
            counts: vec![1; size],
            frozen_counts: vec![1; size],
            n_pretrain_keys: 0,
            oracle,
        })
    }

    /// Oracle pools must have exactly one bundle per task.
    pub fn check_oracle_size(&self, n_tasks: usize) -> Result<()> {
        if self.oracle && self.size != n_tasks {
            return Err(Error::config(format!(
                "oracle pool has {} bundles for {n_tasks} tasks",
                self.size
            )));
        }
        Ok(())
    }

    pub fn modulation(&self, j: usize) -> Modulation {
        self.kind.modulation(&Self::bundle_prefix(j))
    }

    pub fn key<'a, T: Real>(&self, store: &'a ParameterStore<T>, j: usize) -> Result<&'a [T]> {
        Ok(store.get(&Self::key_name(j))?.data())
    }

    fn keys<'a, T: Real>(&self, store: &'a ParameterStore<T>) -> Result<Vec<&'a [T]>> {
        (0..self.size).map(|j| self.key(store, j)).collect()
    }

    /// Training-time routing: scores with the frozen counts and bumps the live count.
    pub fn select_train<T: Real>(&mut self, store: &ParameterStore<T>, q: &[T]) -> Result<usize> {
        let j = select_key(&self.keys(store)?, &self.frozen_counts, q)?;
        self.counts[j] += 1;
        Ok(j)
    }

    /// Evaluation-time routing over pre-training keys followed by fine-tuning
    /// keys, by cosine alone. Counts are not touched.
    pub fn select_eval<T: Real>(&self, store: &ParameterStore<T>, q: &[T]) -> Result<Selection> {
        let mut keys = Vec::with_capacity(self.n_pretrain_keys + self.size);
        for j in 0..self.n_pretrain_keys {
            keys.push(store.get(&Self::pretrain_key_name(j))?.data());
        }
        keys.extend(self.keys(store)?);
        let ones = vec![1; keys.len()];
        let j = select_key(&keys, &ones, q)?;
        Ok(if j < self.n_pretrain_keys {
            Selection::Pretrain(j)
        } else {
            Selection::Finetune(j - self.n_pretrain_keys)
        })
    }

    pub fn oracle_select(&self, task_index: usize) -> Result<usize> {
        if task_index >= self.size {
            return Err(Error::invalid(format!(
                "task index {task_index} outside oracle pool of {}",
                self.size
            )));
        }
        Ok(task_index)
    }

    /// Closes a task: later scoring sees counts as of now.
    pub fn end_task(&mut self) {
        self.frozen_counts.clone_from(&self.counts);
    }

    /// Makes bundle `j` (and its key) the only trainable tensors.
    pub fn set_active<T: Real>(&self, store: &mut ParameterStore<T>, active: &[usize]) {
        store.freeze_all();
        for &j in active {
            store.set_trainable_prefix(&format!("{}.", Self::bundle_prefix(j)), true);
            if !self.oracle {
                let _ = store.set_trainable(&Self::key_name(j), true);
            }
        }
    }

    /// Adds pre-training keys (frozen, no bundles) ahead of the fine-tuning keys.
    pub fn attach_pretrain_keys<T: Real>(&mut self, store: &mut ParameterStore<T>, keys: &[Vec<T>]) -> Result<()> {
        let d = match store.get(&Self::key_name(0)) {
            Ok(k) => k.numel(),
            Err(_) => return Err(Error::config("oracle pools do not use pre-training keys")),
        };
        store.remove_prefix(&format!("{MOD_PREFIX}prekey."));
        for (j, k) in keys.iter().enumerate() {
            if k.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "pretrain keys",
                    left: vec![k.len()],
                    right: vec![d],
                });
            }
            store.insert(Self::pretrain_key_name(j), Tensor::from_slice(&[d], k)?, false)?;
        }
        self.n_pretrain_keys = keys.len();
        Ok(())
    }
}
