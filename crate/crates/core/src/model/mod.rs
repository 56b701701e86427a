//! The multi-domain decision transformer: per-type token embeddings, learned
//! timestep embeddings, a causal pre-norm GPT trunk, and the action head.

mod checkpoint;
mod decode;
mod embeddings;

use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulators::{
    adapter_names, ia3_name, lora_names, prompt_names, Ia3Site, LoraTarget, Modulation, PromptMode,
};
use crate::numerics::{AttentionSpec, Graph, ParameterStore, Real, Tensor, Var};
use crate::trajectory::ModelContext;

pub use checkpoint::{
    decode_archive, encode_archive, load_checkpoint, read_archive, save_checkpoint, write_archive, Archive, Checkpoint,
    MAGIC,
};
pub use decode::{decode_actions, evaluate_episodes, masked_argmax, EpisodeResult, Router, StepLog};
pub use embeddings::{export_embeddings, write_embeddings_csv, EmbeddingRow, LayerSel};

/// Prefix shared by every modulator tensor; anything else in a store is base model.
pub const MOD_PREFIX: &str = "mod.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MddtConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub action_bins: usize,
    pub max_action_dim: usize,
    pub state_dim: usize,
    pub dropout: f64,
    pub max_episode_len: usize,
}

impl MddtConfig {
    /// CPU-sized default for the synthetic suite.
    pub fn desk() -> Self {
        MddtConfig {
            n_layers: 3,
            n_heads: 4,
            embed_dim: 128,
            context_len: 5,
            action_bins: 64,
            max_action_dim: 4,
            state_dim: crate::envsdata::UNIFIED_STATE_DIM,
            dropout: 0.2,
            max_episode_len: 64,
        }
    }

    /// The 40M-parameter shape (6 layers, 12 heads, 768 dims) with a 204-dim state space.
    pub fn paper_shaped() -> Self {
        MddtConfig {
            n_layers: 6,
            n_heads: 12,
            embed_dim: 768,
            context_len: 5,
            action_bins: 64,
            max_action_dim: 6,
            state_dim: 204,
            dropout: 0.2,
            max_episode_len: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_layers == 0, "n_layers must be positive"),
            (self.n_heads == 0, "n_heads must be positive"),
            (self.embed_dim == 0, "embed_dim must be positive"),
            (self.context_len == 0, "context_len must be positive"),
            (self.action_bins < 2, "action_bins must be at least 2"),
            (self.max_action_dim == 0, "max_action_dim must be positive"),
            (self.state_dim == 0, "state_dim must be positive"),
            (self.max_episode_len == 0, "max_episode_len must be positive"),
            (!(0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(bad, _)| *bad) {
            return Err(Error::config(*msg));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.max_action_dim + 3
    }

    pub fn seq_len(&self) -> usize {
        self.context_len * self.tokens_per_step()
    }

    /// Action bins plus the PAD id.
    pub fn vocab(&self) -> usize {
        self.action_bins + 1
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Sequence position of a token within one context.
    pub fn position(&self, timestep: usize, token: TokenType, slot: usize) -> usize {
        let base = timestep * self.tokens_per_step();
        match token {
            TokenType::Rtg => base,
            TokenType::State => base + 1,
            TokenType::Action => base + 2 + slot,
            TokenType::Reward => base + 2 + self.max_action_dim,
        }
    }

    /// Position whose output predicts action slot `slot` of `timestep`.
    pub fn predicting_position(&self, timestep: usize, slot: usize) -> usize {
        self.position(timestep, TokenType::Action, slot) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenType {
    Rtg,
    State,
    Action,
    Reward,
}

impl FromStr for TokenType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtg" => Ok(TokenType::Rtg),
            "state" => Ok(TokenType::State),
            "action" => Ok(TokenType::Action),
            "reward" => Ok(TokenType::Reward),
            other => Err(Error::config(format!(
                "unknown token type `{other}` (expected rtg, state, action or reward)"
            ))),
        }
    }
}

pub(crate) fn block_name(layer: usize, rest: &str) -> String {
    format!("block.{layer}.{rest}")
}

/// Name of the frozen weight a LoRA target adapts.
pub fn target_weight(layer: usize, target: LoraTarget) -> String {
    block_name(
        layer,
        match target {
            LoraTarget::AttnQuery => "attn.q.w",
            LoraTarget::AttnKey => "attn.k.w",
            LoraTarget::AttnValue => "attn.v.w",
            LoraTarget::FfnActivation => "ffn.up.w",
        },
    )
}

/// Train-time dropout source. `None` runs the deterministic evaluation path.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<T: Real>(slot: &mut Option<Dropout<'_>>, g: &mut Graph<T>, x: Var) -> Var {
        match slot {
            Some(d) if d.rate > 0.0 => g.dropout(x, d.rate, &mut *d.rng),
            _ => x,
        }
    }
}

/// Graph handles produced by one forward pass over a batch of contexts.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Raw per-type token embeddings before timestep/slot embeddings, `[batch * seq_len, d]`.
    pub tokens: Var,
    /// Residual stream after each block, `[batch * rows_per_item, d]`.
    pub blocks: Vec<Var>,
    /// Final-norm output, `[batch * rows_per_item, d]`.
    pub hidden: Var,
    pub batch: usize,
    /// Prompt rows prepended to each item by input-prompt tuning.
    pub prompt_len: usize,
    pub seq_len: usize,
}

impl ForwardOutput {
    pub fn rows_per_item(&self) -> usize {
        self.prompt_len + self.seq_len
    }

    /// Row of a context position in `blocks`/`hidden`.
    pub fn row(&self, item: usize, position: usize) -> usize {
        item * self.rows_per_item() + self.prompt_len + position
    }
}

/// Targets and loss mask for the rows selected by [`Mddt::action_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRows {
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Mddt<T> {
    pub config: MddtConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> Mddt<T> {
    /// Fresh model: dense weights and embedding tables ~ N(0, 0.02), biases 0, norm gains 1.
    pub fn new<R: Rng + ?Sized>(config: MddtConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let ff = config.ffn_dim();
        let mut p = ParameterStore::new();
        let std = 0.02;
        let dense = |p: &mut ParameterStore<T>, name: &str, i: usize, o: usize, rng: &mut R| -> Result<()> {
            p.insert(format!("{name}.w"), Tensor::randn(&[i, o], std, rng), true)?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[o]), true)
        };
        let norm = |p: &mut ParameterStore<T>, name: &str| -> Result<()> {
            p.insert(format!("{name}.g"), Tensor::ones(&[d]), true)?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]), true)
        };
        dense(&mut p, "embed.state", config.state_dim, d, rng)?;
        dense(&mut p, "embed.rtg", 1, d, rng)?;
        dense(&mut p, "embed.reward", 1, d, rng)?;
        p.insert("embed.action", Tensor::randn(&[config.vocab(), d], std, rng), true)?;
        p.insert(
            "embed.timestep",
            Tensor::randn(&[config.max_episode_len, d], std, rng),
            true,
        )?;
        p.insert(
            "embed.slot",
            Tensor::randn(&[config.tokens_per_step(), d], std, rng),
            true,
        )?;
        norm(&mut p, "embed.ln")?;
        for l in 0..config.n_layers {
            norm(&mut p, &block_name(l, "ln1"))?;
            for proj in ["q", "k", "v", "o"] {
                dense(&mut p, &block_name(l, &format!("attn.{proj}")), d, d, rng)?;
            }
            norm(&mut p, &block_name(l, "ln2"))?;
            dense(&mut p, &block_name(l, "ffn.up"), d, ff, rng)?;
            dense(&mut p, &block_name(l, "ffn.down"), ff, d, rng)?;
        }
        norm(&mut p, "final.ln")?;
        dense(&mut p, "head", d, config.vocab(), rng)?;
        Ok(Mddt { config, params: p })
    }

    /// Parameters that belong to the transformer itself (not to any modulator).
    pub fn base_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with(MOD_PREFIX))
            .map(str::to_string)
            .collect()
    }

    pub fn num_base_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with(MOD_PREFIX))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Mddt<U> {
        Mddt {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_batch(&self, batch: &[ModelContext]) -> Result<()> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::invalid("empty context batch"));
        }
        for ctx in batch {
            if ctx.context_len != c.context_len
                || ctx.max_action_dim != c.max_action_dim
                || ctx.state_dim != c.state_dim
                || ctx.bins != c.action_bins
            {
                return Err(Error::ShapeMismatch {
                    op: "context vs config",
                    left: vec![ctx.context_len, ctx.max_action_dim, ctx.state_dim, ctx.bins],
                    right: vec![c.context_len, c.max_action_dim, c.state_dim, c.action_bins],
                });
            }
            if let Some(&t) = ctx.timesteps.iter().find(|&&t| t >= c.max_episode_len) {
                return Err(Error::invalid(format!(
                    "timestep {t} beyond the embedding table ({} entries)",
                    c.max_episode_len
                )));
            }
            if let Some(&a) = ctx.actions.iter().find(|&&a| a > c.action_bins) {
                return Err(Error::invalid(format!("action token {a} outside vocabulary")));
            }
        }
        Ok(())
    }

    /// Per-type token embeddings in sequence order, without positional terms.
    pub fn embed_tokens(&self, g: &mut Graph<T>, batch: &[ModelContext]) -> Result<Var> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (n, cl, a) = (batch.len(), c.context_len, c.max_action_dim);
        let bc = n * cl;
        let col = |f: &dyn Fn(&ModelContext) -> &[f32]| -> Vec<T> {
            batch
                .iter()
                .flat_map(|x| f(x).iter().map(|&v| T::lit(v as f64)))
                .collect()
        };
        let rtg = g.constant(Tensor::new(vec![bc, 1], col(&|x| &x.rtgs))?);
        let rew = g.constant(Tensor::new(vec![bc, 1], col(&|x| &x.rewards))?);
        let st = g.constant(Tensor::new(vec![bc, c.state_dim], col(&|x| &x.states))?);
        let ids: Vec<usize> = batch.iter().flat_map(|x| x.actions.iter().copied()).collect();

        let rtg = self.linear(g, rtg, "embed.rtg")?;
        let st = self.linear(g, st, "embed.state")?;
        let rew = self.linear(g, rew, "embed.reward")?;
        let table = g.param(&self.params, "embed.action")?;
        let act = g.gather_rows(table, &ids)?;
        let all = g.concat_rows(&[rtg, st, act, rew])?;

        let mut perm = Vec::with_capacity(n * c.seq_len());
        for i in 0..bc {
            perm.push(i);
            perm.push(bc + i);
            perm.extend((0..a).map(|s| 2 * bc + i * a + s));
            perm.push(2 * bc + bc * a + i);
        }
        g.gather_rows(all, &perm)
    }

    /// Timestep plus within-step slot embedding for every token.
    fn positional(&self, g: &mut Graph<T>, batch: &[ModelContext]) -> Result<Var> {
        let tps = self.config.tokens_per_step();
        let mut ts = Vec::with_capacity(batch.len() * self.config.seq_len());
        for ctx in batch {
            for &t in &ctx.timesteps {
                ts.extend(std::iter::repeat_n(t, tps));
            }
        }
        let slots: Vec<usize> = (0..ts.len()).map(|i| i % tps).collect();
        let tt = g.param(&self.params, "embed.timestep")?;
        let st = g.param(&self.params, "embed.slot")?;
        let a = g.gather_rows(tt, &ts)?;
        let b = g.gather_rows(st, &slots)?;
        g.add(a, b)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gain = g.param(&self.params, &format!("{name}.g"))?;
        let bias = g.param(&self.params, &format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn ia3(&self, g: &mut Graph<T>, x: Var, m: &Modulation, layer: usize, site: Ia3Site) -> Result<Var> {
        match &m.ia3 {
            Some(prefix) => {
                let s = g.param(&self.params, &ia3_name(prefix, layer, site))?;
                g.mul_row(x, s)
            }
            None => Ok(x),
        }
    }

    /// Adds `(input·A)·B` to `out` when `target` is LoRA-modulated.
    fn lora(
        &self,
        g: &mut Graph<T>,
        input: Var,
        out: Var,
        m: &Modulation,
        layer: usize,
        target: LoraTarget,
    ) -> Result<Var> {
        match &m.lora {
            Some(site) if site.targets.contains(&target) => {
                let (an, bn) = lora_names(&site.prefix, layer, target);
                let a = g.param(&self.params, &an)?;
                let b = g.param(&self.params, &bn)?;
                let xa = g.matmul(input, a)?;
                let delta = g.matmul(xa, b)?;
                g.add(out, delta)
            }
            _ => Ok(out),
        }
    }

    fn adapter(&self, g: &mut Graph<T>, x: Var, m: &Modulation, layer: usize, which: &str) -> Result<Var> {
        match &m.adapter {
            Some(prefix) => {
                let names = adapter_names(prefix, layer, which);
                let dw = g.param(&self.params, &names[0])?;
                let db = g.param(&self.params, &names[1])?;
                let uw = g.param(&self.params, &names[2])?;
                let ub = g.param(&self.params, &names[3])?;
                let h = g.linear(x, dw, db)?;
                let h = g.gelu(h);
                let h = g.linear(h, uw, ub)?;
                g.add(x, h)
            }
            None => Ok(x),
        }
    }

    /// Key/value prefixes for `layer` under prefix tuning or P-tuning v2.
    fn kv_prefix(&self, g: &mut Graph<T>, m: &Modulation, layer: usize) -> Result<Option<(Var, Var)>> {
        let Some(site) = &m.prompt else { return Ok(None) };
        let names = prompt_names(&site.prefix, site.mode, layer);
        match site.mode {
            PromptMode::Prompt => Ok(None),
            PromptMode::Prefix => {
                let k = g.param(&self.params, &names[0])?;
                let v = g.param(&self.params, &names[1])?;
                Ok(Some((k, v)))
            }
            PromptMode::PTuningV2 => {
                let h = g.param(&self.params, &names[0])?;
                let h = self.norm(g, h, &block_name(layer, "ln1"))?;
                let k = self.linear(g, h, &block_name(layer, "attn.k"))?;
                let v = self.linear(g, h, &block_name(layer, "attn.v"))?;
                Ok(Some((k, v)))
            }
        }
    }

    /// Forward pass over a batch under one modulation.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &[ModelContext],
        m: &Modulation,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let n = batch.len();
        let seq = c.seq_len();
        let tokens = self.embed_tokens(g, batch)?;
        let pos = self.positional(g, batch)?;
        let x = g.add(tokens, pos)?;
        let x = self.norm(g, x, "embed.ln")?;
        let mut x = Dropout::apply(&mut dropout, g, x);

        let mut prompt_len = 0;
        if let Some(site) = m.prompt.as_ref().filter(|s| s.mode == PromptMode::Prompt) {
            let names = prompt_names(&site.prefix, site.mode, 0);
            let p = g.param(&self.params, &names[0])?;
            prompt_len = g.value(p).rows();
            let mut parts = Vec::with_capacity(2 * n);
            for i in 0..n {
                parts.push(p);
                parts.push(g.slice_rows(x, i * seq, (i + 1) * seq)?);
            }
            x = g.concat_rows(&parts)?;
        }
        let rows = prompt_len + seq;
        let mut key_valid = Vec::with_capacity(n * rows);
        for ctx in batch {
            key_valid.extend(std::iter::repeat_n(true, prompt_len));
            for &v in &ctx.valid {
                key_valid.extend(std::iter::repeat_n(v, c.tokens_per_step()));
            }
        }

        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let h = self.norm(g, x, &block_name(l, "ln1"))?;
            let h = self.ia3(g, h, m, l, Ia3Site::Ln1)?;
            let mut qkv = [x; 3];
            for (slot, (proj, target, site)) in [
                ("attn.q", LoraTarget::AttnQuery, Ia3Site::Query),
                ("attn.k", LoraTarget::AttnKey, Ia3Site::Key),
                ("attn.v", LoraTarget::AttnValue, Ia3Site::Value),
            ]
            .into_iter()
            .enumerate()
            {
                let y = self.linear(g, h, &block_name(l, proj))?;
                let y = self.lora(g, h, y, m, l, target)?;
                qkv[slot] = self.ia3(g, y, m, l, site)?;
            }
            let prefix = self.kv_prefix(g, m, l)?;
            let spec = AttentionSpec {
                batch: n,
                seq: rows,
                heads: c.n_heads,
                key_valid: key_valid.clone(),
            };
            let att = g.attention(qkv[0], qkv[1], qkv[2], prefix, spec)?;
            let o = self.linear(g, att, &block_name(l, "attn.o"))?;
            let o = self.ia3(g, o, m, l, Ia3Site::AttnOut)?;
            let o = Dropout::apply(&mut dropout, g, o);
            let o = self.adapter(g, o, m, l, "attn")?;
            x = g.add(x, o)?;

            let h = self.norm(g, x, &block_name(l, "ln2"))?;
            let h = self.ia3(g, h, m, l, Ia3Site::Ln2)?;
            let f = self.linear(g, h, &block_name(l, "ffn.up"))?;
            let f = self.lora(g, h, f, m, l, LoraTarget::FfnActivation)?;
            let f = g.gelu(f);
            let f = self.ia3(g, f, m, l, Ia3Site::FfnHidden)?;
            let o = self.linear(g, f, &block_name(l, "ffn.down"))?;
            let o = self.ia3(g, o, m, l, Ia3Site::FfnOut)?;
            let o = Dropout::apply(&mut dropout, g, o);
            let o = self.adapter(g, o, m, l, "ffn")?;
            x = g.add(x, o)?;
            blocks.push(x);
        }
        let hidden = self.norm(g, x, "final.ln")?;
        Ok(ForwardOutput {
            tokens,
            blocks,
            hidden,
            batch: n,
            prompt_len,
            seq_len: seq,
        })
    }

    /// Head logits for chosen rows of `fwd.hidden`.
    pub fn logits_at(&self, g: &mut Graph<T>, fwd: &ForwardOutput, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(fwd.hidden, rows)?;
        self.linear(g, h, "head")
    }

    /// Predicting rows for every action slot of every item. With `only_scored`,
    /// rows whose target is masked out are dropped.
    pub fn action_rows(&self, fwd: &ForwardOutput, batch: &[ModelContext], only_scored: bool) -> ActionRows {
        let c = &self.config;
        let mut out = ActionRows {
            rows: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for (i, ctx) in batch.iter().enumerate() {
            let (targets, mask) = ctx.action_targets();
            for t in 0..c.context_len {
                for s in 0..c.max_action_dim {
                    let k = t * c.max_action_dim + s;
                    if only_scored && !mask[k] {
                        continue;
                    }
                    out.rows.push(fwd.row(i, c.predicting_position(t, s)));
                    out.targets.push(targets[k]);
                    out.mask.push(mask[k]);
                }
            }
        }
        out
    }

    /// Mean cross-entropy over real action tokens of the batch, plus the number of scored tokens.
    pub fn action_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[ModelContext],
        m: &Modulation,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Var, usize)> {
        let fwd = self.forward(g, batch, m, dropout)?;
        let rows = self.action_rows(&fwd, batch, true);
        if rows.rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let logits = self.logits_at(g, &fwd, &rows.rows)?;
        let loss = g.cross_entropy(logits, &rows.targets, &rows.mask)?;
        Ok((loss, rows.rows.len()))
    }

    /// Logits at every sequence position of a single context, `[seq_len, vocab]`.
    pub fn logits(&self, ctx: &ModelContext, m: &Modulation) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let batch = std::slice::from_ref(ctx);
        let fwd = self.forward(&mut g, batch, m, None)?;
        let rows: Vec<usize> = (0..fwd.seq_len).map(|p| fwd.row(0, p)).collect();
        let logits = self.logits_at(&mut g, &fwd, &rows)?;
        Ok(g.value(logits).clone())
    }
}

/// Mean cross-entropy of `logits` against `targets` over rows where `mask` holds.
pub fn action_loss_from_logits<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    let mut g = Graph::no_grad();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, mask)?;
    Ok(g.value(loss).item())
}

/// A context with random contents and a random number of left-padded steps;
/// used for probing forward passes.
pub fn random_context<R: Rng + ?Sized>(cfg: &MddtConfig, action_dim: usize, rng: &mut R) -> ModelContext {
    let mut ctx = ModelContext::empty(
        cfg.context_len,
        cfg.state_dim,
        cfg.max_action_dim,
        cfg.action_bins,
        action_dim,
    );
    let pad = rng.gen_range(0..cfg.context_len);
    let t0 = rng.gen_range(0..cfg.max_episode_len.saturating_sub(cfg.context_len).max(1));
    for c in pad..cfg.context_len {
        ctx.valid[c] = true;
        ctx.timesteps[c] = t0 + c - pad;
        ctx.rtgs[c] = rng.gen_range(0.0..10.0);
        ctx.rewards[c] = rng.gen_range(0.0..0.5);
        for s in &mut ctx.states[c * cfg.state_dim..(c + 1) * cfg.state_dim] {
            *s = rng.gen_range(-1.0..1.0);
        }
        for slot in 0..action_dim {
            ctx.set_action_token(c, slot, rng.gen_range(0..cfg.action_bins));
        }
    }
    ctx
}

#[cfg(test)]
mod tests;
