//! Episodes, returns-to-go, action tokenisation and context-window assembly.

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Suffix sums of `rewards`, accumulated right to left.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// One episode. States are task-local (not yet padded to the unified layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub rtgs: Vec<f32>,
}

impl Trajectory {
    pub fn new(
        task_id: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
    ) -> Result<Self> {
        let len = rewards.len();
        if len == 0 || states.len() != len * state_dim || actions.len() != len * action_dim {
            return Err(Error::invalid(format!(
                "trajectory arrays disagree: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                len
            )));
        }
        if let Some(a) = actions.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("action {a} outside [-1, 1]")));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rewards".into()));
        }
        let rtgs = compute_rtg(&rewards);
        Ok(Trajectory {
            task_id: task_id.into(),
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            rtgs,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn total_return(&self) -> f32 {
        self.rtgs.first().copied().unwrap_or(0.0)
    }
}

/// Min-max discretisation of actions in `[-1, 1]` into uniform bins.
#[derive(Debug)]
pub struct ActionTokenizer {
    bins: usize,
    clamped: AtomicU64,
}

impl Clone for ActionTokenizer {
    fn clone(&self) -> Self {
        ActionTokenizer {
            bins: self.bins,
            clamped: AtomicU64::new(self.clamped()),
        }
    }
}

impl ActionTokenizer {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config(format!("need at least 2 action bins, got {bins}")));
        }
        Ok(ActionTokenizer {
            bins,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Reserved id for action slots beyond a task's action dimension.
    pub fn pad_token(&self) -> usize {
        self.bins
    }

    /// Number of out-of-range inputs clamped so far.
    pub fn clamped(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn tokenize(&self, a: f32) -> usize {
        let a = if a.is_nan() {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            0.0
        } else if !(-1.0..=1.0).contains(&a) {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            a.clamp(-1.0, 1.0)
        } else {
            a
        };
        let idx = (((a as f64) + 1.0) / 2.0 * self.bins as f64).floor() as usize;
        idx.min(self.bins - 1)
    }

    /// Bin centre for a valid token id.
    pub fn detokenize(&self, id: usize) -> f32 {
        let id = id.min(self.bins - 1);
        (-1.0 + (id as f64 + 0.5) * (2.0 / self.bins as f64)) as f32
    }
}

/// Mapping of every task's local state dimensions into one shared state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedStateLayout {
    total_dim: usize,
    mappings: IndexMap<String, Vec<usize>>,
}

impl UnifiedStateLayout {
    pub fn new(total_dim: usize) -> Self {
        UnifiedStateLayout {
            total_dim,
            mappings: IndexMap::new(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn register(&mut self, task_id: impl Into<String>, indices: Vec<usize>) -> Result<()> {
        let task_id = task_id.into();
        let mut seen = vec![false; self.total_dim];
        for &i in &indices {
            if i >= self.total_dim || std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!(
                    "layout for `{task_id}` is not an injective map into {} dims",
                    self.total_dim
                )));
            }
        }
        self.mappings.insert(task_id, indices);
        Ok(())
    }

    pub fn mapping(&self, task_id: &str) -> Result<&[usize]> {
        self.mappings
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.mappings.keys().map(String::as_str)
    }

    pub fn pad_state_into(&self, s: &[f32], task_id: &str, out: &mut [f32]) -> Result<()> {
        let map = self.mapping(task_id)?;
        if s.len() != map.len() || out.len() != self.total_dim {
            return Err(Error::ShapeMismatch {
                op: "pad_state",
                left: vec![s.len()],
                right: vec![map.len()],
            });
        }
        out.iter_mut().for_each(|x| *x = 0.0);
        for (&v, &dst) in s.iter().zip(map) {
            out[dst] = v;
        }
        Ok(())
    }

    pub fn pad_state(&self, s: &[f32], task_id: &str) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.total_dim];
        self.pad_state_into(s, task_id, &mut out)?;
        Ok(out)
    }
}

/// Per-domain divisors that bring returns-to-go roughly into `[0, 10]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardScales {
    scales: IndexMap<String, f32>,
}

impl RewardScales {
    pub fn new(entries: &[(&str, f32)]) -> Self {
        RewardScales {
            scales: entries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Scales used for the two benchmark families the model was designed around.
    pub fn benchmark() -> Self {
        Self::new(&[("metaworld", 200.0), ("dmcontrol", 100.0)])
    }

    pub fn get(&self, domain: &str) -> Result<f32> {
        self.scales
            .get(domain)
            .copied()
            .ok_or_else(|| Error::config(format!("no reward scale registered for domain `{domain}`")))
    }

    pub fn scale_returns(&self, rtg: f32, reward: f32, domain: &str) -> Result<(f32, f32)> {
        let s = self.get(domain)?;
        Ok((rtg / s, reward / s))
    }
}

/// Tokenised sliding window of `context_len` timesteps ending at the current step.
///
/// Within a timestep the token order is RTG, state, action slots `0..max_action_dim`,
/// reward. Left-padded timesteps carry `valid == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContext {
    pub context_len: usize,
    pub state_dim: usize,
    pub max_action_dim: usize,
    pub bins: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub rtgs: Vec<f32>,
    pub rewards: Vec<f32>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl ModelContext {
    /// An all-padding context, filled in as an episode unrolls.
    pub fn empty(context_len: usize, state_dim: usize, max_action_dim: usize, bins: usize, action_dim: usize) -> Self {
        ModelContext {
            context_len,
            state_dim,
            max_action_dim,
            bins,
            action_dim,
            states: vec![0.0; context_len * state_dim],
            rtgs: vec![0.0; context_len],
            rewards: vec![0.0; context_len],
            actions: vec![bins; context_len * max_action_dim],
            timesteps: vec![0; context_len],
            valid: vec![false; context_len],
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        self.max_action_dim + 3
    }

    pub fn num_tokens(&self) -> usize {
        self.context_len * self.tokens_per_step()
    }

    pub fn pad_token(&self) -> usize {
        self.bins
    }

    pub fn state(&self, c: usize) -> &[f32] {
        &self.states[c * self.state_dim..(c + 1) * self.state_dim]
    }

    pub fn action_tokens(&self, c: usize) -> &[usize] {
        &self.actions[c * self.max_action_dim..(c + 1) * self.max_action_dim]
    }

    /// Drops the oldest timestep and appends a fresh one (actions pending).
    pub fn push_step(&mut self, state: &[f32], rtg: f32, timestep: usize) {
        let (c, s, a) = (self.context_len, self.state_dim, self.max_action_dim);
        self.states.copy_within(s.., 0);
        self.states[(c - 1) * s..].copy_from_slice(state);
        self.rtgs.copy_within(1.., 0);
        self.rtgs[c - 1] = rtg;
        self.rewards.copy_within(1.., 0);
        self.rewards[c - 1] = 0.0;
        self.actions.copy_within(a.., 0);
        self.actions[(c - 1) * a..].iter_mut().for_each(|x| *x = self.bins);
        self.timesteps.copy_within(1.., 0);
        self.timesteps[c - 1] = timestep;
        self.valid.copy_within(1.., 0);
        self.valid[c - 1] = true;
    }

    /// Index of the most recent timestep.
    pub fn last(&self) -> usize {
        self.context_len - 1
    }

    pub fn set_action_token(&mut self, c: usize, slot: usize, id: usize) {
        self.actions[c * self.max_action_dim + slot] = id;
    }

    pub fn set_reward(&mut self, c: usize, reward: f32) {
        self.rewards[c] = reward;
    }

    /// Targets and loss mask for every action slot, in (timestep, slot) order.
    /// Padding timesteps and PAD action slots are masked out.
    pub fn action_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let mut targets = Vec::with_capacity(self.context_len * self.max_action_dim);
        let mut mask = Vec::with_capacity(targets.capacity());
        for c in 0..self.context_len {
            for &id in self.action_tokens(c) {
                targets.push(id);
                mask.push(self.valid[c] && id != self.bins);
            }
        }
        (targets, mask)
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Shape parameters for building contexts from trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextShape {
    pub context_len: usize,
    pub max_action_dim: usize,
}

/// Window over timesteps `max(0, t+1-C)..=t`. Never reads past `t`.
pub fn make_context(
    traj: &Trajectory,
    t: usize,
    shape: ContextShape,
    layout: &UnifiedStateLayout,
    tokenizer: &ActionTokenizer,
    reward_scale: f32,
) -> Result<ModelContext> {
    if t >= traj.len() {
        return Err(Error::invalid(format!(
            "timestep {t} outside episode of length {}",
            traj.len()
        )));
    }
    if traj.action_dim > shape.max_action_dim {
        return Err(Error::config(format!(
            "task action dim {} exceeds max action dim {}",
            traj.action_dim, shape.max_action_dim
        )));
    }
    let c_len = shape.context_len;
    let mut ctx = ModelContext::empty(
        c_len,
        layout.total_dim(),
        shape.max_action_dim,
        tokenizer.bins(),
        traj.action_dim,
    );
    let start = (t + 1).saturating_sub(c_len);
    let pad = c_len - (t + 1 - start);
    let sd = layout.total_dim();
    for (c, step) in (pad..c_len).zip(start..=t) {
        layout.pad_state_into(traj.state(step), &traj.task_id, &mut ctx.states[c * sd..(c + 1) * sd])?;
        ctx.rtgs[c] = traj.rtgs[step] / reward_scale;
        ctx.rewards[c] = traj.rewards[step] / reward_scale;
        for (slot, &a) in traj.action(step).iter().enumerate() {
            ctx.actions[c * shape.max_action_dim + slot] = tokenizer.tokenize(a);
        }
        ctx.timesteps[c] = step;
        ctx.valid[c] = true;
    }
    Ok(ctx)
}
