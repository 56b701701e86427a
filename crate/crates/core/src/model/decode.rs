//! Greedy autoregressive action decoding and return-conditioned rollouts.

use crate::envsdata::{Env, TaskSpec};
use crate::error::{Error, Result};
use crate::modulators::Modulation;
use crate::numerics::{Graph, Real};
use crate::trajectory::{ActionTokenizer, ModelContext, UnifiedStateLayout};

use super::Mddt;

/// Chooses one modulation per context.
pub type Router<'a, T> = dyn FnMut(&Mddt<T>, &[ModelContext]) -> Result<Vec<Modulation>> + 'a;

/// Argmax over the first `bins` entries; the PAD id is never chosen.
pub fn masked_argmax<T: Real>(row: &[T], bins: usize) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().take(bins) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fills the first `action_dim` action slots of each context's last timestep,
/// one slot at a time. Contexts sharing a modulation are decoded together.
pub fn decode_actions<T: Real>(
    model: &Mddt<T>,
    ctxs: &mut [ModelContext],
    mods: &[Modulation],
    action_dim: usize,
) -> Result<Vec<Vec<usize>>> {
    let cfg = &model.config;
    if action_dim == 0 || action_dim > cfg.max_action_dim {
        return Err(Error::invalid(format!(
            "action dim {action_dim} outside 1..={}",
            cfg.max_action_dim
        )));
    }
    if mods.len() != ctxs.len() {
        return Err(Error::invalid("one modulation per context required"));
    }
    let mut groups: Vec<(&Modulation, Vec<usize>)> = Vec::new();
    for (i, m) in mods.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == m) {
            Some((_, members)) => members.push(i),
            None => groups.push((m, vec![i])),
        }
    }
    let last = cfg.context_len - 1;
    for slot in 0..action_dim {
        for (m, members) in &groups {
            let batch: Vec<ModelContext> = members.iter().map(|&i| ctxs[i].clone()).collect();
            let mut g = Graph::no_grad();
            let fwd = model.forward(&mut g, &batch, m, None)?;
            let rows: Vec<usize> = (0..batch.len())
                .map(|b| fwd.row(b, cfg.predicting_position(last, slot)))
                .collect();
            let logits = model.logits_at(&mut g, &fwd, &rows)?;
            let lv = g.value(logits);
            for (b, &i) in members.iter().enumerate() {
                let id = masked_argmax(lv.row(b), cfg.action_bins);
                ctxs[i].set_action_token(last, slot, id);
            }
        }
    }
    Ok(ctxs
        .iter()
        .map(|c| c.action_tokens(last)[..action_dim].to_vec())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub rtg: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_return: f32,
    pub success: bool,
    pub steps: Vec<StepLog>,
}

/// Runs one episode per seed in lock-step. The running return-to-go starts at
/// `target_return` and is decremented by each reward before scaling.
/// `route` picks the modulation for every context at every step.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_episodes<T: Real>(
    model: &Mddt<T>,
    spec: &TaskSpec,
    layout: &UnifiedStateLayout,
    tokenizer: &ActionTokenizer,
    target_return: f32,
    seeds: &[u64],
    route: &mut Router<'_, T>,
) -> Result<Vec<EpisodeResult>> {
    let cfg = &model.config;
    if spec.horizon > cfg.max_episode_len {
        return Err(Error::config(format!(
            "task horizon {} exceeds the timestep table ({})",
            spec.horizon, cfg.max_episode_len
        )));
    }
    let scale = spec.reward_scale();
    let n = seeds.len();
    let mut envs = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for &s in seeds {
        let (env, st) = Env::reset(spec, s);
        envs.push(env);
        states.push(st);
    }
    let mut ctxs: Vec<ModelContext> = (0..n)
        .map(|_| {
            ModelContext::empty(
                cfg.context_len,
                cfg.state_dim,
                cfg.max_action_dim,
                cfg.action_bins,
                spec.dim,
            )
        })
        .collect();
    let mut rtg = vec![target_return; n];
    let mut results: Vec<EpisodeResult> = (0..n)
        .map(|_| EpisodeResult {
            episode_return: 0.0,
            success: false,
            steps: Vec::with_capacity(spec.horizon),
        })
        .collect();
    let last = cfg.context_len - 1;
    for t in 0..spec.horizon {
        for i in 0..n {
            let padded = layout.pad_state(&states[i], &spec.task_id)?;
            ctxs[i].push_step(&padded, rtg[i] / scale, t);
        }
        let mods = route(model, &ctxs)?;
        let ids = decode_actions(model, &mut ctxs, &mods, spec.dim)?;
        for i in 0..n {
            let action: Vec<f32> = ids[i].iter().map(|&id| tokenizer.detokenize(id)).collect();
            let out = envs[i].step(&action)?;
            ctxs[i].set_reward(last, out.reward / scale);
            results[i].steps.push(StepLog {
                state: std::mem::replace(&mut states[i], out.state),
                action,
                reward: out.reward,
                rtg: rtg[i],
            });
            results[i].episode_return += out.reward;
            rtg[i] -= out.reward;
        }
    }
    for (r, env) in results.iter_mut().zip(&envs) {
        r.success = env.success();
    }
    Ok(results)
}
