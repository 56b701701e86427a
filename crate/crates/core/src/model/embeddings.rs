//! Mean-pooled hidden representations per task, for external clustering.

use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modulators::Modulation;
use crate::numerics::{Graph, Real};
use crate::trajectory::ModelContext;

use super::{Mddt, TokenType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    /// Per-type token embeddings.
    Embed,
    /// Residual stream after block `k` (0-based).
    Block(usize),
}

impl FromStr for LayerSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embed" {
            return Ok(LayerSel::Embed);
        }
        s.strip_prefix("block-")
            .and_then(|k| k.parse().ok())
            .map(LayerSel::Block)
            .ok_or_else(|| Error::config(format!("unknown layer `{s}` (expected embed or block-<k>)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub task_id: String,
    pub vector: Vec<f64>,
}

/// One row per context: the chosen layer's representation averaged over every
/// token of `token_type` in real timesteps.
pub fn export_embeddings<T: Real>(
    model: &Mddt<T>,
    sequences: &[(String, Vec<ModelContext>)],
    layer: LayerSel,
    token_type: TokenType,
) -> Result<Vec<EmbeddingRow>> {
    let cfg = &model.config;
    if let LayerSel::Block(k) = layer {
        if k >= cfg.n_layers {
            return Err(Error::config(format!("block {k} outside 0..{}", cfg.n_layers)));
        }
    }
    let mut rows = Vec::new();
    for (task_id, ctxs) in sequences {
        for chunk in ctxs.chunks(64) {
            let mut g = Graph::no_grad();
            let (h, per_item, offset) = match layer {
                LayerSel::Embed => (model.embed_tokens(&mut g, chunk)?, cfg.seq_len(), 0),
                LayerSel::Block(k) => {
                    let fwd = model.forward(&mut g, chunk, &Modulation::none(), None)?;
                    (fwd.blocks[k], fwd.rows_per_item(), fwd.prompt_len)
                }
            };
            let hv = g.value(h);
            for (i, ctx) in chunk.iter().enumerate() {
                let slots = if token_type == TokenType::Action {
                    ctx.action_dim
                } else {
                    1
                };
                let mut acc = vec![0.0f64; cfg.embed_dim];
                let mut n = 0usize;
                for c in (0..cfg.context_len).filter(|&c| ctx.valid[c]) {
                    for s in 0..slots {
                        let row = hv.row(i * per_item + offset + cfg.position(c, token_type, s));
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v.to_f64_lossy());
                        n += 1;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
                rows.push(EmbeddingRow {
                    task_id: task_id.clone(),
                    vector: acc,
                });
            }
        }
    }
    Ok(rows)
}

/// `task_id,e0,e1,...` with a header line.
pub fn write_embeddings_csv<W: Write>(out: &mut W, rows: &[EmbeddingRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let header: Vec<String> = std::iter::once("task_id".to_string())
        .chain((0..d).map(|i| format!("e{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.vector.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{},{}", r.task_id, vals.join(","))?;
    }
    Ok(())
}
