//! Quadratic anchoring to earlier solutions: diagonal-Fisher EWC and plain L2.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{Dropout, Mddt};
use crate::modulators::Modulation;
use crate::numerics::{Gradients, Graph, ParameterStore, Real, Var};
use crate::trajectory::ModelContext;

/// Snapshot `θ*` with per-element importance `F` and strength `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAnchor<T> {
    pub theta: IndexMap<String, Vec<T>>,
    pub fisher: IndexMap<String, Vec<T>>,
    pub lambda: f64,
}

impl<T: Real> FisherAnchor<T> {
    /// Anchors the named parameters with the given diagonal Fisher.
    pub fn new(store: &ParameterStore<T>, fisher: IndexMap<String, Vec<T>>, lambda: f64) -> Result<Self> {
        let mut theta = IndexMap::new();
        for (name, f) in &fisher {
            let p = store.get(name)?;
            if p.numel() != f.len() {
                return Err(Error::ShapeMismatch {
                    op: "fisher anchor",
                    left: p.shape().to_vec(),
                    right: vec![f.len()],
                });
            }
            if f.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "Fisher for `{name}` has negative or non-finite entries"
                )));
            }
            theta.insert(name.clone(), p.data().to_vec());
        }
        Ok(FisherAnchor { theta, fisher, lambda })
    }

    /// Unit importance on every listed parameter.
    pub fn l2(store: &ParameterStore<T>, names: &[String], lambda: f64) -> Result<Self> {
        let mut fisher = IndexMap::new();
        for n in names {
            fisher.insert(n.clone(), vec![T::one(); store.get(n)?.numel()]);
        }
        Self::new(store, fisher, lambda)
    }

    /// `(λ/2)·Σ F (θ − θ*)²` evaluated directly.
    pub fn penalty_value(&self, store: &ParameterStore<T>) -> Result<f64> {
        let mut total = 0.0;
        for (name, anchor) in &self.theta {
            let p = store.get(name)?.data();
            let f = &self.fisher[name];
            total += p
                .iter()
                .zip(anchor)
                .zip(f)
                .map(|((&x, &a), &w)| (w * (x - a) * (x - a)).to_f64_lossy())
                .sum::<f64>();
        }
        Ok(0.5 * self.lambda * total)
    }

    /// Graph node for the penalty, reading parameters through `g`.
    pub fn penalty(&self, g: &mut Graph<T>, store: &ParameterStore<T>) -> Result<Option<Var>> {
        let mut terms = Vec::new();
        for (name, anchor) in &self.theta {
            let p = g.param(store, name)?;
            terms.push(g.weighted_sq_dist(p, anchor, &self.fisher[name])?);
        }
        let Some(&first) = terms.first() else { return Ok(None) };
        let mut acc = first;
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(Some(g.scale(acc, T::lit(0.5 * self.lambda))))
    }
}

/// Free-function form of [`FisherAnchor::penalty_value`].
pub fn ewc_penalty<T: Real>(store: &ParameterStore<T>, anchor: &FisherAnchor<T>) -> Result<f64> {
    anchor.penalty_value(store)
}

/// `(λ/2)·Σ (θ − θ*)²` over the anchored names.
pub fn l2_penalty<T: Real>(
    store: &ParameterStore<T>,
    theta_star: &IndexMap<String, Vec<T>>,
    lambda: f64,
) -> Result<f64> {
    let fisher = theta_star
        .iter()
        .map(|(n, v)| (n.clone(), vec![T::one(); v.len()]))
        .collect();
    let anchor = FisherAnchor {
        theta: theta_star.clone(),
        fisher,
        lambda,
    };
    anchor.penalty_value(store)
}

/// Sum of every anchor's penalty node, or `None` without anchors.
pub fn total_penalty<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    anchors: &[FisherAnchor<T>],
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for a in anchors {
        if let Some(p) = a.penalty(g, store)? {
            acc = Some(match acc {
                Some(x) => g.add(x, p)?,
                None => p,
            });
        }
    }
    Ok(acc)
}

/// Mean of squared gradients over `n_samples` draws from `sample`.
pub fn fisher_diag<T: Real>(
    n_samples: usize,
    mut sample: impl FnMut(usize) -> Result<Gradients<T>>,
) -> Result<IndexMap<String, Vec<T>>> {
    if n_samples == 0 {
        return Err(Error::invalid("Fisher estimate needs at least one sample"));
    }
    let mut acc: IndexMap<String, Vec<T>> = IndexMap::new();
    for i in 0..n_samples {
        let grads = sample(i)?;
        for (name, g) in grads.iter() {
            let slot = acc
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            slot.iter_mut().zip(g.data()).for_each(|(a, &v)| *a = *a + v * v);
        }
    }
    let inv = T::lit(1.0 / n_samples as f64);
    acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x = *x * inv));
    Ok(acc)
}

/// Fisher of the action loss over the given minibatches (dropout off).
pub fn model_fisher<T: Real>(
    model: &Mddt<T>,
    batches: &[Vec<ModelContext>],
    m: &Modulation,
) -> Result<IndexMap<String, Vec<T>>> {
    fisher_diag(batches.len(), |i| {
        let mut g = Graph::new();
        let (loss, _) = model.action_loss(&mut g, &batches[i], m, None::<Dropout<'_>>)?;
        g.backward(loss)
    })
}
