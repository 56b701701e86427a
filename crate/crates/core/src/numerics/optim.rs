//! AdamW with global-norm clipping, and the warmup-cosine learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::store::ParameterStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound applied across all trainable gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(0.25),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Optimizer state. Moments are created lazily the first time a parameter
/// receives a gradient; bias correction uses that parameter's own step count.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `store`.
    ///
    /// Weight decay is decoupled (applied to the parameter, not folded into the
    /// gradient) and only touches parameters with two or more dimensions.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &Gradients<T>, lr: f64) -> Result<StepStats> {
        let trainable = store.trainable_names();
        let missing: Vec<String> = trainable.iter().filter(|n| grads.get(n).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradient(missing));
        }
        for name in &trainable {
            let (g, p) = (grads.get(name).unwrap(), store.get(name)?);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let sq: f64 = trainable
            .iter()
            .map(|n| grads.get(n).unwrap().sq_norm().to_f64_lossy())
            .sum();
        let norm = sq.sqrt();
        let clip_scale = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let cs = T::lit(clip_scale);
        let lr_t = T::lit(lr);
        let eps = T::lit(self.config.eps);
        let decay = T::lit(1.0 - lr * self.config.weight_decay);
        for name in &trainable {
            let g = grads.get(name).unwrap().data();
            let param = store.get_mut(name)?;
            let decays = param.shape().len() >= 2 && self.config.weight_decay != 0.0;
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                steps: 0,
            });
            mom.steps += 1;
            let bc1 = T::lit(1.0 - b1.powi(mom.steps as i32));
            let bc2 = T::lit(1.0 - b2.powi(mom.steps as i32));
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = g[j] * cs;
                mom.m[j] = tb1 * mom.m[j] + (T::one() - tb1) * gj;
                mom.v[j] = tb2 * mom.v[j] + (T::one() - tb2) * gj * gj;
                if decays {
                    *p = *p * decay;
                }
                let mhat = mom.m[j] / bc1;
                let vhat = mom.v[j] / bc2;
                *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale,
        })
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `floor` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub peak: f64,
    pub floor: f64,
    pub warmup: u64,
    pub total: u64,
}

impl WarmupCosine {
    pub fn constant(lr: f64) -> Self {
        WarmupCosine {
            peak: lr,
            floor: lr,
            warmup: 0,
            total: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            // no decay phase configured: hold the peak
            return if self.total <= self.warmup {
                self.peak
            } else {
                self.floor
            };
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
