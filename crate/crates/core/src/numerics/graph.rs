//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op is evaluated eagerly when it is recorded; [`Graph::backward`]
//! walks the tape once in reverse. Leaves created from frozen parameters (or
//! constants) are marked as not needing gradients, and the backward pass
//! never allocates buffers for them or for anything that only depends on them.

use indexmap::IndexMap;
use rand::Rng;

use super::store::ParameterStore;
use super::tensor::{dot, gemm, MatView, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries, keys and values are `[batch * seq, heads * head_dim]`. A query at
/// position `i` sees every prefix slot, and sequence keys `j <= i` that are
/// valid (or `j == i`, so padded rows stay well defined).
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j <= i && (j == i || self.key_valid[b * self.seq + j])
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Cosine(Var, Var),
    WeightedSqDist {
        x: Var,
        anchor: Vec<T>,
        weight: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: T,
    by_name: IndexMap<String, Tensor<T>>,
    by_leaf: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.iter().find(|(x, _)| *x == v).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.by_name
    }

    /// Adds `other`'s named gradients into `self` (used to average minibatches).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

/// `tanh` through a single exponential; saturates cleanly for large `|u|`.
fn tanh_exp<T: Real>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

/// Returns `(gelu(x), tanh(u(x)))`; the second value feeds the backward pass.
fn gelu<T: Real>(x: T) -> (T, T) {
    let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
    let th = tanh_exp(u);
    (T::lit(0.5) * x * (T::one() + th), th)
}

fn gelu_grad<T: Real>(x: T, th: T) -> T {
    let half = T::lit(0.5);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no node will need gradients.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` that does not propagate gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap_or(&1);
        if sb.len() != 2 || sb[0] != k || sa.is_empty() {
            return Err(mismatch("matmul", sa, sb));
        }
        let n = sb[1];
        let m = self.value(a).rows();
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            MatView::dense(m, k),
            self.value(b).data(),
            MatView::dense(k, n),
            T::zero(),
            &mut out,
            MatView::dense(m, n),
        );
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o = *o + bb);
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x·w + b` for a weight `[in, out]` and bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Row-broadcast elementwise product of `x [.., n]` with `s [n]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(s) != [n] {
            return Err(mismatch("mul_row", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&sv).for_each(|(o, &k)| *o = *o * k);
        }
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::MulRow(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut tanh = Vec::with_capacity(out.numel());
        for v in out.data_mut() {
            let (y, th) = gelu(*v);
            *v = y;
            tanh.push(th);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu { x, tanh }, ng)
    }

    /// Layer normalisation over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let g = self.value(gain).data().to_vec();
        let bb = self.value(bias).data().to_vec();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let inv_n = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); rows * n];
        for (r, row) in xhat.chunks_mut(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rs;
                out[r * n + c] = *v * g[c] + bb[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Fused causal multi-head attention with optional shared key/value prefixes `[p, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(mismatch("attention", &sq, self.shape(k)));
        }
        let d = *sq.last().unwrap_or(&0);
        let (b, t, h) = (spec.batch, spec.seq, spec.heads);
        if d == 0 || !d.is_multiple_of(h) || self.value(q).rows() != b * t || spec.key_valid.len() != b * t {
            return Err(mismatch("attention", &sq, &[b, t, h]));
        }
        let p = match prefix {
            Some((pk, pv)) => {
                let s = self.shape(pk).to_vec();
                if s.len() != 2 || s[1] != d || self.shape(pv) != s.as_slice() {
                    return Err(mismatch("attention prefix", &s, &sq));
                }
                s[0]
            }
            None => 0,
        };
        let dh = d / h;
        let width = p + t;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let (pkd, pvd): (&[T], &[T]) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut probs = vec![T::zero(); b * h * t * width];
        let mut out = vec![T::zero(); b * t * d];
        let mut scores = vec![T::zero(); width];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..t {
                    let qi = &qd[(bi * t + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..width {
                        let s = if j < p {
                            dot(qi, &pkd[j * d + off..][..dh]) * scale
                        } else if spec.allowed(bi, i, j - p) {
                            dot(qi, &kd[(bi * t + j - p) * d + off..][..dh]) * scale
                        } else {
                            T::neg_infinity()
                        };
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = if s.is_finite() { (*s - max).exp() } else { T::zero() };
                        sum = sum + *s;
                    }
                    let prow = &mut probs[((bi * h + hi) * t + i) * width..][..width];
                    let orow = &mut out[(bi * t + i) * d + off..][..dh];
                    for j in 0..width {
                        let pj = scores[j] / sum;
                        prow[j] = pj;
                        if pj == T::zero() {
                            continue;
                        }
                        let vj = if j < p {
                            &pvd[j * d + off..][..dh]
                        } else {
                            &vd[(bi * t + j - p) * d + off..][..dh]
                        };
                        orow.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + pj * x);
                    }
                }
            }
        }
        let mut vars = vec![q, k, v];
        if let Some((pk, pv)) = prefix {
            vars.extend([pk, pv]);
        }
        let ng = self.ng(&vars);
        Ok(self.push(
            Tensor::new(sq, out)?,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                spec,
                probs,
            },
            ng,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let c = self.value(x).last_dim();
        let rows = self.value(x).rows();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Stacks row-views of tensors with equal trailing dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).last_dim(),
            None => return Err(Error::invalid("concat_rows: no inputs")),
        };
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != c {
                return Err(mismatch("concat_rows", &[c], self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean cross-entropy over rows with `mask[row] == true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        let src = self.value(logits).data();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(mismatch("cross_entropy target", &[targets[r]], &[v]));
            }
            let prow = &mut probs[r * v..(r + 1) * v];
            prow.copy_from_slice(&src[r * v..(r + 1) * v]);
            let max = prow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = prow.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total = total + lse - prow[targets[r]];
            prow.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = total / T::lit(count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(o, &m)| *o = *o * m);
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Cosine similarity between two equally shaped tensors (flattened).
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(mismatch("cosine", self.shape(a), self.shape(b)));
        }
        let c = super::tensor::cosine(self.value(a).data(), self.value(b).data());
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), ng))
    }

    /// `Σ weight · (x − anchor)²` with constant anchor and weights.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &[T], weight: &[T]) -> Result<Var> {
        let n = self.value(x).numel();
        if anchor.len() != n || weight.len() != n {
            return Err(mismatch(
                "weighted_sq_dist",
                self.shape(x),
                &[anchor.len(), weight.len()],
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(anchor)
            .zip(weight)
            .map(|((&x, &a), &w)| w * (x - a) * (x - a))
            .sum();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqDist {
                x,
                anchor: anchor.to_vec(),
                weight: weight.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss. Every leaf that needs a gradient gets
    /// one (zero-filled when no path reaches it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let loss_value = lv.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let mut by_name = IndexMap::new();
        for (name, &v) in &self.params {
            if self.nodes[v.0].needs_grad {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
                by_name.insert(name.clone(), Tensor::new(self.shape(v).to_vec(), g)?);
            }
        }
        let mut by_leaf = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && !self.params.values().any(|v| v.0 == i) {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                by_leaf.push((Var(i), Tensor::new(node.value.shape().to_vec(), g)?));
            }
        }
        for (name, g) in &by_name {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(Gradients {
            loss: loss_value,
            by_name,
            by_leaf,
        })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(b) = self.buf(grads, v) {
            b.iter_mut().enumerate().for_each(|(i, x)| *x = *x + f(i));
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                if let Some(da) = self.buf(grads, *a) {
                    gemm(
                        g,
                        MatView::dense(m, n),
                        bv.data(),
                        MatView::dense(k, n).t(),
                        T::one(),
                        da,
                        MatView::dense(m, k),
                    );
                }
                if let Some(db) = self.buf(grads, *b) {
                    gemm(
                        av.data(),
                        MatView::dense(m, k).t(),
                        g,
                        MatView::dense(m, n),
                        T::one(),
                        db,
                        MatView::dense(k, n),
                    );
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |j| g[j]);
                let n = self.value(*bias).numel();
                if let Some(db) = self.buf(grads, *bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |j| g[j] * bv[j]);
                self.acc(grads, *b, |j| g[j] * av[j]);
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let n = sv.len();
                self.acc(grads, *x, |j| g[j] * sv[j % n]);
                if let Some(ds) = self.buf(grads, *s) {
                    for (gr, xr) in g.chunks(n).zip(xv.chunks(n)) {
                        for c in 0..n {
                            ds[c] = ds[c] + gr[c] * xr[c];
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, |j| g[j] * *c),
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |j| g[j] * gelu_grad(xv[j], tanh[j]));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let inv_n = T::one() / T::lit(n as f64);
                if let Some(dx) = self.buf(grads, *x) {
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            let dxh = gr[c] * gv[c];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xr[c];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for c in 0..n {
                            let dxh = gr[c] * gv[c];
                            dx[r * n + c] = dx[r * n + c] + rstd[r] * (dxh - m1 - xr[c] * m2);
                        }
                    }
                }
                if let Some(dg) = self.buf(grads, *gain) {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] = dg[c] + gr[c] * xr[c];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *bias) {
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let s = dot(gr, yr);
                        for c in 0..n {
                            dr[c] = dr[c] + yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                prefix,
                spec,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *prefix, spec, probs, grads),
            Op::GatherRows { x, idx } => {
                let c = out.last_dim();
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        dx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |j| g[off + j]);
                    off += n;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |j| g[j]),
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                self.acc(grads, *x, |_| g[0] / n);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(*count as f64);
                if let Some(dl) = self.buf(grads, *logits) {
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        for c in 0..v {
                            let mut d = probs[r * v + c];
                            if c == targets[r] {
                                d = d - T::one();
                            }
                            dl[r * v + c] = dl[r * v + c] + d * scale;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, |j| g[j] * mask[j]),
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let na = dot(av, av).sqrt();
                let nb = dot(bv, bv).sqrt();
                if na == T::zero() || nb == T::zero() {
                    return;
                }
                let c = out.item();
                self.acc(grads, *a, |j| g[0] * (bv[j] / (na * nb) - c * av[j] / (na * na)));
                self.acc(grads, *b, |j| g[0] * (av[j] / (na * nb) - c * bv[j] / (nb * nb)));
            }
            Op::WeightedSqDist { x, anchor, weight } => {
                let xv = self.value(*x).data();
                let two = T::lit(2.0);
                self.acc(grads, *x, |j| g[0] * two * weight[j] * (xv[j] - anchor[j]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        spec: &AttentionSpec,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.value(q).last_dim();
        let (b, t, h) = (spec.batch, spec.seq, spec.heads);
        let dh = d / h;
        let p = prefix.map_or(0, |(pk, _)| self.value(pk).rows());
        let width = p + t;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (pkd, pvd): (&[T], &[T]) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dpk = vec![T::zero(); pkd.len()];
        let mut dpv = vec![T::zero(); pvd.len()];
        let mut ds = vec![T::zero(); width];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..t {
                    let prow = &probs[((bi * h + hi) * t + i) * width..][..width];
                    let go = &g[(bi * t + i) * d + off..][..dh];
                    let mut s = T::zero();
                    for j in 0..width {
                        if prow[j] == T::zero() {
                            ds[j] = T::zero();
                            continue;
                        }
                        let vj = if j < p {
                            &pvd[j * d + off..][..dh]
                        } else {
                            &vd[(bi * t + j - p) * d + off..][..dh]
                        };
                        let dp = dot(go, vj);
                        ds[j] = dp;
                        s = s + prow[j] * dp;
                    }
                    let qrow = (bi * t + i) * d + off;
                    let qi = &qd[qrow..qrow + dh];
                    let dqi = &mut dq[qrow..qrow + dh];
                    for j in 0..width {
                        let pj = prow[j];
                        if pj == T::zero() {
                            continue;
                        }
                        let dsj = pj * (ds[j] - s) * scale;
                        let (kslice, dkslice, dvslice) = if j < p {
                            let o = j * d + off;
                            (&pkd[o..o + dh], &mut dpk[o..o + dh], &mut dpv[o..o + dh])
                        } else {
                            let o = (bi * t + j - p) * d + off;
                            (&kd[o..o + dh], &mut dk[o..o + dh], &mut dv[o..o + dh])
                        };
                        for ((((dqc, &kc), dkc), dvc), (&qc, &gc)) in dqi
                            .iter_mut()
                            .zip(kslice)
                            .zip(dkslice.iter_mut())
                            .zip(dvslice.iter_mut())
                            .zip(qi.iter().zip(go))
                        {
                            *dqc = *dqc + dsj * kc;
                            *dkc = *dkc + dsj * qc;
                            *dvc = *dvc + pj * gc;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |j| dq[j]);
        self.acc(grads, k, |j| dk[j]);
        self.acc(grads, v, |j| dv[j]);
        if let Some((pk, pv)) = prefix {
            self.acc(grads, pk, |j| dpk[j]);
            self.acc(grads, pv, |j| dpv[j]);
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / sum);
}
