use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};

use crate::ops::{all_finite, lit, softmax_rows, softmax_rows_backward, Linear, Real};
use crate::params::{join, Tensors};
use crate::{Error, Result};

/// Multi-head scaled dot-product attention projections. Keys carry no bias:
/// a key bias only shifts every logit of a row by the same amount.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn zeros(query_dim: usize, memory_dim: usize, c_dim: usize) -> Self {
        AttentionParams {
            query: Linear::zeros(query_dim, c_dim, true),
            key: Linear::zeros(memory_dim, c_dim, false),
            value: Linear::zeros(memory_dim, c_dim, true),
            output: Linear::zeros(c_dim, c_dim, true),
        }
    }

    pub fn c_dim(&self) -> usize {
        self.query.out_dim()
    }

    pub fn cast<U: Real>(&self) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
        }
    }
}

impl<T: Real> Tensors<T> for AttentionParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    query_in: Array2<T>,
    memory_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per-head `(N, M)` softmax matrices.
    probs: Vec<Array2<T>>,
    heads: Array2<T>,
}

impl<T: Real> AttentionCache<T> {
    /// Head-averaged attention weights; rows still sum to one.
    pub fn mean_weights(&self) -> Array2<T> {
        let mut acc = Array2::zeros(self.probs[0].raw_dim());
        for p in &self.probs {
            acc += p;
        }
        acc / lit::<T>(self.probs.len() as f64)
    }

    pub fn head_weights(&self) -> &[Array2<T>] {
        &self.probs
    }
}

pub fn attention_forward<T: Real>(
    p: &AttentionParams<T>,
    query_in: ArrayView2<T>,
    memory_in: ArrayView2<T>,
    num_heads: usize,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    if memory_in.nrows() == 0 {
        return Err(Error::InvalidInput("attention over zero keys".into()));
    }
    if query_in.ncols() != p.query.in_dim() {
        return Err(Error::shape("attention query", p.query.in_dim(), query_in.ncols()));
    }
    if memory_in.ncols() != p.key.in_dim() {
        return Err(Error::shape("attention memory", p.key.in_dim(), memory_in.ncols()));
    }
    let c = p.c_dim();
    if num_heads == 0 || !c.is_multiple_of(num_heads) {
        return Err(Error::shape("attention heads", format!("divisor of {c}"), num_heads));
    }
    let dh = c / num_heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();

    let q = p.query.forward(query_in);
    let k = p.key.forward(memory_in);
    let v = p.value.forward(memory_in);
    let mut heads = Array2::zeros((query_in.nrows(), c));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores)?;
        heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = p.output.forward(heads.view());
    if !all_finite(out.view()) {
        return Err(Error::Numerical("non-finite attention output".into()));
    }
    Ok((
        out,
        AttentionCache {
            query_in: query_in.to_owned(),
            memory_in: memory_in.to_owned(),
            q,
            k,
            v,
            probs,
            heads,
        },
    ))
}

/// Returns `(d_query_in, d_memory_in)`.
pub fn attention_backward<T: Real>(
    p: &AttentionParams<T>,
    cache: &AttentionCache<T>,
    d_out: ArrayView2<T>,
    grad: &mut AttentionParams<T>,
) -> (Array2<T>, Array2<T>) {
    let num_heads = cache.probs.len();
    let c = p.c_dim();
    let dh = c / num_heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();

    let d_heads = p.output.backward(cache.heads.view(), d_out, &mut grad.output);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_head = d_heads.slice(cols);
        let d_probs = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_head));
        let d_scores = softmax_rows_backward(probs.view(), d_probs.view()) * scale;
        dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
    }
    let d_query_in = p.query.backward(cache.query_in.view(), dq.view(), &mut grad.query);
    let mut d_memory_in = p.key.backward(cache.memory_in.view(), dk.view(), &mut grad.key);
    d_memory_in += &p.value.backward(cache.memory_in.view(), dv.view(), &mut grad.value);
    (d_query_in, d_memory_in)
}
