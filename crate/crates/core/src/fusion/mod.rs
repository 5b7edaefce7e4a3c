//! The trainable fusion head.
//!
//! Position-aware tokens are projected into the vision-language feature
//! space, then refined by `depth` pre-norm blocks:
//!
//! ```text
//! x = x + SelfAttn(LN(x))                    (regions attend to each other)
//! x = x + CrossAttn(LN(x), LN(memory))       (regions query the image map)
//! x = x + FFN(LN(x))
//! ```
//!
//! and a final layer norm. The cross-attention is
//! `softmax(Q K^T / sqrt(C / heads)) V` with queries from the region stream
//! and keys/values from the image grid (plus its class token, if enabled).
//! There is no positional encoding over regions, so the head is equivariant
//! to the order of the input boxes.

mod attention;

pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{PositionAwareTokenSet, SemanticFeatureMap};
use crate::ops::{gelu, gelu_grad, lit, LayerNorm, LayerNormCache, Linear, Real};
use crate::params::{join, Tensors};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub depth: usize,
    pub c_dim: usize,
    pub num_heads: usize,
    pub use_class_token: bool,
    pub use_self_attention: bool,
    pub ffn_expansion: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            depth: 3,
            c_dim: 256,
            num_heads: 4,
            use_class_token: true,
            use_self_attention: true,
            ffn_expansion: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("fusion.depth", "must be at least 1"));
        }
        if self.c_dim == 0 || self.num_heads == 0 || !self.c_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "fusion.c_dim",
                format!(
                    "{} must be a positive multiple of num_heads {}",
                    self.c_dim, self.num_heads
                ),
            ));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("fusion.ffn_expansion", "must be positive"));
        }
        Ok(())
    }
}

/// Which attention inside a block produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfRegion,
    Cross,
}

/// Head-averaged attention matrix of one layer. Cross-attention records have
/// `M` columns, or `M + 1` when the class token was appended as the last key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub layer_index: usize,
    pub kind: AttentionKind,
    pub weights: Array2<T>,
    pub includes_class_token: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSemanticTokens<T> {
    pub tokens: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<T> {
    pub norm: LayerNorm<T>,
    pub attn: AttentionParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub self_attention: Option<SelfAttention<T>>,
    pub memory_norm: LayerNorm<T>,
    pub cross_norm: LayerNorm<T>,
    pub cross_attn: AttentionParams<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParameters<T> {
    pub projector: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: LayerNorm<T>,
}

impl<T: Real> FusionParameters<T> {
    /// Correctly shaped parameters: zero matrices, identity layer norms.
    pub fn zeros(config: &FusionConfig, d_loc: usize, d_vil: usize) -> Self {
        let c = config.c_dim;
        let hidden = c * config.ffn_expansion;
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                self_attention: config.use_self_attention.then(|| SelfAttention {
                    norm: LayerNorm::identity(c),
                    attn: AttentionParams::zeros(c, c, c),
                }),
                memory_norm: LayerNorm::identity(d_vil),
                cross_norm: LayerNorm::identity(c),
                cross_attn: AttentionParams::zeros(c, d_vil, c),
                ffn_norm: LayerNorm::identity(c),
                ffn_in: Linear::zeros(c, hidden, true),
                ffn_out: Linear::zeros(hidden, c, true),
            })
            .collect();
        FusionParameters {
            projector: Linear::zeros(d_loc, c, true),
            blocks,
            final_norm: LayerNorm::identity(c),
        }
    }

    pub fn d_loc(&self) -> usize {
        self.projector.in_dim()
    }

    pub fn c_dim(&self) -> usize {
        self.projector.out_dim()
    }

    pub fn cast<U: Real>(&self) -> FusionParameters<U> {
        FusionParameters {
            projector: self.projector.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    self_attention: b.self_attention.as_ref().map(|sa| SelfAttention {
                        norm: sa.norm.cast(),
                        attn: sa.attn.cast(),
                    }),
                    memory_norm: b.memory_norm.cast(),
                    cross_norm: b.cross_norm.cast(),
                    cross_attn: b.cross_attn.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    ffn_in: b.ffn_in.cast(),
                    ffn_out: b.ffn_out.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }
}

impl<T: Real> Tensors<T> for FusionParameters<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.projector.collect(&join(prefix, "projector"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            if let Some(sa) = &b.self_attention {
                sa.norm.collect(&join(&p, "self_norm"), out);
                sa.attn.collect(&join(&p, "self_attn"), out);
            }
            b.memory_norm.collect(&join(&p, "memory_norm"), out);
            b.cross_norm.collect(&join(&p, "cross_norm"), out);
            b.cross_attn.collect(&join(&p, "cross_attn"), out);
            b.ffn_norm.collect(&join(&p, "ffn_norm"), out);
            b.ffn_in.collect(&join(&p, "ffn_in"), out);
            b.ffn_out.collect(&join(&p, "ffn_out"), out);
        }
        self.final_norm.collect(&join(prefix, "final_norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.projector.collect_mut(&join(prefix, "projector"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            if let Some(sa) = &mut b.self_attention {
                sa.norm.collect_mut(&join(&p, "self_norm"), out);
                sa.attn.collect_mut(&join(&p, "self_attn"), out);
            }
            b.memory_norm.collect_mut(&join(&p, "memory_norm"), out);
            b.cross_norm.collect_mut(&join(&p, "cross_norm"), out);
            b.cross_attn.collect_mut(&join(&p, "cross_attn"), out);
            b.ffn_norm.collect_mut(&join(&p, "ffn_norm"), out);
            b.ffn_in.collect_mut(&join(&p, "ffn_in"), out);
            b.ffn_out.collect_mut(&join(&p, "ffn_out"), out);
        }
        self.final_norm.collect_mut(&join(prefix, "final_norm"), out);
    }
}

/// Deterministic initialization: every `*.weight` matrix is drawn
/// Glorot-uniform, `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`, in
/// traversal order from `ChaCha8Rng::seed_from_u64(seed)`. Biases start at 0,
/// layer-norm gains at 1.
pub fn init_fusion_parameters<T: Real>(
    config: &FusionConfig,
    d_loc: usize,
    d_vil: usize,
    seed: u64,
) -> Result<FusionParameters<T>> {
    config.validate()?;
    let mut params = FusionParameters::zeros(config, d_loc, d_vil);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, mut tensor) in params.named_mut() {
        if !name.ends_with(".weight") {
            continue;
        }
        let (fan_in, fan_out) = (tensor.shape()[0], tensor.shape()[1]);
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        for v in tensor.iter_mut() {
            *v = T::from_f32((rng.random::<f32>() * 2.0 - 1.0) * bound).expect("f32 fits");
        }
    }
    Ok(params)
}

/// Applies the projector row-wise.
pub fn project_position_tokens<T: Real>(tokens: &PositionAwareTokenSet, projector: &Linear<T>) -> Result<Array2<T>> {
    let input = tokens.tokens.mapv(|v| T::from_f32(v).expect("f32 fits"));
    project_rows(input.view(), projector)
}

fn project_rows<T: Real>(input: ArrayView2<T>, projector: &Linear<T>) -> Result<Array2<T>> {
    if input.ncols() != projector.in_dim() {
        return Err(Error::shape("projector input", projector.in_dim(), input.ncols()));
    }
    let out = projector.forward(input);
    if !crate::ops::all_finite(out.view()) {
        return Err(Error::Numerical("non-finite projector output".into()));
    }
    Ok(out)
}

/// One cross-attention from region queries into a semantic feature map.
pub fn cross_attention<T: Real>(
    queries: ArrayView2<T>,
    map: &SemanticFeatureMap,
    params: &AttentionParams<T>,
    num_heads: usize,
    use_class_token: bool,
) -> Result<(Array2<T>, AttentionRecord<T>)> {
    let memory = map.memory(use_class_token).mapv(|v| T::from_f32(v).expect("f32 fits"));
    let (out, cache) = attention_forward(params, queries, memory.view(), num_heads)?;
    Ok((
        out,
        AttentionRecord {
            layer_index: 0,
            kind: AttentionKind::Cross,
            weights: cache.mean_weights(),
            includes_class_token: use_class_token,
        },
    ))
}

struct BlockCache<T> {
    self_part: Option<(LayerNormCache<T>, AttentionCache<T>)>,
    memory_norm: LayerNormCache<T>,
    cross_norm: LayerNormCache<T>,
    cross: AttentionCache<T>,
    ffn_norm: LayerNormCache<T>,
    ffn_input: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_hidden: Array2<T>,
}

/// Everything the backward pass needs, plus the attention records.
pub struct FusionTrace<T> {
    position_tokens: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    final_norm: LayerNormCache<T>,
    pub attention: Vec<AttentionRecord<T>>,
}

impl<T: Real> FusionTrace<T> {
    pub fn cross_attention(&self) -> impl Iterator<Item = &AttentionRecord<T>> {
        self.attention.iter().filter(|r| r.kind == AttentionKind::Cross)
    }

    /// Per-head cross-attention matrices of one layer.
    pub fn cross_head_weights(&self, layer: usize) -> Option<&[Array2<T>]> {
        self.blocks.get(layer).map(|b| b.cross.head_weights())
    }
}

/// Forward pass on raw arrays. `memory` already includes the class-token row
/// if the config asks for it.
pub fn fusion_forward_traced<T: Real>(
    params: &FusionParameters<T>,
    config: &FusionConfig,
    position_tokens: ArrayView2<T>,
    memory: ArrayView2<T>,
) -> Result<(Array2<T>, FusionTrace<T>)> {
    if params.blocks.len() != config.depth {
        return Err(Error::shape("fusion depth", config.depth, params.blocks.len()));
    }
    let heads = config.num_heads;
    let mut x = project_rows(position_tokens, &params.projector)?;
    let mut caches = Vec::with_capacity(config.depth);
    let mut records = Vec::new();
    for (layer, block) in params.blocks.iter().enumerate() {
        let self_part = match &block.self_attention {
            Some(sa) => {
                let (h, norm_cache) = sa.norm.forward(x.view());
                let (a, attn_cache) = attention_forward(&sa.attn, h.view(), h.view(), heads)?;
                records.push(AttentionRecord {
                    layer_index: layer,
                    kind: AttentionKind::SelfRegion,
                    weights: attn_cache.mean_weights(),
                    includes_class_token: false,
                });
                x += &a;
                Some((norm_cache, attn_cache))
            }
            None => None,
        };

        let (hm, memory_cache) = block.memory_norm.forward(memory);
        let (hq, cross_norm_cache) = block.cross_norm.forward(x.view());
        let (c, cross_cache) = attention_forward(&block.cross_attn, hq.view(), hm.view(), heads)?;
        records.push(AttentionRecord {
            layer_index: layer,
            kind: AttentionKind::Cross,
            weights: cross_cache.mean_weights(),
            includes_class_token: config.use_class_token,
        });
        x += &c;

        let (f, ffn_norm_cache) = block.ffn_norm.forward(x.view());
        let pre = block.ffn_in.forward(f.view());
        let hidden = pre.mapv(gelu);
        x += &block.ffn_out.forward(hidden.view());

        caches.push(BlockCache {
            self_part,
            memory_norm: memory_cache,
            cross_norm: cross_norm_cache,
            cross: cross_cache,
            ffn_norm: ffn_norm_cache,
            ffn_input: f,
            ffn_pre: pre,
            ffn_hidden: hidden,
        });
    }
    let (out, final_cache) = params.final_norm.forward(x.view());
    if !crate::ops::all_finite(out.view()) {
        return Err(Error::Numerical("non-finite fusion output".into()));
    }
    Ok((
        out,
        FusionTrace {
            position_tokens: position_tokens.to_owned(),
            blocks: caches,
            final_norm: final_cache,
            attention: records,
        },
    ))
}

/// Accumulates parameter gradients of a scalar loss given `d_out = dL/dS`.
pub fn fusion_backward<T: Real>(
    params: &FusionParameters<T>,
    trace: &FusionTrace<T>,
    d_out: ArrayView2<T>,
    grad: &mut FusionParameters<T>,
) {
    let mut dx = params
        .final_norm
        .backward(&trace.final_norm, d_out, &mut grad.final_norm);
    for ((block, cache), g) in params
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        let d_hidden = block
            .ffn_out
            .backward(cache.ffn_hidden.view(), dx.view(), &mut g.ffn_out);
        let mut d_pre = d_hidden;
        Zip::from(&mut d_pre)
            .and(&cache.ffn_pre)
            .for_each(|d, &u| *d *= gelu_grad(u));
        let d_f = block
            .ffn_in
            .backward(cache.ffn_input.view(), d_pre.view(), &mut g.ffn_in);
        dx += &block.ffn_norm.backward(&cache.ffn_norm, d_f.view(), &mut g.ffn_norm);

        let (d_hq, d_hm) = attention_backward(&block.cross_attn, &cache.cross, dx.view(), &mut g.cross_attn);
        dx += &block
            .cross_norm
            .backward(&cache.cross_norm, d_hq.view(), &mut g.cross_norm);
        block
            .memory_norm
            .backward(&cache.memory_norm, d_hm.view(), &mut g.memory_norm);

        if let (Some(sa), Some((norm_cache, attn_cache)), Some(gsa)) =
            (&block.self_attention, &cache.self_part, g.self_attention.as_mut())
        {
            let (d_q, d_kv) = attention_backward(&sa.attn, attn_cache, dx.view(), &mut gsa.attn);
            let d_h = d_q + d_kv;
            dx += &sa.norm.backward(norm_cache, d_h.view(), &mut gsa.norm);
        }
    }
    params
        .projector
        .backward(trace.position_tokens.view(), dx.view(), &mut grad.projector);
}

/// Full fusion pass from encoder outputs to region semantic tokens, with the
/// per-layer attention records.
pub fn fusion_forward<T: Real>(
    tokens: &PositionAwareTokenSet,
    map: &SemanticFeatureMap,
    config: &FusionConfig,
    params: &FusionParameters<T>,
) -> Result<(RegionSemanticTokens<T>, Vec<AttentionRecord<T>>)> {
    let input = tokens.tokens.mapv(|v| T::from_f32(v).expect("f32 fits"));
    let memory = map
        .memory(config.use_class_token)
        .mapv(|v| T::from_f32(v).expect("f32 fits"));
    let (out, trace) = fusion_forward_traced(params, config, input.view(), memory.view())?;
    Ok((RegionSemanticTokens { tokens: out }, trace.attention))
}

/// Drops the class-token column (if present) and renormalizes each row, for
/// display. The stored record is not modified.
pub fn grid_attention<T: Real>(record: &AttentionRecord<T>, grid_tokens: usize) -> Result<Array2<T>> {
    let expected = grid_tokens + usize::from(record.includes_class_token);
    if record.weights.ncols() != expected {
        return Err(Error::shape("attention record width", expected, record.weights.ncols()));
    }
    let mut grid = record.weights.slice(ndarray::s![.., ..grid_tokens]).to_owned();
    for mut row in grid.outer_iter_mut() {
        let total = row.sum();
        if total > T::zero() {
            row.mapv_inplace(|v| v / total);
        } else {
            row.fill(T::one() / lit::<T>(grid_tokens as f64));
        }
    }
    Ok(grid)
}
