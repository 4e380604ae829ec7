//! Conformer-style encoder with chunkwise attention, two depthwise-conv
//! windowing modes, 4x frame-stacking subsampling, per-layer state capture
//! and exact reverse-mode gradients.
//!
//! Each block is four pre-norm residual branches: half-step feed-forward,
//! masked self-attention, conv module (pointwise / depthwise / pointwise
//! with ReLU), half-step feed-forward. With zeroed branch weights a block is
//! exactly the identity, which the residual-stream tests rely on.

mod ops;
mod params;
mod streaming;

pub use params::{
    param_count, Attention, Block, ConvModule, EncoderGrads, FeedForward, LayerNorm, Linear,
    ParamMut, ParamRef, ParamSet,
};
pub use streaming::{stream_forward, StreamingEncoder};

use crate::chunking::{AttentionMask, ResolvedChunk};
use crate::signal::FeatureSequence;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use ops::*;
use serde::{Deserialize, Serialize};

/// Depthwise-conv windowing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Standard,
    ChunkwiseCausal,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(ConvMode::Standard),
            "chunkwise-causal" | "chunkwise_causal" => Ok(ConvMode::ChunkwiseCausal),
            other => Err(Error::invalid(format!("unknown conv mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ConvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvMode::Standard => write!(f, "standard"),
            ConvMode::ChunkwiseCausal => write!(f, "chunkwise-causal"),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub input_dim: usize,
    pub subsample_factor: usize,
    pub conv_mode: ConvMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            conv_kernel: 5,
            ff_mult: 4,
            input_dim: 80,
            subsample_factor: 4,
            conv_mode: ConvMode::Standard,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be >= 1"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::invalid("conv_kernel must be odd"));
        }
        if self.subsample_factor != 4 {
            return Err(Error::invalid("subsample_factor is fixed at 4"));
        }
        if self.ff_mult == 0 || self.input_dim == 0 {
            return Err(Error::invalid("ff_mult and input_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Encoder parameters plus their config.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderModel {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config, seed);
        Ok(EncoderModel { config, params })
    }

    /// All-zero branch weights (layer norms at identity): every block is the
    /// identity map on the residual stream.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::zeros(&config);
        for b in &mut params.blocks {
            for ln in [&mut b.ln_ff1, &mut b.ln_attn, &mut b.ln_conv, &mut b.ln_ff2] {
                ln.gain.fill(1.0);
            }
        }
        Ok(EncoderModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

/// Residual-stream snapshots: entry 0 is the post-subsample stream input,
/// then one entry per block output.
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub states: Vec<Array2<f64>>,
}

impl LayerStates {
    pub fn num_entries(&self) -> usize {
        self.states.len()
    }
}

/// Forward product: per-layer snapshots plus the final stream.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub layers: LayerStates,
    pub final_states: Array2<f64>,
}

/// Projects stacked groups of 4 feature frames to the model width:
/// `T' = ceil(T/4)`.
pub fn subsample(model: &EncoderModel, features: &FeatureSequence) -> Result<Array2<f64>> {
    let t = features.num_frames();
    if t < model.config.subsample_factor {
        return Err(Error::invalid(format!(
            "need at least {} feature frames, got {t}",
            model.config.subsample_factor
        )));
    }
    if features.dim() != model.config.input_dim {
        return Err(Error::invalid(format!(
            "feature dim {} does not match encoder input_dim {}",
            features.dim(),
            model.config.input_dim
        )));
    }
    let stacked = stack_frames(&features.frames, model.config.subsample_factor);
    Ok(linear_fwd(&stacked, &model.params.subsample))
}

pub(crate) struct FfnCache {
    ln: LnCache,
    x_ln: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

pub(crate) struct ConvCache {
    ln: LnCache,
    x_ln: Array2<f64>,
    p1_pre: Array2<f64>,
    p1_act: Array2<f64>,
    dw_pre: Array2<f64>,
    dw_act: Array2<f64>,
}

pub(crate) struct BlockCache {
    ffn1: FfnCache,
    ln_attn: LnCache,
    attn: AttnCache,
    conv: ConvCache,
    ffn2: FfnCache,
}

/// Caches for one encoder pass, consumed by [`encode_backward`].
pub struct EncodeCache {
    blocks: Vec<BlockCache>,
    conv_chunk: usize,
    t0: isize,
}

fn ffn_fwd(x: &Array2<f64>, p: &FeedForward, ln: &LayerNorm) -> (Array2<f64>, FfnCache) {
    let (x_ln, ln_cache) = layernorm_fwd(x, &ln.gain, &ln.bias);
    let h_pre = linear_fwd(&x_ln, &p.lin1);
    let h_act = silu_fwd(&h_pre);
    let out = linear_fwd(&h_act, &p.lin2);
    (out, FfnCache { ln: ln_cache, x_ln, h_pre, h_act })
}

fn ffn_bwd(
    cache: &FfnCache,
    p: &FeedForward,
    ln: &LayerNorm,
    dy: &Array2<f64>,
    dp: &mut FeedForward,
    dln: &mut LayerNorm,
) -> Array2<f64> {
    let dh_act = linear_bwd(&cache.h_act, &p.lin2, dy, &mut dp.lin2);
    let dh_pre = silu_bwd(&cache.h_pre, &dh_act);
    let dx_ln = linear_bwd(&cache.x_ln, &p.lin1, &dh_pre, &mut dp.lin1);
    layernorm_bwd(&cache.ln, &ln.gain, &dx_ln, &mut dln.gain, &mut dln.bias)
}

fn conv_module_fwd(
    x: &Array2<f64>,
    p: &ConvModule,
    ln: &LayerNorm,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
) -> (Array2<f64>, ConvCache) {
    let (x_ln, ln_cache) = layernorm_fwd(x, &ln.gain, &ln.bias);
    let p1_pre = linear_fwd(&x_ln, &p.pw1);
    let p1_act = relu_fwd(&p1_pre);
    let dw_pre = dwconv_fwd(&p1_act, &p.dw_weight, &p.dw_bias, mode, chunk, t0);
    let dw_act = relu_fwd(&dw_pre);
    let out = linear_fwd(&dw_act, &p.pw2);
    (out, ConvCache { ln: ln_cache, x_ln, p1_pre, p1_act, dw_pre, dw_act })
}

#[allow(clippy::too_many_arguments)]
fn conv_module_bwd(
    cache: &ConvCache,
    p: &ConvModule,
    ln: &LayerNorm,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
    dy: &Array2<f64>,
    dp: &mut ConvModule,
    dln: &mut LayerNorm,
) -> Array2<f64> {
    let ddw_act = linear_bwd(&cache.dw_act, &p.pw2, dy, &mut dp.pw2);
    let ddw_pre = relu_bwd(&cache.dw_pre, &ddw_act);
    let dp1_act = dwconv_bwd(
        &cache.p1_act,
        &p.dw_weight,
        mode,
        chunk,
        t0,
        &ddw_pre,
        &mut dp.dw_weight,
        &mut dp.dw_bias,
    );
    let dp1_pre = relu_bwd(&cache.p1_pre, &dp1_act);
    let dx_ln = linear_bwd(&cache.x_ln, &p.pw1, &dp1_pre, &mut dp.pw1);
    layernorm_bwd(&cache.ln, &ln.gain, &dx_ln, &mut dln.gain, &mut dln.bias)
}

fn block_fwd(
    x: &Array2<f64>,
    b: &Block,
    mask: &AttentionMask,
    n_heads: usize,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
) -> (Array2<f64>, BlockCache) {
    let (f1, ffn1) = ffn_fwd(x, &b.ff1, &b.ln_ff1);
    let x1 = x + &(0.5 * &f1);
    let (a_ln, ln_attn) = layernorm_fwd(&x1, &b.ln_attn.gain, &b.ln_attn.bias);
    let (attn_out, attn) = attention_fwd(&a_ln, &b.attn, mask, n_heads);
    let x2 = &x1 + &attn_out;
    let (c_out, conv) = conv_module_fwd(&x2, &b.conv, &b.ln_conv, mode, chunk, t0);
    let x3 = &x2 + &c_out;
    let (f2, ffn2) = ffn_fwd(&x3, &b.ff2, &b.ln_ff2);
    let x4 = &x3 + &(0.5 * &f2);
    (x4, BlockCache { ffn1, ln_attn, attn, conv, ffn2 })
}

fn block_bwd(
    cache: &BlockCache,
    b: &Block,
    n_heads: usize,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
    dx4: &Array2<f64>,
    db: &mut Block,
) -> Array2<f64> {
    // ffn2 branch.
    let df2 = dx4.mapv(|v| 0.5 * v);
    let mut dx3 = dx4.clone();
    dx3 += &ffn_bwd(&cache.ffn2, &b.ff2, &b.ln_ff2, &df2, &mut db.ff2, &mut db.ln_ff2);
    // conv branch.
    let mut dx2 = dx3.clone();
    dx2 += &conv_module_bwd(
        &cache.conv,
        &b.conv,
        &b.ln_conv,
        mode,
        chunk,
        t0,
        &dx3,
        &mut db.conv,
        &mut db.ln_conv,
    );
    // attention branch.
    let mut dx1 = dx2.clone();
    let da_ln = attention_bwd(&cache.attn, &b.attn, n_heads, &dx2, &mut db.attn);
    dx1 += &layernorm_bwd(
        &cache.ln_attn,
        &b.ln_attn.gain,
        &da_ln,
        &mut db.ln_attn.gain,
        &mut db.ln_attn.bias,
    );
    // ffn1 branch.
    let df1 = dx1.mapv(|v| 0.5 * v);
    let mut dx = dx1.clone();
    dx += &ffn_bwd(&cache.ffn1, &b.ff1, &b.ln_ff1, &df1, &mut db.ff1, &mut db.ln_ff1);
    dx
}

fn check_finite(x: &Array2<f64>, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite states at layer {layer}")))
    }
}

/// Runs the block stack over an already-subsampled stream `x0`, adding
/// sinusoidal positions for global frames `offset..offset+T'`.
pub fn encode_stream(
    model: &EncoderModel,
    x0: &Array2<f64>,
    resolved: ResolvedChunk,
    offset: usize,
) -> Result<EncodeOutput> {
    let (out, _) = encode_cached(model, x0, resolved, offset)?;
    Ok(out)
}

/// Like [`encode_stream`] but keeps the caches needed for a backward pass.
pub fn encode_cached(
    model: &EncoderModel,
    x0: &Array2<f64>,
    resolved: ResolvedChunk,
    offset: usize,
) -> Result<(EncodeOutput, EncodeCache)> {
    let t = x0.nrows();
    if t == 0 {
        return Err(Error::invalid("empty input stream"));
    }
    if x0.ncols() != model.config.d_model {
        return Err(Error::invalid("stream width does not match d_model"));
    }
    let mask = crate::chunking::attention_mask(t, resolved)?;
    let conv_chunk = resolved.conv_chunk(offset + t);
    let mut x = x0 + &positions(t, model.config.d_model, offset);
    check_finite(&x, 0)?;
    let mut states = vec![x.clone()];
    let mut blocks = Vec::with_capacity(model.config.n_layers);
    for (i, b) in model.params.blocks.iter().enumerate() {
        let (y, cache) = block_fwd(
            &x,
            b,
            &mask,
            model.config.n_heads,
            model.config.conv_mode,
            conv_chunk,
            offset as isize,
        );
        check_finite(&y, i + 1)?;
        states.push(y.clone());
        blocks.push(cache);
        x = y;
    }
    let final_states = states.last().expect("at least one state").clone();
    Ok((
        EncodeOutput { layers: LayerStates { states }, final_states },
        EncodeCache { blocks, conv_chunk, t0: offset as isize },
    ))
}

/// Backpropagates `d_final` through the block stack, returning the gradient
/// with respect to the stream input `x0` and block-parameter gradients
/// (subsample and mask-embedding entries stay zero; callers own those paths).
pub fn encode_backward(
    model: &EncoderModel,
    cache: &EncodeCache,
    d_final: &Array2<f64>,
) -> (Array2<f64>, EncoderGrads) {
    let mut grads = ParamSet::zeros(&model.config);
    let mut dx = d_final.clone();
    for (b, c, db) in model
        .params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(&mut grads.blocks)
        .map(|((b, c), g)| (b, c, g))
        .rev()
    {
        dx = block_bwd(
            c,
            b,
            model.config.n_heads,
            model.config.conv_mode,
            cache.conv_chunk,
            cache.t0,
            &dx,
            db,
        );
    }
    (dx, grads)
}

/// Full forward from features: subsample, embed, run the stack.
pub fn forward(
    model: &EncoderModel,
    features: &FeatureSequence,
    resolved: ResolvedChunk,
) -> Result<EncodeOutput> {
    let x0 = subsample(model, features)?;
    encode_stream(model, &x0, resolved, 0)
}

/// Exact reverse-mode gradients of a scalar loss over the final states.
///
/// `loss` receives the final states and returns the loss value together with
/// its gradient with respect to those states.
pub fn gradients<F>(
    model: &EncoderModel,
    features: &FeatureSequence,
    resolved: ResolvedChunk,
    loss: F,
) -> Result<(f64, EncoderGrads)>
where
    F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    if features.num_frames() < model.config.subsample_factor {
        return Err(Error::invalid("too few frames"));
    }
    let stacked = stack_frames(&features.frames, model.config.subsample_factor);
    let x0 = linear_fwd(&stacked, &model.params.subsample);
    let (out, cache) = encode_cached(model, &x0, resolved, 0)?;
    let (value, d_final) = loss(&out.final_states);
    if !value.is_finite() {
        return Err(Error::Divergence("loss is not finite".into()));
    }
    let (dx0, mut grads) = encode_backward(model, &cache, &d_final);
    grads.subsample.w += &stacked.t().dot(&dx0);
    grads.subsample.b += &dx0.sum_axis(Axis(0));
    Ok((value, grads))
}

/// Stacks groups of 4 feature frames without projecting them, for target
/// generators that need the encoder frame rate.
pub fn stack_for_targets(frames: &Array2<f64>) -> Array2<f64> {
    stack_frames(frames, 4)
}

/// Gradient pieces for the subsample projection given the gradient at the
/// stream input; used by training loops that splice masking in between.
pub fn subsample_backward(
    model: &EncoderModel,
    features: &FeatureSequence,
    dx0: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let stacked = stack_frames(&features.frames, model.config.subsample_factor);
    (stacked.t().dot(dx0), dx0.sum_axis(Axis(0)))
}
