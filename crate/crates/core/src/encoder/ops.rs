//! Forward/backward primitives for the encoder.
//!
//! Each forward returns what its backward needs; backwards accumulate
//! parameter gradients in place and return the input gradient.

use super::params::{Attention, Linear};
use super::ConvMode;
use crate::chunking::AttentionMask;
use ndarray::{s, Array1, Array2, Axis};

pub(crate) fn linear_fwd(x: &Array2<f64>, l: &Linear) -> Array2<f64> {
    x.dot(&l.w) + &l.b
}

pub(crate) fn linear_bwd(
    x: &Array2<f64>,
    l: &Linear,
    dy: &Array2<f64>,
    dl: &mut Linear,
) -> Array2<f64> {
    dl.w += &x.t().dot(dy);
    dl.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layernorm_fwd(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            xhat[[i, j]] = (x[[i, j]] - mean) * inv;
        }
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layernorm_bwd(
    cache: &LnCache,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[[i, j]];
            dgain[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbias[j] += dy[[i, j]];
        }
        let inv = cache.inv_std[i];
        let n = d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            dx[[i, j]] = inv * (dxh - sum_dxhat / n - cache.xhat[[i, j]] * sum_dxhat_xhat / n);
        }
    }
    dx
}

pub(crate) fn silu_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub(crate) fn silu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

pub(crate) fn relu_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

pub(crate) struct AttnCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head softmax matrices.
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
}

/// Masked multi-head self-attention. Invisible pairs get a score of -inf, so
/// their softmax weight is exactly zero and cross-chunk leakage is
/// impossible at the arithmetic level.
pub(crate) fn attention_fwd(
    x: &Array2<f64>,
    p: &Attention,
    mask: &AttentionMask,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let (t, d) = x.dim();
    debug_assert_eq!(mask.dim(), t);
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = linear_fwd(x, &p.wq);
    let k = linear_fwd(x, &p.wk);
    let v = linear_fwd(x, &p.wv);
    let mut ctx = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        for i in 0..t {
            for j in 0..t {
                if !mask.visible[[i, j]] {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        // Row softmax; the diagonal is always visible so the max is finite.
        for i in 0..t {
            let row_max =
                scores.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..t {
                let e = (scores[[i, j]] - row_max).exp();
                scores[[i, j]] = e;
                denom += e;
            }
            for j in 0..t {
                scores[[i, j]] /= denom;
            }
        }
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(scores);
    }
    let out = linear_fwd(&ctx, &p.wo);
    (out, AttnCache { x: x.clone(), q, k, v, probs, ctx })
}

pub(crate) fn attention_bwd(
    cache: &AttnCache,
    p: &Attention,
    n_heads: usize,
    dy: &Array2<f64>,
    dp: &mut Attention,
) -> Array2<f64> {
    let (t, d) = cache.x.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let dctx = linear_bwd(&cache.ctx, &p.wo, dy, &mut dp.wo);
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let a = &cache.probs[h];
        let vh = cache.v.slice(cols);
        let dctx_h = dctx.slice(cols);
        // dA = dCtx . V^T ; softmax rows: dS = A o (dA - rowsum(dA o A)).
        let da = dctx_h.dot(&vh.t());
        let mut ds = Array2::zeros((t, t));
        for i in 0..t {
            let mut dot = 0.0;
            for j in 0..t {
                dot += da[[i, j]] * a[[i, j]];
            }
            for j in 0..t {
                ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
            }
        }
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        dq.slice_mut(cols).assign(&(ds.dot(&kh) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&qh) * scale));
    }
    let mut dx = linear_bwd(&cache.x, &p.wq, &dq, &mut dp.wq);
    dx += &linear_bwd(&cache.x, &p.wk, &dk, &mut dp.wk);
    dx += &linear_bwd(&cache.x, &p.wv, &dv, &mut dp.wv);
    dx
}

/// Source row for depthwise-conv tap `j` at output row `t_local`, or None if
/// the tap falls outside the array or, under chunkwise-causal clipping, past
/// the end of the frame's own chunk. `t0` is the global frame index of row 0.
#[inline]
fn conv_src(
    t_local: usize,
    j: usize,
    half: usize,
    t_len: usize,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
) -> Option<usize> {
    let src = t_local as isize + j as isize - half as isize;
    if src < 0 || src as usize >= t_len {
        return None;
    }
    let src = src as usize;
    if matches!(mode, ConvMode::ChunkwiseCausal) {
        let g_t = t0 + t_local as isize;
        let g_src = t0 + src as isize;
        let chunk_end = (g_t.max(0) / chunk as isize + 1) * chunk as isize - 1;
        if g_src > chunk_end {
            return None;
        }
    }
    Some(src)
}

/// Depthwise convolution over time, zero padding outside the sequence.
///
/// Standard mode uses a symmetric window; chunkwise-causal clips the window's
/// right edge at the frame's chunk end (the left side may cross chunk
/// boundaries, which is what carries long-form history).
pub(crate) fn dwconv_fwd(
    x: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let k = w.ncols();
    let half = (k - 1) / 2;
    let mut y = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for j in 0..k {
            if let Some(src) = conv_src(t, j, half, t_len, mode, chunk, t0) {
                for c in 0..d {
                    y[[t, c]] += w[[c, j]] * x[[src, c]];
                }
            }
        }
        for c in 0..d {
            y[[t, c]] += b[c];
        }
    }
    y
}

pub(crate) fn dwconv_bwd(
    x: &Array2<f64>,
    w: &Array2<f64>,
    mode: ConvMode,
    chunk: usize,
    t0: isize,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let k = w.ncols();
    let half = (k - 1) / 2;
    let mut dx = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for j in 0..k {
            if let Some(src) = conv_src(t, j, half, t_len, mode, chunk, t0) {
                for c in 0..d {
                    dx[[src, c]] += w[[c, j]] * dy[[t, c]];
                    dw[[c, j]] += x[[src, c]] * dy[[t, c]];
                }
            }
        }
        for c in 0..d {
            db[c] += dy[[t, c]];
        }
    }
    dx
}

/// Stacks groups of `factor` consecutive feature rows, zero-padding the
/// ragged tail group, giving `ceil(T/factor)` rows of width `factor * D`.
pub(crate) fn stack_frames(features: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (t, d) = features.dim();
    let t_out = t.div_ceil(factor);
    let mut out = Array2::zeros((t_out, factor * d));
    for i in 0..t_out {
        for g in 0..factor {
            let src = i * factor + g;
            if src < t {
                for c in 0..d {
                    out[[i, g * d + c]] = features[[src, c]];
                }
            }
        }
    }
    out
}

/// Sinusoidal absolute positions for rows `offset .. offset + t`.
pub(crate) fn positions(t: usize, d: usize, offset: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((t, d));
    for i in 0..t {
        let pos = (offset + i) as f64;
        for j in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
            pe[[i, 2 * j]] = (pos * rate).sin();
            pe[[i, 2 * j + 1]] = (pos * rate).cos();
        }
        if d % 2 == 1 {
            let j = d / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
            pe[[i, d - 1]] = (pos * rate).sin();
        }
    }
    pe
}
