//! Incremental chunk-by-chunk inference.
//!
//! Requires chunkwise-causal convolutions: each layer then needs only the
//! last `(kernel-1)/2` rows of its conv input as cross-chunk state, and the
//! concatenated outputs match the batch forward pass.

use super::ops::{
    dwconv_fwd, layernorm_fwd, linear_fwd, positions, relu_fwd, silu_fwd, stack_frames,
};
use super::{Block, ConvMode, EncoderModel};
use crate::chunking::{attention_mask, ResolvedChunk};
use crate::signal::FeatureSequence;
use crate::{Error, Result};
use ndarray::{concatenate, s, Array2, Axis};

/// Streaming state over a borrowed model.
pub struct StreamingEncoder<'m> {
    model: &'m EncoderModel,
    chunk_frames: usize,
    half: usize,
    /// Buffered feature rows not yet forming a complete encoder chunk.
    feat_buf: Array2<f64>,
    /// Per-layer tail of the depthwise-conv input (half-kernel rows).
    conv_caches: Vec<Array2<f64>>,
    next_index: usize,
    emitted: usize,
    finished: bool,
}

impl<'m> StreamingEncoder<'m> {
    pub fn new(model: &'m EncoderModel, chunk_frames: usize) -> Result<Self> {
        if model.config.conv_mode != ConvMode::ChunkwiseCausal {
            return Err(Error::invalid(
                "streaming requires chunkwise_causal convolutions",
            ));
        }
        if chunk_frames == 0 {
            return Err(Error::invalid("chunk_frames must be >= 1"));
        }
        let d = model.config.d_model;
        let half = (model.config.conv_kernel - 1) / 2;
        Ok(StreamingEncoder {
            model,
            chunk_frames,
            half,
            feat_buf: Array2::zeros((0, model.config.input_dim)),
            conv_caches: vec![Array2::zeros((half, d)); model.config.n_layers],
            next_index: 0,
            emitted: 0,
            finished: false,
        })
    }

    /// Feeds the next chunk of feature rows (any length); returns encoder
    /// final states for every complete attention chunk now available.
    /// Chunks must arrive in order.
    pub fn push(&mut self, chunk_index: usize, features: &Array2<f64>) -> Result<Array2<f64>> {
        if self.finished {
            return Err(Error::invalid("stream already finished"));
        }
        if chunk_index != self.next_index {
            return Err(Error::invalid(format!(
                "out-of-order chunk: expected {}, got {chunk_index}",
                self.next_index
            )));
        }
        if features.ncols() != self.model.config.input_dim {
            return Err(Error::invalid("feature dim mismatch"));
        }
        self.next_index += 1;
        self.feat_buf = concatenate![Axis(0), self.feat_buf.view(), features.view()];
        let feat_per_chunk = self.chunk_frames * self.model.config.subsample_factor;
        let mut outputs = Vec::new();
        while self.feat_buf.nrows() >= feat_per_chunk {
            let head = self.feat_buf.slice(s![..feat_per_chunk, ..]).to_owned();
            self.feat_buf = self.feat_buf.slice(s![feat_per_chunk.., ..]).to_owned();
            outputs.push(self.process(&head)?);
        }
        Ok(vstack(&outputs, self.model.config.d_model))
    }

    /// Flushes the ragged tail (zero-padding the last stacking group exactly
    /// like the batch path) and closes the stream.
    pub fn finish(&mut self) -> Result<Array2<f64>> {
        if self.finished {
            return Err(Error::invalid("stream already finished"));
        }
        self.finished = true;
        if self.feat_buf.nrows() == 0 {
            return Ok(Array2::zeros((0, self.model.config.d_model)));
        }
        let tail = std::mem::replace(
            &mut self.feat_buf,
            Array2::zeros((0, self.model.config.input_dim)),
        );
        self.process(&tail)
    }

    fn process(&mut self, feat_rows: &Array2<f64>) -> Result<Array2<f64>> {
        let cfg = &self.model.config;
        let stacked = stack_frames(feat_rows, cfg.subsample_factor);
        let x0 = linear_fwd(&stacked, &self.model.params.subsample);
        let t = x0.nrows();
        let mut x = x0 + &positions(t, cfg.d_model, self.emitted);
        let mask = attention_mask(t, ResolvedChunk::Full)?;
        for (layer, b) in self.model.params.blocks.iter().enumerate() {
            x = self.stream_block(&x, b, layer, &mask)?;
        }
        self.emitted += t;
        Ok(x)
    }

    fn stream_block(
        &mut self,
        x: &Array2<f64>,
        b: &Block,
        layer: usize,
        mask: &crate::chunking::AttentionMask,
    ) -> Result<Array2<f64>> {
        let cfg = &self.model.config;
        let t = x.nrows();
        // Half-step FFN.
        let (ln1, _) = layernorm_fwd(x, &b.ln_ff1.gain, &b.ln_ff1.bias);
        let f1 = linear_fwd(&silu_fwd(&linear_fwd(&ln1, &b.ff1.lin1)), &b.ff1.lin2);
        let x1 = x + &(0.5 * &f1);
        // Attention, local to this chunk.
        let (lna, _) = layernorm_fwd(&x1, &b.ln_attn.gain, &b.ln_attn.bias);
        let (attn_out, _) = super::ops::attention_fwd(&lna, &b.attn, mask, cfg.n_heads);
        let x2 = &x1 + &attn_out;
        // Conv with cached left context.
        let (lnc, _) = layernorm_fwd(&x2, &b.ln_conv.gain, &b.ln_conv.bias);
        let p1 = relu_fwd(&linear_fwd(&lnc, &b.conv.pw1));
        let ext = concatenate![Axis(0), self.conv_caches[layer].view(), p1.view()];
        let t0 = self.emitted as isize - self.half as isize;
        let conv_ext = dwconv_fwd(
            &ext,
            &b.conv.dw_weight,
            &b.conv.dw_bias,
            ConvMode::ChunkwiseCausal,
            self.chunk_frames,
            t0,
        );
        let dw = conv_ext.slice(s![self.half.., ..]).to_owned();
        let n_ext = ext.nrows();
        self.conv_caches[layer] = ext.slice(s![n_ext - self.half.., ..]).to_owned();
        let c_out = linear_fwd(&relu_fwd(&dw), &b.conv.pw2);
        let x3 = &x2 + &c_out;
        // Half-step FFN.
        let (ln2, _) = layernorm_fwd(&x3, &b.ln_ff2.gain, &b.ln_ff2.bias);
        let f2 = linear_fwd(&silu_fwd(&linear_fwd(&ln2, &b.ff2.lin1)), &b.ff2.lin2);
        let x4 = &x3 + &(0.5 * &f2);
        if !x4.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite states at layer {}", layer + 1)));
        }
        debug_assert_eq!(x4.nrows(), t);
        Ok(x4)
    }
}

fn vstack(parts: &[Array2<f64>], d: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, d));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("compatible widths")
}

/// Drives a [`StreamingEncoder`] over a whole utterance, feeding
/// `chunk_frames * 4` feature rows per push, and returns the concatenated
/// final states.
pub fn stream_forward(
    model: &EncoderModel,
    features: &FeatureSequence,
    chunk_frames: usize,
) -> Result<Array2<f64>> {
    let mut enc = StreamingEncoder::new(model, chunk_frames)?;
    let rows = features.frames.nrows();
    let step = chunk_frames * model.config.subsample_factor;
    let mut outputs = Vec::new();
    let mut index = 0;
    let mut at = 0;
    while at < rows {
        let end = (at + step).min(rows);
        let piece = features.frames.slice(s![at..end, ..]).to_owned();
        outputs.push(enc.push(index, &piece)?);
        index += 1;
        at = end;
    }
    outputs.push(enc.finish()?);
    Ok(vstack(&outputs, model.config.d_model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, EncoderConfig};
    use crate::signal::{FeatureKind, FeatureSequence};
    use rand::Rng;

    fn random_features(t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = crate::rng::rng_for(seed, "feat", 0);
        FeatureSequence {
            frames: Array2::from_shape_fn((t, d), |_| rng.random::<f64>() - 0.5),
            frame_hop_ms: 10,
            frame_len_ms: 25,
            kind: FeatureKind::LogMel,
        }
    }

    fn causal_model(seed: u64) -> EncoderModel {
        let cfg = EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            input_dim: 8,
            conv_mode: ConvMode::ChunkwiseCausal,
            ..Default::default()
        };
        EncoderModel::init(cfg, seed).expect("model")
    }

    #[test]
    fn single_chunk_covering_input_matches_batch() {
        let model = causal_model(1);
        let feats = random_features(40, 8, 2);
        // 40 feature frames -> 10 encoder frames; chunk of 10 covers all.
        let batch = forward(&model, &feats, ResolvedChunk::Frames(10)).expect("batch");
        let stream = stream_forward(&model, &feats, 10).expect("stream");
        let diff = (&batch.final_states - &stream)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-9, "diff {diff}");
    }

    #[test]
    fn four_chunks_match_batch() {
        let model = causal_model(3);
        // 400 feature frames -> 100 encoder frames, processed as 4 x 25.
        let feats = random_features(400, 8, 4);
        let batch = forward(&model, &feats, ResolvedChunk::Frames(25)).expect("batch");
        let stream = stream_forward(&model, &feats, 25).expect("stream");
        let diff = (&batch.final_states - &stream)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn ragged_tail_matches_batch() {
        let model = causal_model(5);
        // 58 feature frames -> 15 encoder frames (ragged stack), chunk 4:
        // ragged last attention chunk too.
        let feats = random_features(58, 8, 6);
        let batch = forward(&model, &feats, ResolvedChunk::Frames(4)).expect("batch");
        let stream = stream_forward(&model, &feats, 4).expect("stream");
        let diff = (&batch.final_states - &stream)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn out_of_order_chunk_is_rejected() {
        let model = causal_model(7);
        let mut enc = StreamingEncoder::new(&model, 4).expect("enc");
        let piece = Array2::zeros((16, 8));
        enc.push(0, &piece).expect("push 0");
        let err = enc.push(2, &piece).unwrap_err();
        assert!(err.to_string().contains("out-of-order"));
    }

    #[test]
    fn standard_convs_cannot_stream() {
        let cfg = EncoderConfig { input_dim: 8, d_model: 16, n_heads: 2, ..Default::default() };
        let model = EncoderModel::init(cfg, 0).expect("model");
        assert!(StreamingEncoder::new(&model, 4).is_err());
    }

    #[test]
    fn future_chunks_do_not_change_emitted_outputs() {
        let model = causal_model(9);
        let feats_a = random_features(32, 8, 10);
        let mut tail_rng = crate::rng::rng_for(11, "tail", 0);
        let make_tail =
            |rng: &mut rand_chacha::ChaCha8Rng| Array2::from_shape_fn((16, 8), |_| rng.random::<f64>());
        let mut enc1 = StreamingEncoder::new(&model, 4).expect("enc");
        let out1 = enc1.push(0, &feats_a.frames).expect("push");
        enc1.push(1, &make_tail(&mut tail_rng)).expect("push tail");
        let mut enc2 = StreamingEncoder::new(&model, 4).expect("enc");
        let out2 = enc2.push(0, &feats_a.frames).expect("push");
        enc2.push(1, &make_tail(&mut tail_rng)).expect("push tail");
        assert_eq!(out1, out2);
    }
}
