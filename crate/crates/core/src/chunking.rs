//! Chunk partition arithmetic, attention visibility masks, dynamic chunk
//! sampling and empirical receptive-field measurement.
//!
//! Chunk sizes are expressed in encoder frames (40 ms each after 4x
//! subsampling). The canonical grid is {5, 25, 50, 100, 200} frames =
//! {200 ms, 1 s, 2 s, 4 s, 8 s}; dynamic pretraining draws uniformly from
//! the subset without 5 (200 ms pretraining diverges).

use crate::encoder::{encode_stream, EncoderModel};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Canonical chunk sizes in encoder frames.
pub const CANONICAL_CHUNKS: [usize; 5] = [5, 25, 50, 100, 200];
/// Dynamic pretraining candidates (200 ms excluded).
pub const PRETRAIN_DYNAMIC: [usize; 4] = [25, 50, 100, 200];
/// Encoder frame duration after subsampling.
pub const ENCODER_FRAME_MS: usize = 40;

/// Chunk-size selection policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkSpec {
    FullContext,
    Fixed(usize),
    Dynamic(Vec<usize>),
}

impl ChunkSpec {
    pub fn dynamic_default() -> Self {
        ChunkSpec::Dynamic(PRETRAIN_DYNAMIC.to_vec())
    }

    /// Parses a human-unit chunk size: "200ms", "1s".."8s", "full", "dynamic".
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "full" => return Ok(ChunkSpec::FullContext),
            "dynamic" => return Ok(ChunkSpec::dynamic_default()),
            _ => {}
        }
        let ms = if let Some(v) = t.strip_suffix("ms") {
            v.parse::<usize>().map_err(|_| Error::invalid(format!("bad chunk size `{s}`")))?
        } else if let Some(v) = t.strip_suffix('s') {
            1000 * v.parse::<usize>().map_err(|_| Error::invalid(format!("bad chunk size `{s}`")))?
        } else {
            return Err(Error::invalid(format!(
                "bad chunk size `{s}` (use e.g. 200ms, 1s, full, dynamic)"
            )));
        };
        if ms == 0 || ms % ENCODER_FRAME_MS != 0 {
            return Err(Error::invalid(format!(
                "chunk `{s}` is not a whole number of {ENCODER_FRAME_MS} ms encoder frames"
            )));
        }
        Ok(ChunkSpec::Fixed(ms / ENCODER_FRAME_MS))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ChunkSpec::Fixed(0) => Err(Error::invalid("chunk_frames must be >= 1")),
            ChunkSpec::Dynamic(c) if c.is_empty() => {
                Err(Error::invalid("dynamic candidate set is empty"))
            }
            ChunkSpec::Dynamic(c) if c.contains(&0) => {
                Err(Error::invalid("chunk_frames must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for ChunkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChunkSpec::FullContext => write!(f, "full"),
            ChunkSpec::Fixed(c) => write!(f, "{}ms", c * ENCODER_FRAME_MS),
            ChunkSpec::Dynamic(_) => write!(f, "dynamic"),
        }
    }
}

/// A spec resolved to something a mask can be built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvedChunk {
    Full,
    Frames(usize),
}

impl ResolvedChunk {
    /// Chunk length to use for convolution clipping on a `t` frame sequence.
    pub fn conv_chunk(&self, t: usize) -> usize {
        match self {
            ResolvedChunk::Full => t.max(1),
            ResolvedChunk::Frames(c) => *c,
        }
    }
}

/// Training phase for chunk-size sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Index of the chunk containing `frame`.
pub fn chunk_id(frame: usize, chunk_frames: usize) -> usize {
    assert!(chunk_frames >= 1, "chunk_frames must be >= 1");
    frame / chunk_frames
}

/// T x T boolean attention visibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub visible: Array2<bool>,
}

impl AttentionMask {
    pub fn dim(&self) -> usize {
        self.visible.nrows()
    }
}

/// Builds the visibility relation: everything under full context, otherwise
/// same-chunk only.
pub fn attention_mask(t: usize, resolved: ResolvedChunk) -> Result<AttentionMask> {
    if t == 0 {
        return Err(Error::invalid("attention mask needs T >= 1"));
    }
    let visible = match resolved {
        ResolvedChunk::Full => Array2::from_elem((t, t), true),
        ResolvedChunk::Frames(c) => {
            if c == 0 {
                return Err(Error::invalid("chunk_frames must be >= 1"));
            }
            Array2::from_shape_fn((t, t), |(i, j)| chunk_id(i, c) == chunk_id(j, c))
        }
    };
    Ok(AttentionMask { visible })
}

/// Draws the chunk size for one batch.
///
/// Pretraining draws uniformly from the dynamic candidates and refuses the
/// 200 ms chunk (training diverges there). Fine-tuning uses its fixed size;
/// dynamic fine-tuning is disabled unless explicitly re-enabled, recording
/// that it degraded quality.
pub fn sample_chunk(
    rng: &mut ChaCha8Rng,
    phase: Phase,
    spec: &ChunkSpec,
    allow_dynamic_finetune: bool,
) -> Result<ResolvedChunk> {
    spec.validate()?;
    match (phase, spec) {
        (_, ChunkSpec::FullContext) => Ok(ResolvedChunk::Full),
        (Phase::Pretrain, ChunkSpec::Fixed(c)) => {
            if *c < PRETRAIN_DYNAMIC[0] {
                Err(Error::invalid(format!(
                    "pretraining chunk of {c} frames ({} ms) disabled: shorter than 1 s chunks \
                     make pretraining diverge",
                    c * ENCODER_FRAME_MS
                )))
            } else {
                Ok(ResolvedChunk::Frames(*c))
            }
        }
        (Phase::Pretrain, ChunkSpec::Dynamic(cands)) => {
            if cands.iter().any(|c| *c < PRETRAIN_DYNAMIC[0]) {
                return Err(Error::invalid(
                    "dynamic pretraining candidates must be >= 25 frames (1 s)",
                ));
            }
            Ok(ResolvedChunk::Frames(cands[rng.random_range(0..cands.len())]))
        }
        (Phase::Finetune, ChunkSpec::Fixed(c)) => Ok(ResolvedChunk::Frames(*c)),
        (Phase::Finetune, ChunkSpec::Dynamic(cands)) => {
            if allow_dynamic_finetune {
                Ok(ResolvedChunk::Frames(cands[rng.random_range(0..cands.len())]))
            } else {
                Err(Error::invalid("dynamic fine-tuning disabled"))
            }
        }
    }
}

/// Empirical receptive field at `probe_frame`, in encoder frames.
///
/// Perturbs each stream frame of a random input one at a time and reports
/// how far before/after the probe a perturbation still moves the probe
/// output by more than 1e-12.
pub fn measure_receptive_field(
    model: &EncoderModel,
    t: usize,
    probe_frame: usize,
    resolved: ResolvedChunk,
) -> Result<(usize, usize)> {
    if probe_frame >= t {
        return Err(Error::invalid("probe_frame must be < T"));
    }
    let d = model.config.d_model;
    let mut rng = crate::rng::rng_for(0xf1e1d, "rf-input", t as u64);
    let base = Array2::from_shape_fn((t, d), |_| rng.random::<f64>() - 0.5);
    let base_out = encode_stream(model, &base, resolved, 0)?;
    let base_row = base_out.final_states.row(probe_frame).to_owned();
    let mut past = 0usize;
    let mut future = 0usize;
    for f in 0..t {
        if f == probe_frame {
            continue;
        }
        let mut x = base.clone();
        for v in x.row_mut(f) {
            *v += 1.0;
        }
        let out = encode_stream(model, &x, resolved, 0)?;
        let diff = out
            .final_states
            .row(probe_frame)
            .iter()
            .zip(base_row.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if diff > 1e-12 {
            if f < probe_frame {
                past = past.max(probe_frame - f);
            } else {
                future = future.max(f - probe_frame);
            }
        }
    }
    Ok((past, future))
}
