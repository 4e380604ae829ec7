//! Energy VAD and the silence-ratio corpus filter.
//!
//! Long recordings are split into consecutive one-minute chunks and a chunk
//! is dropped when the proportion of non-speech frames strictly exceeds the
//! threshold. The detector is a frame-RMS gate; anything producing a
//! [`SpeechMask`] of the right length can stand in for it.

use crate::signal::{frame_count, frame_rms_dbfs, Utterance, Waveform, SAMPLE_RATE};
use crate::{Error, Result};

/// Default RMS gate in dBFS.
pub const DEFAULT_VAD_DB: f64 = -40.0;
/// Default chunk length in seconds.
pub const DEFAULT_CHUNK_S: usize = 60;
/// Default silence-ratio threshold; strictly-greater ratios are discarded.
pub const DEFAULT_SILENCE_THRESHOLD: f64 = 0.6;

/// Per-frame speech flags at the 10 ms analysis hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechMask {
    pub speech: Vec<bool>,
    pub frame_hop_ms: u32,
}

impl SpeechMask {
    pub fn len(&self) -> usize {
        self.speech.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speech.is_empty()
    }
}

/// Frame is speech iff its RMS in dBFS reaches the threshold.
pub fn speech_mask(waveform: &Waveform, energy_threshold_db: f64) -> SpeechMask {
    let speech = frame_rms_dbfs(waveform).into_iter().map(|db| db >= energy_threshold_db).collect();
    SpeechMask { speech, frame_hop_ms: 10 }
}

/// Fraction of non-speech frames.
pub fn silence_ratio(mask: &SpeechMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("empty speech mask"));
    }
    let silent = mask.speech.iter().filter(|s| !**s).count();
    Ok(silent as f64 / mask.len() as f64)
}

/// One chunk's filter decision.
#[derive(Debug, Clone)]
pub struct ChunkRecord {
    pub utterance_id: String,
    pub chunk_index: usize,
    pub silence_ratio: f64,
    pub kept: bool,
}

/// Filter summary plus per-chunk decisions.
#[derive(Debug, Clone)]
pub struct FilterReport {
    pub total_chunks: usize,
    pub kept_chunks: usize,
    pub kept_fraction: f64,
    pub chunks: Vec<ChunkRecord>,
}

/// A surviving chunk, re-packaged as an utterance.
///
/// Chunk 0 of a single-chunk utterance keeps its transcript; chunks cut out
/// of longer audio carry none (there is no alignment to split it with).
#[derive(Debug, Clone)]
pub struct KeptChunk {
    pub utterance: Utterance,
    pub source_id: String,
    pub chunk_index: usize,
}

/// Splits each utterance into consecutive `chunk_s`-second chunks and keeps
/// those whose silence ratio does not exceed `threshold_ratio`.
pub fn filter_corpus(
    utts: &[Utterance],
    chunk_s: usize,
    threshold_ratio: f64,
    vad_db: f64,
) -> Result<(Vec<KeptChunk>, FilterReport)> {
    if chunk_s == 0 {
        return Err(Error::invalid("chunk_s must be > 0"));
    }
    let chunk_samples = chunk_s * SAMPLE_RATE;
    let mut kept = Vec::new();
    let mut chunks = Vec::new();
    for utt in utts {
        let n = utt.waveform.len();
        let n_chunks = n.div_ceil(chunk_samples);
        for c in 0..n_chunks {
            let start = c * chunk_samples;
            let end = (start + chunk_samples).min(n);
            if frame_count(end - start) == 0 {
                // Tail shorter than one analysis frame: fold into the report
                // as silent-by-definition only if it is the sole chunk.
                if n_chunks == 1 {
                    return Err(Error::invalid("utterance shorter than one frame"));
                }
                continue;
            }
            let piece = Waveform {
                samples: utt.waveform.samples[start..end].to_vec(),
                sample_rate: SAMPLE_RATE,
            };
            let ratio = silence_ratio(&speech_mask(&piece, vad_db))?;
            let keep = ratio <= threshold_ratio;
            chunks.push(ChunkRecord {
                utterance_id: utt.id.clone(),
                chunk_index: c,
                silence_ratio: ratio,
                kept: keep,
            });
            if keep {
                let transcript =
                    if n_chunks == 1 { utt.transcript.clone() } else { Vec::new() };
                kept.push(KeptChunk {
                    utterance: Utterance {
                        id: if n_chunks == 1 {
                            utt.id.clone()
                        } else {
                            format!("{}_c{c}", utt.id)
                        },
                        waveform: piece,
                        transcript,
                        silence_spans: Vec::new(),
                    },
                    source_id: utt.id.clone(),
                    chunk_index: c,
                });
            }
        }
    }
    let total = chunks.len();
    let kept_count = chunks.iter().filter(|c| c.kept).count();
    let report = FilterReport {
        total_chunks: total,
        kept_chunks: kept_count,
        kept_fraction: if total == 0 { 0.0 } else { kept_count as f64 / total as f64 },
        chunks,
    };
    Ok((kept, report))
}
