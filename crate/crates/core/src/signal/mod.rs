//! Synthetic tone corpus and acoustic front-end.
//!
//! The toy language renders each phone as a fixed-frequency sinusoid, which
//! keeps every downstream experiment reproducible and fast while preserving
//! the structure ASR training needs: frame-level features, transcripts and
//! controllable silence for the VAD filter.

mod features;
mod io;
mod synth;

pub use features::{
    frame_count, frame_rms_dbfs, frame_spans, log_mel, mfcc, mfcc_from_mels, FRAME_LEN, HOP,
    N_MELS_DEFAULT,
};
pub use io::{
    corpus_digest, load_corpus, read_manifest, read_wav, save_corpus, ManifestEntry,
    MANIFEST_NAME,
};
pub use synth::{synth_corpus, synth_utterance, CorpusSpec, PhoneStyle};

use crate::{Error, Result};
use ndarray::Array2;

/// Fixed project-wide sample rate in Hz.
pub const SAMPLE_RATE: usize = 16_000;

/// Mono audio in [-1, 1] at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: usize,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < FRAME_LEN {
            return Err(Error::invalid("waveform shorter than one frame"));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid("waveform samples must be finite and within [-1, 1]"));
        }
        Ok(Waveform { samples, sample_rate: SAMPLE_RATE })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> u64 {
        (self.samples.len() * 1000 / self.sample_rate) as u64
    }
}

/// One synthetic utterance: audio, phone transcript and inserted-silence
/// metadata (generation-time ground truth for the VAD filter).
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
    pub transcript: Vec<String>,
    /// Sample spans of inserted silence, non-overlapping, in waveform bounds.
    pub silence_spans: Vec<(usize, usize)>,
}

/// Feature kind produced by the front-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

/// Time-major T x D acoustic feature matrix at 25 ms window / 10 ms hop.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub frame_hop_ms: u32,
    pub frame_len_ms: u32,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Toy phone vocabulary: token names with their tone frequencies in Hz.
///
/// Token ids for CTC are 1-based (0 is the blank).
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<f64>,
}

impl Vocab {
    /// Eight phones on log-spaced tones between 300 Hz and 3 kHz.
    pub fn default_tones() -> Self {
        Self::tones(8).expect("8 is a valid vocabulary size")
    }

    /// `n` phones (2..=26, letters a..) on log-spaced tones 300 Hz - 3 kHz.
    pub fn tones(n: usize) -> Result<Self> {
        if !(2..=26).contains(&n) {
            return Err(Error::invalid("vocabulary size must be in 2..=26"));
        }
        let tokens: Vec<String> =
            (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let freqs = (0..n)
            .map(|i| 300.0 * (3000.0_f64 / 300.0).powf(i as f64 / (n - 1) as f64))
            .collect();
        Ok(Vocab { tokens, freqs })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freq(&self, token: &str) -> Option<f64> {
        self.tokens.iter().position(|t| t == token).map(|i| self.freqs[i])
    }

    /// 1-based CTC token id; 0 is reserved for the blank.
    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token).map(|i| i + 1)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        if id == 0 || id > self.tokens.len() {
            None
        } else {
            Some(&self.tokens[id - 1])
        }
    }

    /// Converts a phone transcript into 1-based CTC label ids.
    pub fn encode(&self, transcript: &[String]) -> Result<Vec<usize>> {
        transcript
            .iter()
            .map(|t| {
                self.id_of(t)
                    .ok_or_else(|| Error::invalid(format!("token `{t}` not in vocabulary")))
            })
            .collect()
    }
}

/// Deterministic train/held-out split by utterance id hash (20% held out).
pub fn heldout_split(ids: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if crate::rng::child_seed(0x5eed, id, 0) % 5 == 0 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}
