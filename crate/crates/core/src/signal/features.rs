//! Log-mel and MFCC front-end: 25 ms Hann window, 10 ms hop, 512-point FFT.

use super::{FeatureKind, FeatureSequence, Waveform, SAMPLE_RATE};
use crate::{Error, Result};
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

/// Window length in samples (25 ms at 16 kHz).
pub const FRAME_LEN: usize = 400;
/// Hop in samples (10 ms at 16 kHz).
pub const HOP: usize = 160;
/// FFT size (next power of two above the window).
const N_FFT: usize = 512;
/// Log floor added to mel energies.
const LOG_EPS: f64 = 1e-10;
/// Default mel filterbank size.
pub const N_MELS_DEFAULT: usize = 80;

/// Number of full analysis frames in a waveform of `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < FRAME_LEN {
        0
    } else {
        1 + (len - FRAME_LEN) / HOP
    }
}

/// Sample spans (start, end) of each analysis frame.
pub fn frame_spans(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..frame_count(len)).map(|i| (i * HOP, i * HOP + FRAME_LEN))
}

fn hann_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|n| {
            let x = std::f64::consts::PI * n as f64 / FRAME_LEN as f64;
            x.sin() * x.sin()
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided power spectrum.
fn mel_filterbank(n_mels: usize) -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let to_bin = |f: f64| f * N_FFT as f64 / SAMPLE_RATE as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (to_bin(mel_pts[m]), to_bin(mel_pts[m + 1]), to_bin(mel_pts[m + 2]));
        for b in 0..n_bins {
            let x = b as f64;
            let w = if x <= mid {
                (x - lo) / (mid - lo)
            } else {
                (hi - x) / (hi - mid)
            };
            if w > 0.0 {
                fb[[m, b]] = w;
            }
        }
    }
    fb
}

fn power_frames(waveform: &Waveform) -> Result<Array2<f64>> {
    if waveform.len() < FRAME_LEN {
        return Err(Error::invalid("waveform shorter than one frame"));
    }
    let window = hann_window();
    let n_frames = frame_count(waveform.len());
    let n_bins = N_FFT / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut out = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for (t, (start, end)) in frame_spans(waveform.len()).enumerate() {
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < FRAME_LEN {
                Complex::new(waveform.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        debug_assert_eq!(end - start, FRAME_LEN);
        fft.process(&mut buf);
        for b in 0..n_bins {
            out[[t, b]] = buf[b].norm_sqr();
        }
    }
    Ok(out)
}

/// Log-mel filterbank features: `T = 1 + floor((len - 400) / 160)`, `D = n_mels`.
pub fn log_mel(waveform: &Waveform, n_mels: usize) -> Result<FeatureSequence> {
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be >= 1"));
    }
    let power = power_frames(waveform)?;
    let fb = mel_filterbank(n_mels);
    let mel = power.dot(&fb.t());
    let frames = mel.mapv(|e| (e + LOG_EPS).ln());
    Ok(FeatureSequence {
        frames,
        frame_hop_ms: 10,
        frame_len_ms: 25,
        kind: FeatureKind::LogMel,
    })
}

/// Orthonormal DCT-II matrix, `n_coeffs` x `n`.
fn dct_matrix(n_coeffs: usize, n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_coeffs, n));
    for k in 0..n_coeffs {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for j in 0..n {
            m[[k, j]] =
                scale * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// MFCCs: orthonormal DCT over the log-mel bins, keeping `n_coeffs`.
pub fn mfcc(waveform: &Waveform, n_coeffs: usize) -> Result<FeatureSequence> {
    mfcc_from_mels(waveform, N_MELS_DEFAULT, n_coeffs)
}

/// MFCCs with an explicit mel filterbank size.
pub fn mfcc_from_mels(waveform: &Waveform, n_mels: usize, n_coeffs: usize) -> Result<FeatureSequence> {
    if n_coeffs == 0 || n_coeffs > n_mels {
        return Err(Error::invalid("n_coeffs must be in [1, n_mels]"));
    }
    let lm = log_mel(waveform, n_mels)?;
    let dct = dct_matrix(n_coeffs, n_mels);
    let frames = lm.frames.dot(&dct.t());
    Ok(FeatureSequence {
        frames,
        frame_hop_ms: 10,
        frame_len_ms: 25,
        kind: FeatureKind::Mfcc,
    })
}

/// Per-frame RMS level in dBFS (0 dB = full-scale 1.0); silence maps to -inf.
pub fn frame_rms_dbfs(waveform: &Waveform) -> Vec<f64> {
    frame_spans(waveform.len())
        .map(|(s, e)| {
            let ms: f64 =
                waveform.samples[s..e].iter().map(|x| x * x).sum::<f64>() / (e - s) as f64;
            let rms = ms.sqrt();
            20.0 * rms.log10()
        })
        .collect()
}
