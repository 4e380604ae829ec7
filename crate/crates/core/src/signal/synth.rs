//! Tone-language synthesis.

use super::{Utterance, Waveform, SAMPLE_RATE};
use crate::rng::rng_for;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Peak amplitude of the rendered tones. Leaves headroom for the strongest
/// permitted noise (0.5) without clipping.
const TONE_AMP: f64 = 0.5;

/// Renders a phone sequence as phase-continuous sinusoids plus white noise.
///
/// Deterministic in `seed`. Inserted silence is not produced here; see
/// [`synth_corpus`].
pub fn synth_utterance(
    phones: &[String],
    tone_map: &dyn Fn(&str) -> Option<f64>,
    phone_dur_ms: usize,
    noise_amp: f64,
    seed: u64,
) -> Result<Utterance> {
    if phones.is_empty() {
        return Err(Error::invalid("empty transcript"));
    }
    let samples_per_phone = phone_dur_ms * SAMPLE_RATE / 1000;
    let mut segments = Vec::with_capacity(phones.len());
    for phone in phones {
        let freq = tone_map(phone)
            .ok_or_else(|| Error::invalid(format!("phone `{phone}` has no tone mapping")))?;
        segments.push((freq, samples_per_phone));
    }
    let samples = render_segments(&segments, noise_amp, seed)?;
    Ok(Utterance {
        id: String::new(),
        waveform: Waveform::new(samples)?,
        transcript: phones.to_vec(),
        silence_spans: Vec::new(),
    })
}

/// Phase-continuous tone segments (frequency, length in samples) plus white
/// noise, clamped to [-1, 1].
fn render_segments(segments: &[(f64, usize)], noise_amp: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=0.5).contains(&noise_amp) {
        return Err(Error::invalid("noise_amp must be in [0, 0.5]"));
    }
    let total: usize = segments.iter().map(|s| s.1).sum();
    let mut samples = Vec::with_capacity(total);
    let mut rng = rng_for(seed, "utt-noise", 0);
    let mut phase = 0.0_f64;
    for &(freq, len) in segments {
        if freq >= SAMPLE_RATE as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "tone {freq} Hz at or above Nyquist ({} Hz)",
                SAMPLE_RATE / 2
            )));
        }
        let step = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
        for n in 0..len {
            let mut s = TONE_AMP * (phase + step * n as f64).sin();
            if noise_amp > 0.0 {
                s += noise_amp * (rng.random::<f64>() * 2.0 - 1.0);
            }
            samples.push(s.clamp(-1.0, 1.0));
        }
        // Carry phase across segments so tone joins stay click-free.
        phase += step * len as f64;
    }
    Ok(samples)
}

/// How a phone is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhoneStyle {
    /// One sinusoid at the phone's mapped frequency (the toy default).
    Pure,
    /// Two sequential half-duration tones: phone `i` plays its own tone then
    /// the tone of phone `(i + n/2) mod n`. Classes share the same tone
    /// inventory and differ only in temporal order, so frame-local features
    /// cannot separate them and context integration is required.
    Paired,
}

/// Corpus generation parameters.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_utts: usize,
    /// Number of tone phones (2..=26); the toy default is 8.
    pub vocab_size: usize,
    pub min_len_phones: usize,
    pub max_len_phones: usize,
    pub phone_dur_ms: usize,
    pub noise_amp: f64,
    /// Per-phone-occurrence relative frequency jitter (speaker-variability
    /// stand-in): each rendered tone is scaled by `1 + jitter * u`,
    /// u ~ U[-1, 1].
    pub freq_jitter: f64,
    pub phone_style: PhoneStyle,
    /// Fraction of utterances that receive an inserted silence span long
    /// enough to push the chunk past the 60% silence threshold.
    pub silence_mix: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_utts: 100,
            vocab_size: 8,
            min_len_phones: 4,
            max_len_phones: 10,
            phone_dur_ms: 80,
            noise_amp: 0.05,
            freq_jitter: 0.0,
            phone_style: PhoneStyle::Pure,
            silence_mix: 0.0,
            seed: 0,
        }
    }
}

/// Generates a deterministic corpus over the default tone vocabulary.
///
/// Exactly `round(n_utts * silence_mix)` utterances carry one inserted
/// silence span of twice their speech length, so their silence ratio sits
/// around 2/3 and the VAD filter has exact ground truth.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    if spec.n_utts == 0 {
        return Err(Error::invalid("n_utts must be >= 1"));
    }
    if spec.min_len_phones == 0 || spec.min_len_phones > spec.max_len_phones {
        return Err(Error::invalid("phone length bounds invalid"));
    }
    let vocab = super::Vocab::tones(spec.vocab_size)?;

    let n_silent = (spec.n_utts as f64 * spec.silence_mix).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_utts).collect();
    order.shuffle(&mut rng_for(spec.seed, "silence-pick", 0));
    let mut silent = vec![false; spec.n_utts];
    for &i in order.iter().take(n_silent) {
        silent[i] = true;
    }

    let samples_per_phone = spec.phone_dur_ms * SAMPLE_RATE / 1000;
    let mut corpus = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let mut rng = rng_for(spec.seed, "utt-plan", i as u64);
        let len = rng.random_range(spec.min_len_phones..=spec.max_len_phones);
        let phone_ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab.size())).collect();
        let phones: Vec<String> =
            phone_ids.iter().map(|&p| vocab.tokens()[p].to_string()).collect();
        let mut segments = Vec::new();
        for &p in &phone_ids {
            let scale = 1.0 + spec.freq_jitter * (rng.random::<f64>() * 2.0 - 1.0);
            let base = vocab.freq(&vocab.tokens()[p]).expect("vocab tone") * scale;
            match spec.phone_style {
                PhoneStyle::Pure => segments.push((base, samples_per_phone)),
                PhoneStyle::Paired => {
                    let partner_idx = (p + vocab.size() / 2) % vocab.size();
                    let partner =
                        vocab.freq(&vocab.tokens()[partner_idx]).expect("vocab tone") * scale;
                    let half = samples_per_phone / 2;
                    segments.push((base, half));
                    segments.push((partner, samples_per_phone - half));
                }
            }
        }
        let utt_seed = crate::rng::child_seed(spec.seed, "utt-render", i as u64);
        let samples = render_segments(&segments, spec.noise_amp, utt_seed)?;
        let mut utt = Utterance {
            id: format!("utt{i:05}"),
            waveform: Waveform::new(samples)?,
            transcript: phones,
            silence_spans: Vec::new(),
        };
        if silent[i] {
            insert_silence(&mut utt);
        }
        corpus.push(utt);
    }
    Ok(corpus)
}

/// Splices a zero span of twice the speech length into the middle of the
/// utterance and records it in `silence_spans`.
fn insert_silence(utt: &mut Utterance) {
    let speech_len = utt.waveform.len();
    let sil_len = 2 * speech_len;
    let at = speech_len / 2;
    let mut samples = Vec::with_capacity(speech_len + sil_len);
    samples.extend_from_slice(&utt.waveform.samples[..at]);
    samples.extend(std::iter::repeat(0.0).take(sil_len));
    samples.extend_from_slice(&utt.waveform.samples[at..]);
    utt.waveform = Waveform { samples, sample_rate: SAMPLE_RATE };
    utt.silence_spans = vec![(at, at + sil_len)];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Vocab;

    fn tone_440(p: &str) -> Option<f64> {
        if p == "a" {
            Some(440.0)
        } else {
            None
        }
    }

    #[test]
    fn single_tone_renders_a_pure_sinusoid() {
        let utt =
            synth_utterance(&["a".into()], &tone_440, 100, 0.0, 0).expect("synth");
        assert_eq!(utt.waveform.len(), 1600);
        assert_eq!(utt.transcript, vec!["a".to_string()]);
        let step = 2.0 * std::f64::consts::PI * 440.0 / 16000.0;
        for (n, s) in utt.waveform.samples.iter().enumerate() {
            let expect = 0.5 * (step * n as f64).sin();
            assert!((s - expect).abs() < 1e-12, "sample {n}: {s} vs {expect}");
        }
    }

    #[test]
    fn same_seed_same_waveform() {
        let a = synth_utterance(&["a".into()], &tone_440, 100, 0.3, 7).expect("synth");
        let b = synth_utterance(&["a".into()], &tone_440, 100, 0.3, 7).expect("synth");
        assert_eq!(a.waveform.samples, b.waveform.samples);
    }

    #[test]
    fn three_phones_length() {
        let vocab = Vocab::default_tones();
        let tone = |p: &str| vocab.freq(p);
        let phones: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let utt = synth_utterance(&phones, &tone, 100, 0.0, 0).expect("synth");
        // 3 phones x 0.1 s x 16000 Hz.
        assert_eq!(utt.waveform.len(), 4800);
    }

    #[test]
    fn empty_transcript_rejected() {
        assert!(synth_utterance(&[], &tone_440, 100, 0.0, 0).is_err());
    }

    #[test]
    fn nyquist_frequency_rejected() {
        let tone = |_: &str| Some(8000.0);
        assert!(synth_utterance(&["a".into()], &tone, 100, 0.0, 0).is_err());
    }

    #[test]
    fn silence_mix_is_exact() {
        let spec = CorpusSpec { n_utts: 10, silence_mix: 0.5, seed: 1, ..Default::default() };
        let corpus = synth_corpus(&spec).expect("corpus");
        let with_silence = corpus.iter().filter(|u| !u.silence_spans.is_empty()).count();
        assert_eq!(with_silence, 5);
    }

    #[test]
    fn no_silence_when_mix_zero() {
        let spec = CorpusSpec { n_utts: 1, silence_mix: 0.0, seed: 2, ..Default::default() };
        let corpus = synth_corpus(&spec).expect("corpus");
        assert_eq!(corpus.len(), 1);
        assert!(corpus[0].silence_spans.is_empty());
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec { n_utts: 20, silence_mix: 0.3, seed: 9, ..Default::default() };
        let a = synth_corpus(&spec).expect("corpus");
        let b = synth_corpus(&spec).expect("corpus");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.waveform.samples, y.waveform.samples);
            assert_eq!(x.transcript, y.transcript);
            assert_eq!(x.silence_spans, y.silence_spans);
        }
    }

    #[test]
    fn silence_spans_inside_bounds() {
        let spec = CorpusSpec { n_utts: 8, silence_mix: 1.0, seed: 3, ..Default::default() };
        for utt in synth_corpus(&spec).expect("corpus") {
            for (s, e) in utt.silence_spans {
                assert!(s < e && e <= utt.waveform.len());
                assert!(utt.waveform.samples[s..e].iter().all(|&x| x == 0.0));
            }
        }
    }
}
