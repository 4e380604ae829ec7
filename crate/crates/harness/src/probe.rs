//! Layer probing: a linear CTC head trained on each layer's frozen states,
//! scored by held-out WER.

use crate::config::ProbeStage;
use crate::Result;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use tonelab_core::chunking::ResolvedChunk;
use tonelab_core::ctc::{ctc_logits_grad, greedy_decode, wer};
use tonelab_core::encoder::{forward, EncoderModel, Linear};
use tonelab_core::optim::{AdamW, OptimConfig};
use tonelab_core::rng::{child_seed, rng_for};
use tonelab_core::signal::{heldout_split, log_mel, Utterance, Vocab};

/// Held-out probe WER per layer (0 = post-subsample input).
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub wer_by_layer: Vec<(usize, f64)>,
}

impl ProbeResult {
    pub fn best_layer(&self) -> (usize, f64) {
        self.wer_by_layer
            .iter()
            .copied()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("non-empty probe result")
    }

    pub fn last_layer(&self) -> (usize, f64) {
        *self.wer_by_layer.last().expect("non-empty probe result")
    }
}

struct LayerData {
    /// Per-utterance frozen states for one layer.
    states: Vec<Array2<f64>>,
}

/// Trains a linear CTC probe on every layer's frozen states.
pub fn probe_layers(
    model: &EncoderModel,
    corpus: &[Utterance],
    vocab: &Vocab,
    cfg: &ProbeStage,
    n_mels: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let n_layers = model.config.n_layers;
    // One full-context forward per utterance, capturing every layer.
    let captured: Vec<(Vec<Array2<f64>>, Vec<usize>)> = corpus
        .par_iter()
        .map(|u| -> tonelab_core::Result<(Vec<Array2<f64>>, Vec<usize>)> {
            let feats = log_mel(&u.waveform, n_mels)?;
            let out = forward(model, &feats, ResolvedChunk::Full)?;
            let label = vocab.encode(&u.transcript)?;
            Ok((out.layers.states, label))
        })
        .collect::<tonelab_core::Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = captured.iter().map(|c| c.1.clone()).collect();
    let ids: Vec<String> = corpus.iter().map(|u| u.id.clone()).collect();
    let (train, held) = heldout_split(&ids);
    let feasible = |i: usize| {
        let lab = &labels[i];
        let t = captured[i].0[0].nrows();
        let repeats = lab.windows(2).filter(|w| w[0] == w[1]).count();
        !lab.is_empty() && t >= lab.len() + repeats
    };
    let train: Vec<usize> = train.into_iter().filter(|&i| feasible(i)).collect();
    let held: Vec<usize> = held.into_iter().filter(|&i| feasible(i)).collect();

    let mut wer_by_layer = Vec::with_capacity(n_layers + 1);
    for layer in 0..=n_layers {
        let data = LayerData {
            states: captured.iter().map(|c| c.0[layer].clone()).collect(),
        };
        let w = probe_one_layer(&data, &labels, &train, &held, vocab, cfg, child_seed(seed, "probe-layer", layer as u64))?;
        wer_by_layer.push((layer, w));
    }
    Ok(ProbeResult { wer_by_layer })
}

fn probe_one_layer(
    data: &LayerData,
    labels: &[Vec<usize>],
    train: &[usize],
    held: &[usize],
    vocab: &Vocab,
    cfg: &ProbeStage,
    seed: u64,
) -> Result<f64> {
    let d = data.states[0].ncols();
    let v_out = vocab.size() + 1;
    let mut head = Linear::init(d, v_out, &mut rng_for(seed, "probe-head", 0));
    let mut opt = AdamW::new(
        head.w.len() + head.b.len(),
        OptimConfig {
            lr: cfg.lr,
            warmup_steps: (cfg.steps / 10).max(1),
            total_steps: cfg.steps,
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    for step in 0..cfg.steps {
        let batch = probe_batch(seed, step, train, cfg.batch_utts);
        let mut dw = Array2::zeros(head.w.dim());
        let mut db = ndarray::Array1::zeros(v_out);
        let mut tokens = 0usize;
        for &i in &batch {
            let logits = head.apply(&data.states[i]);
            let (_, dz) = ctc_logits_grad(&logits, &labels[i])?;
            dw += &data.states[i].t().dot(&dz);
            db += &dz.sum_axis(Axis(0));
            tokens += labels[i].len();
        }
        let scale = 1.0 / tokens.max(1) as f64;
        let mut flat: Vec<f64> = head.w.iter().copied().chain(head.b.iter().copied()).collect();
        let grads: Vec<f64> = dw
            .iter()
            .copied()
            .chain(db.iter().copied())
            .map(|g| g * scale)
            .collect();
        opt.step(&mut flat, &grads);
        let (rows, cols) = head.w.dim();
        for i in 0..rows {
            for j in 0..cols {
                head.w[[i, j]] = flat[i * cols + j];
            }
        }
        for j in 0..v_out {
            head.b[j] = flat[rows * cols + j];
        }
    }
    // Held-out corpus-level WER.
    let mut edits = 0usize;
    let mut words = 0usize;
    for &i in held {
        let logits = head.apply(&data.states[i]);
        let hyp = greedy_decode(&logits);
        let rep = wer(&labels[i], &hyp)?;
        edits += rep.substitutions + rep.insertions + rep.deletions;
        words += rep.ref_words;
    }
    Ok(edits as f64 / words.max(1) as f64)
}

fn probe_batch(seed: u64, step: u64, pool: &[usize], batch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = rng_for(seed, "probe-batch", step);
    (0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}
