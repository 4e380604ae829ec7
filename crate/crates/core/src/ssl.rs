//! Masked-prediction pretraining: span masking at the encoder frame rate,
//! mask-embedding substitution, cross-entropy over codebook tokens at masked
//! positions, and the training loop with per-batch dynamic chunk sampling.

use crate::chunking::{sample_chunk, ChunkSpec, Phase, ResolvedChunk};
use crate::encoder::{
    encode_backward, encode_cached, subsample, subsample_backward, ConvMode, EncoderConfig,
    EncoderModel, Linear,
};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{child_seed, rng_for};
use crate::run::RunRecord;
use crate::signal::{heldout_split, log_mel, FeatureSequence, Utterance};
use crate::targets::TargetSequence;
use crate::train::{batch_indices, flat_with_head, log_softmax_rows, unflat_with_head, HeadedGrads};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Frames selected for masking: the union of fixed-length spans.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub span_len: usize,
    pub start_prob: f64,
}

/// Masking policy defaults.
pub const DEFAULT_SPAN_LEN: usize = 10;
pub const DEFAULT_START_PROB: f64 = 0.065;

/// Each frame starts a span of `span_len` frames with probability
/// `start_prob`; spans clip at `t_prime`. A sequence shorter than one span
/// is masked whole.
pub fn plan_masks(
    t_prime: usize,
    span_len: usize,
    start_prob: f64,
    rng: &mut ChaCha8Rng,
) -> MaskPlan {
    assert!(span_len >= 1, "span_len must be >= 1");
    assert!((0.0..=1.0).contains(&start_prob), "start_prob must be in [0, 1]");
    if t_prime < span_len {
        return MaskPlan { masked: (0..t_prime).collect(), span_len, start_prob };
    }
    let mut flags = vec![false; t_prime];
    for start in 0..t_prime {
        if rng.random::<f64>() < start_prob {
            for f in flags.iter_mut().skip(start).take(span_len) {
                *f = true;
            }
        }
    }
    let masked = flags.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    MaskPlan { masked, span_len, start_prob }
}

/// Like [`plan_masks`] but guaranteed non-empty: when no span start fires,
/// one span at a random position is forced (training needs a loss).
pub fn plan_masks_nonempty(
    t_prime: usize,
    span_len: usize,
    start_prob: f64,
    rng: &mut ChaCha8Rng,
) -> MaskPlan {
    let plan = plan_masks(t_prime, span_len, start_prob, rng);
    if !plan.masked.is_empty() {
        return plan;
    }
    let start = rng.random_range(0..t_prime.saturating_sub(span_len - 1).max(1));
    let masked = (start..(start + span_len).min(t_prime)).collect();
    MaskPlan { masked, span_len, start_prob }
}

/// Replaces the masked rows of a post-subsample stream with the learned mask
/// embedding; all other rows pass through bit-identically.
pub fn apply_mask(
    states: &Array2<f64>,
    plan: &MaskPlan,
    mask_embedding: &Array1<f64>,
) -> Result<Array2<f64>> {
    if mask_embedding.len() != states.ncols() {
        return Err(Error::invalid("mask embedding dim does not match states"));
    }
    let mut out = states.clone();
    for &i in &plan.masked {
        if i >= states.nrows() {
            return Err(Error::invalid("mask index out of range"));
        }
        out.row_mut(i).assign(mask_embedding);
    }
    Ok(out)
}

/// Mean cross-entropy over masked positions.
pub fn masked_ce_loss(
    logits: &Array2<f64>,
    targets: &TargetSequence,
    plan: &MaskPlan,
) -> Result<f64> {
    masked_ce_grad(logits, targets, plan).map(|(loss, _, _)| loss)
}

/// Loss, gradient with respect to logits, and masked-position accuracy.
pub fn masked_ce_grad(
    logits: &Array2<f64>,
    targets: &TargetSequence,
    plan: &MaskPlan,
) -> Result<(f64, Array2<f64>, f64)> {
    if plan.masked.is_empty() {
        return Err(Error::invalid("no masked positions"));
    }
    if targets.len() != logits.nrows() {
        return Err(Error::invalid(format!(
            "targets length {} does not match logits rows {}",
            targets.len(),
            logits.nrows()
        )));
    }
    let k = logits.ncols();
    let logp = log_softmax_rows(logits);
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut correct = 0usize;
    let m = plan.masked.len() as f64;
    for &i in &plan.masked {
        let t = targets[i] as usize;
        if t >= k {
            return Err(Error::invalid(format!("target token {t} out of range (K={k})")));
        }
        loss -= logp[[i, t]];
        let mut argmax = 0;
        for v in 0..k {
            let p = logp[[i, v]].exp();
            grad[[i, v]] += p / m;
            if logp[[i, v]] > logp[[i, argmax]] {
                argmax = v;
            }
        }
        grad[[i, t]] -= 1.0 / m;
        if argmax == t {
            correct += 1;
        }
    }
    Ok((loss / m, grad, correct as f64 / m))
}

/// Pretraining configuration.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_utts: usize,
    pub optim: OptimConfig,
    pub span_len: usize,
    pub start_prob: f64,
    /// Relative weight of the prediction loss at unmasked positions
    /// (masked positions weigh 1). Zero keeps the masked-only objective.
    pub unmasked_weight: f64,
    pub chunk_policy: ChunkSpec,
    pub conv_mode: ConvMode,
    pub eval_interval: u64,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_utts: 8,
            optim: OptimConfig { lr: 2e-3, warmup_steps: 200, total_steps: 2000, ..Default::default() },
            span_len: DEFAULT_SPAN_LEN,
            start_prob: DEFAULT_START_PROB,
            unmasked_weight: 0.0,
            chunk_policy: ChunkSpec::dynamic_default(),
            conv_mode: ConvMode::Standard,
            eval_interval: 100,
            n_mels: 80,
            seed: 0,
        }
    }
}

/// Pretraining product: encoder trunk plus the prediction head (the head is
/// discarded at fine-tuning but kept for diagnostics).
pub struct PretrainOutcome {
    pub model: EncoderModel,
    pub head: Linear,
    pub records: Vec<RunRecord>,
}

struct SslExample<'a> {
    feats: &'a FeatureSequence,
    targets: &'a TargetSequence,
}

/// Weighted cross-entropy over all positions: weight 1 at masked rows,
/// `unmasked_weight` elsewhere. Returns (weighted loss sum, per-logit
/// gradient of that sum, masked-position hits, effective weight).
fn weighted_ce_grad(
    logits: &Array2<f64>,
    targets: &TargetSequence,
    plan: &MaskPlan,
    unmasked_weight: f64,
) -> Result<(f64, Array2<f64>, f64, f64)> {
    let (loss_m, grad_m, acc) = masked_ce_grad(logits, targets, plan)?;
    let m = plan.masked.len() as f64;
    let mut loss_sum = loss_m * m;
    let mut grad = grad_m.mapv(|g| g * m);
    let mut weight = m;
    if unmasked_weight > 0.0 {
        let k = logits.ncols();
        let logp = crate::train::log_softmax_rows(logits);
        let masked: std::collections::HashSet<usize> = plan.masked.iter().copied().collect();
        for i in 0..logits.nrows() {
            if masked.contains(&i) {
                continue;
            }
            let t = targets[i] as usize;
            if t >= k {
                return Err(Error::invalid(format!("target token {t} out of range (K={k})")));
            }
            loss_sum -= unmasked_weight * logp[[i, t]];
            for v in 0..k {
                grad[[i, v]] += unmasked_weight * logp[[i, v]].exp();
            }
            grad[[i, t]] -= unmasked_weight;
            weight += unmasked_weight;
        }
    }
    Ok((loss_sum, grad, acc * m, weight))
}

fn ssl_utterance_grads(
    model: &EncoderModel,
    head: &Linear,
    ex: &SslExample<'_>,
    plan: &MaskPlan,
    resolved: ResolvedChunk,
    unmasked_weight: f64,
) -> Result<(f64, f64, usize, f64, HeadedGrads)> {
    let x0 = subsample(model, ex.feats)?;
    if ex.targets.len() != x0.nrows() {
        return Err(Error::invalid(format!(
            "targets not frame-synchronous: {} tokens for {} frames",
            ex.targets.len(),
            x0.nrows()
        )));
    }
    let x0m = apply_mask(&x0, plan, &model.params.mask_embedding)?;
    let (out, cache) = encode_cached(model, &x0m, resolved, 0)?;
    let logits = head.apply(&out.final_states);
    let (loss_sum, dlogits, hits, weight) =
        weighted_ce_grad(&logits, ex.targets, plan, unmasked_weight)?;
    let mut grads = HeadedGrads::zeros(model, head);
    grads.head_w = out.final_states.t().dot(&dlogits);
    grads.head_b = dlogits.sum_axis(Axis(0));
    let d_final = dlogits.dot(&head.w.t());
    let (dx0m, trunk) = encode_backward(model, &cache, &d_final);
    grads.trunk = trunk;
    // Masked rows feed the mask embedding; unmasked rows feed the subsample
    // projection. The substitution path carries exactly zero gradient back
    // to unmasked rows by construction.
    let mut dx0_unmasked = dx0m.clone();
    for &i in &plan.masked {
        for v in grads.trunk.mask_embedding.iter_mut().zip(dx0m.row(i)) {
            *v.0 += v.1;
        }
        dx0_unmasked.row_mut(i).fill(0.0);
    }
    let (dw, db) = subsample_backward(model, ex.feats, &dx0_unmasked);
    grads.trunk.subsample.w += &dw;
    grads.trunk.subsample.b += &db;
    Ok((loss_sum, hits, plan.masked.len(), weight, grads))
}

/// Held-out masked-prediction accuracy with deterministic evaluation masks.
fn eval_masked_accuracy(
    model: &EncoderModel,
    head: &Linear,
    feats: &[FeatureSequence],
    targets: &[TargetSequence],
    held: &[usize],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let sums: Vec<(f64, usize)> = held
        .par_iter()
        .map(|&i| -> Result<(f64, usize)> {
            let x0 = subsample(model, &feats[i])?;
            let mut rng = rng_for(cfg.seed, "eval-mask", i as u64);
            let plan = plan_masks_nonempty(x0.nrows(), cfg.span_len, cfg.start_prob, &mut rng);
            let x0m = apply_mask(&x0, &plan, &model.params.mask_embedding)?;
            let out = crate::encoder::encode_stream(model, &x0m, ResolvedChunk::Full, 0)?;
            let logits = head.apply(&out.final_states);
            let (_, _, acc) = masked_ce_grad(&logits, &targets[i], &plan)?;
            Ok((acc * plan.masked.len() as f64, plan.masked.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = sums.iter().map(|s| s.1).sum();
    let correct: f64 = sums.iter().map(|s| s.0).sum();
    Ok(correct / total.max(1) as f64)
}

/// Masked-prediction pretraining over quantized targets.
///
/// Deterministic in the config seed: batch composition, chunk draws and mask
/// plans all derive from it, so identical configs yield byte-identical
/// checkpoints.
pub fn pretrain(
    corpus: &[Utterance],
    targets: &[TargetSequence],
    k: usize,
    model_config: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.len() != targets.len() {
        return Err(Error::invalid("corpus/targets length mismatch"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut config = model_config.clone();
    config.conv_mode = cfg.conv_mode;
    if config.input_dim != cfg.n_mels {
        return Err(Error::invalid(format!(
            "model input_dim {} does not match front-end n_mels {}",
            config.input_dim, cfg.n_mels
        )));
    }
    let mut model = EncoderModel::init(config, child_seed(cfg.seed, "pretrain-init", 0))?;
    // Zero-initialized prediction head: the step-0 loss then sits exactly at
    // the uniform-prediction anchor ln K.
    let mut head = Linear::zeros(model.config.d_model, k);
    let feats: Vec<FeatureSequence> = corpus
        .par_iter()
        .map(|u| log_mel(&u.waveform, cfg.n_mels))
        .collect::<Result<Vec<_>>>()?;
    for (f, t) in feats.iter().zip(targets) {
        let t_prime = f.num_frames().div_ceil(4);
        if t.len() != t_prime {
            return Err(Error::invalid("targets not frame-synchronous with corpus"));
        }
        if t.iter().any(|tok| *tok as usize >= k) {
            return Err(Error::invalid("target token out of codebook range"));
        }
    }
    let ids: Vec<String> = corpus.iter().map(|u| u.id.clone()).collect();
    let (train_pool, held) = heldout_split(&ids);
    let mut records = Vec::new();
    if cfg.steps == 0 {
        return Ok(PretrainOutcome { model, head, records });
    }
    let mut optim_cfg = cfg.optim.clone();
    optim_cfg.total_steps = cfg.steps;
    let flat_len = model.num_params() + head.w.len() + head.b.len();
    let mut opt = AdamW::new(flat_len, optim_cfg);

    for step in 0..cfg.steps {
        let resolved = sample_chunk(
            &mut rng_for(cfg.seed, "pt-chunk", step),
            Phase::Pretrain,
            &cfg.chunk_policy,
            false,
        )?;
        let batch = batch_indices(cfg.seed, step, &train_pool, cfg.batch_utts);
        let jobs: Vec<(usize, u64)> = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| (i, step * cfg.batch_utts as u64 + slot as u64))
            .collect();
        let per_utt: Vec<(f64, f64, usize, f64, HeadedGrads)> = jobs
            .par_iter()
            .map(|&(i, mask_idx)| {
                let t_prime = feats[i].num_frames().div_ceil(4);
                let mut mrng = rng_for(cfg.seed, "mask", mask_idx);
                let plan = plan_masks_nonempty(t_prime, cfg.span_len, cfg.start_prob, &mut mrng);
                ssl_utterance_grads(
                    &model,
                    &head,
                    &SslExample { feats: &feats[i], targets: &targets[i] },
                    &plan,
                    resolved,
                    cfg.unmasked_weight,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = HeadedGrads::zeros(&model, &head);
        let mut loss_sum = 0.0;
        let mut hits_sum = 0.0;
        let mut masked_total = 0usize;
        let mut weight_total = 0.0;
        for (loss, hits, m, w, g) in &per_utt {
            loss_sum += loss;
            hits_sum += hits;
            masked_total += m;
            weight_total += w;
            total.add(g);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss diverged at step {step}")));
        }
        let scale = 1.0 / weight_total.max(1e-12);
        total.scale(scale);
        let mut flat = flat_with_head(&model.params, &head);
        opt.step(&mut flat, &total.to_flat());
        unflat_with_head(&mut model.params, &mut head, &flat);

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let chunk_frames = match resolved {
                ResolvedChunk::Full => 0.0,
                ResolvedChunk::Frames(c) => c as f64,
            };
            records.push(RunRecord::new("pretrain", step + 1, "loss", loss_sum * scale));
            records.push(RunRecord::new(
                "pretrain",
                step + 1,
                "masked_acc",
                hits_sum / masked_total.max(1) as f64,
            ));
            records.push(RunRecord::new("pretrain", step + 1, "chunk_size", chunk_frames));
            if !held.is_empty() {
                let acc = eval_masked_accuracy(&model, &head, &feats, targets, &held, cfg)?;
                records.push(RunRecord::new("pretrain", step + 1, "heldout_masked_acc", acc));
            }
        }
    }
    Ok(PretrainOutcome { model, head, records })
}
