//! CTC loss by forward dynamic programming, its exact gradient via
//! forward-backward, greedy decoding, WER, and supervised fine-tuning.
//!
//! Token id 0 is the blank throughout; labels use ids `1..=V`.

use crate::chunking::{sample_chunk, ChunkSpec, Phase, ResolvedChunk};
use crate::encoder::{
    encode_backward, encode_cached, subsample, subsample_backward, ConvMode, EncoderConfig,
    EncoderModel, Linear,
};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{child_seed, rng_for};
use crate::run::RunRecord;
use crate::signal::{heldout_split, log_mel, FeatureSequence, Utterance, Vocab};
use crate::train::{batch_indices, flat_with_head, log_softmax_rows, unflat_with_head, HeadedGrads};
use crate::{Error, Result};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Log-sum-exp of two log-domain values.
#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Checks the `LogProbMatrix` invariant: each row normalizes to 1 in
/// probability space within 1e-6.
pub fn validate_log_probs(probs: &Array2<f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !m.is_finite() {
            return Err(Error::invalid(format!("log-prob row {i} has no finite entry")));
        }
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        if lse.abs() > 1e-6 {
            return Err(Error::invalid(format!("log-prob row {i} off by {lse:.2e}")));
        }
    }
    Ok(())
}

fn augmented(label: &[usize]) -> Vec<usize> {
    let mut aug = Vec::with_capacity(2 * label.len() + 1);
    aug.push(0);
    for &l in label {
        aug.push(l);
        aug.push(0);
    }
    aug
}

fn check_label(probs: &Array2<f64>, label: &[usize]) -> Result<()> {
    let v_plus_1 = probs.ncols();
    if label.is_empty() {
        return Err(Error::invalid("empty label"));
    }
    if label.iter().any(|&l| l == 0 || l >= v_plus_1) {
        return Err(Error::invalid("label ids must be in [1, V]"));
    }
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    let min_frames = label.len() + repeats;
    if probs.nrows() < min_frames {
        return Err(Error::invalid(format!(
            "label too long for input length: need {min_frames} frames, have {}",
            probs.nrows()
        )));
    }
    Ok(())
}

fn forward_alphas(probs: &Array2<f64>, aug: &[usize]) -> Array2<f64> {
    let t_len = probs.nrows();
    let s_len = aug.len();
    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = probs[[0, aug[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = probs[[0, aug[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[[t - 1, s]];
            let step = if s >= 1 { alpha[[t - 1, s - 1]] } else { f64::NEG_INFINITY };
            let skip = if s >= 2 && aug[s] != 0 && aug[s] != aug[s - 2] {
                alpha[[t - 1, s - 2]]
            } else {
                f64::NEG_INFINITY
            };
            let m = lse3(stay, step, skip);
            if m != f64::NEG_INFINITY {
                alpha[[t, s]] = m + probs[[t, aug[s]]];
            }
        }
    }
    alpha
}

/// Negative log-likelihood of `label` under the frame posteriors, summed over
/// all blank-augmented monotonic alignments.
pub fn ctc_loss(probs: &Array2<f64>, label: &[usize]) -> Result<f64> {
    check_label(probs, label)?;
    let aug = augmented(label);
    let alpha = forward_alphas(probs, &aug);
    let t_last = probs.nrows() - 1;
    let s_len = aug.len();
    let tail = if s_len > 1 {
        lse2(alpha[[t_last, s_len - 1]], alpha[[t_last, s_len - 2]])
    } else {
        alpha[[t_last, 0]]
    };
    Ok(-tail)
}

/// Loss plus its exact gradient with respect to the log-probability entries
/// (treated as free variables).
pub fn ctc_grad(probs: &Array2<f64>, label: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_label(probs, label)?;
    let aug = augmented(label);
    let t_len = probs.nrows();
    let s_len = aug.len();
    let alpha = forward_alphas(probs, &aug);
    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[[t + 1, s]] + probs[[t + 1, aug[s]]];
            let step = if s + 1 < s_len {
                beta[[t + 1, s + 1]] + probs[[t + 1, aug[s + 1]]]
            } else {
                f64::NEG_INFINITY
            };
            let skip = if s + 2 < s_len && aug[s + 2] != 0 && aug[s + 2] != aug[s] {
                beta[[t + 1, s + 2]] + probs[[t + 1, aug[s + 2]]]
            } else {
                f64::NEG_INFINITY
            };
            beta[[t, s]] = lse3(stay, step, skip);
        }
    }
    let t_last = t_len - 1;
    let log_p = if s_len > 1 {
        lse2(alpha[[t_last, s_len - 1]], alpha[[t_last, s_len - 2]])
    } else {
        alpha[[t_last, 0]]
    };
    let mut grad = Array2::zeros(probs.dim());
    for t in 0..t_len {
        for (s, &sym) in aug.iter().enumerate() {
            let occ = alpha[[t, s]] + beta[[t, s]] - log_p;
            if occ > f64::NEG_INFINITY {
                grad[[t, sym]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss and gradient with respect to raw logits (pre log-softmax).
pub fn ctc_logits_grad(logits: &Array2<f64>, label: &[usize]) -> Result<(f64, Array2<f64>)> {
    let logp = log_softmax_rows(logits);
    let (loss, g) = ctc_grad(&logp, label)?;
    // Chain through log-softmax: dz = g - softmax(z) * rowsum(g).
    let mut dz = g.clone();
    for t in 0..logits.nrows() {
        let rowsum: f64 = g.row(t).sum();
        for v in 0..logits.ncols() {
            dz[[t, v]] -= logp[[t, v]].exp() * rowsum;
        }
    }
    Ok((loss, dz))
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(probs: &Array2<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in probs.rows() {
        let mut best = 0;
        for (v, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = v;
            }
        }
        if best != prev && best != 0 {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Edit-distance report; `wer = (S + I + D) / ref_words`.
#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

/// Levenshtein alignment with unit costs. Among minimal alignments the one
/// with fewest substitutions is reported, which makes the (S, I<->D) counts
/// symmetric under swapping ref and hyp.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    let r = reference.len();
    let h = hypothesis.len();
    // dp holds (edits, subs), minimized lexicographically.
    let mut dp = vec![(0usize, 0usize); (r + 1) * (h + 1)];
    let idx = |i: usize, j: usize| i * (h + 1) + j;
    for j in 0..=h {
        dp[idx(0, j)] = (j, 0);
    }
    for i in 0..=r {
        dp[idx(i, 0)] = (i, 0);
    }
    for i in 1..=r {
        for j in 1..=h {
            let diag = dp[idx(i - 1, j - 1)];
            let mut best = if reference[i - 1] == hypothesis[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1)
            };
            let del = dp[idx(i - 1, j)];
            let cand = (del.0 + 1, del.1);
            if cand < best {
                best = cand;
            }
            let ins = dp[idx(i, j - 1)];
            let cand = (ins.0 + 1, ins.1);
            if cand < best {
                best = cand;
            }
            dp[idx(i, j)] = best;
        }
    }
    let (edits, subs) = dp[idx(r, h)];
    // I - D = |hyp| - |ref| pins both counts given edits and subs.
    let ins = (edits - subs + h).saturating_sub(r) / 2;
    let del = edits - subs - ins;
    Ok(WerReport {
        substitutions: subs,
        insertions: ins,
        deletions: del,
        ref_words: r,
        wer: edits as f64 / r as f64,
    })
}

/// Fine-tuning configuration.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_utts: usize,
    pub optim: OptimConfig,
    pub eval_interval: u64,
    /// Stop after this many evals without held-out improvement.
    pub early_stop_patience: Option<u64>,
    /// Fraction of the training split that keeps its labels.
    pub label_fraction: f64,
    pub chunk: ChunkSpec,
    pub conv_mode: ConvMode,
    pub allow_dynamic_chunk: bool,
    /// Trunk stays frozen for this many initial steps while the fresh CTC
    /// head settles; protects pretrained features from early head noise.
    pub head_warmup_steps: u64,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 600,
            batch_utts: 8,
            optim: OptimConfig { lr: 2e-3, warmup_steps: 60, total_steps: 600, ..Default::default() },
            eval_interval: 50,
            early_stop_patience: None,
            label_fraction: 1.0,
            chunk: ChunkSpec::FullContext,
            conv_mode: ConvMode::Standard,
            allow_dynamic_chunk: false,
            head_warmup_steps: 0,
            n_mels: 80,
            seed: 0,
        }
    }
}

/// Fine-tuning product.
pub struct FinetuneOutcome {
    pub model: EncoderModel,
    pub head: Linear,
    pub records: Vec<RunRecord>,
    /// Mean held-out WER over the last (up to) ten evaluation checkpoints.
    pub final_wer: f64,
    pub eval_wers: Vec<(u64, f64)>,
}

struct PreparedCorpus {
    feats: Vec<FeatureSequence>,
    labels: Vec<Vec<usize>>,
    train_pool: Vec<usize>,
    held: Vec<usize>,
}

fn prepare(
    corpus: &[Utterance],
    vocab: &Vocab,
    n_mels: usize,
    label_fraction: f64,
    seed: u64,
) -> Result<PreparedCorpus> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if !(0.0..=1.0).contains(&label_fraction) || label_fraction == 0.0 {
        return Err(Error::invalid("label_fraction must be in (0, 1]"));
    }
    let feats: Vec<FeatureSequence> = corpus
        .par_iter()
        .map(|u| log_mel(&u.waveform, n_mels))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> =
        corpus.iter().map(|u| vocab.encode(&u.transcript)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = corpus.iter().map(|u| u.id.clone()).collect();
    let (train, held) = heldout_split(&ids);
    // Drop utterances whose label cannot fit their frame count.
    let feasible = |i: &usize| {
        let t_prime = feats[*i].num_frames().div_ceil(4);
        let lab = &labels[*i];
        let repeats = lab.windows(2).filter(|w| w[0] == w[1]).count();
        !lab.is_empty() && t_prime >= lab.len() + repeats
    };
    let mut train: Vec<usize> = train.into_iter().filter(|i| feasible(i)).collect();
    let held: Vec<usize> = held.into_iter().filter(|i| feasible(i)).collect();
    if train.is_empty() || held.is_empty() {
        return Err(Error::invalid("corpus too small for a train/held-out split"));
    }
    if label_fraction < 1.0 {
        train.shuffle(&mut rng_for(seed, "label-subset", 0));
        let keep = ((train.len() as f64 * label_fraction).ceil() as usize).max(1);
        train.truncate(keep);
        train.sort_unstable();
    }
    Ok(PreparedCorpus { feats, labels, train_pool: train, held })
}

fn eval_chunk(chunk: &ChunkSpec) -> ResolvedChunk {
    match chunk {
        ChunkSpec::FullContext | ChunkSpec::Dynamic(_) => ResolvedChunk::Full,
        ChunkSpec::Fixed(c) => ResolvedChunk::Frames(*c),
    }
}

/// Corpus-level WER of greedy decodes over `indices`.
fn evaluate(
    model: &EncoderModel,
    head: &Linear,
    prep: &PreparedCorpus,
    indices: &[usize],
    resolved: ResolvedChunk,
) -> Result<f64> {
    let reports: Vec<(usize, usize)> = indices
        .par_iter()
        .map(|&i| -> Result<(usize, usize)> {
            let x0 = subsample(model, &prep.feats[i])?;
            let out = crate::encoder::encode_stream(model, &x0, resolved, 0)?;
            let logits = head.apply(&out.final_states);
            let hyp = greedy_decode(&log_softmax_rows(&logits));
            let rep = wer(&prep.labels[i], &hyp)?;
            Ok((rep.substitutions + rep.insertions + rep.deletions, rep.ref_words))
        })
        .collect::<Result<Vec<_>>>()?;
    let edits: usize = reports.iter().map(|r| r.0).sum();
    let words: usize = reports.iter().map(|r| r.1).sum();
    Ok(edits as f64 / words.max(1) as f64)
}

/// Per-utterance loss and gradients for one CTC training example. With
/// `trunk_grads` off, only the head receives gradient (frozen-trunk phase).
fn utterance_grads(
    model: &EncoderModel,
    head: &Linear,
    feats: &FeatureSequence,
    label: &[usize],
    resolved: ResolvedChunk,
    trunk_grads: bool,
) -> Result<(f64, usize, HeadedGrads)> {
    let x0 = subsample(model, feats)?;
    let (out, cache) = encode_cached(model, &x0, resolved, 0)?;
    let logits = head.apply(&out.final_states);
    let (loss, dz) = ctc_logits_grad(&logits, label)?;
    let mut grads = HeadedGrads::zeros(model, head);
    grads.head_w = out.final_states.t().dot(&dz);
    grads.head_b = dz.sum_axis(Axis(0));
    if trunk_grads {
        let d_final = dz.dot(&head.w.t());
        let (dx0, trunk) = encode_backward(model, &cache, &d_final);
        grads.trunk = trunk;
        let (dw, db) = subsample_backward(model, feats, &dx0);
        grads.trunk.subsample.w += &dw;
        grads.trunk.subsample.b += &db;
    }
    Ok((loss, label.len(), grads))
}

/// Attaches a CTC head and trains end to end; evaluation is greedy decoding
/// plus WER on the held-out split, and the reported WER is the mean of the
/// last ten evaluation checkpoints.
pub fn finetune(
    init: Option<&EncoderModel>,
    scratch_config: &EncoderConfig,
    corpus: &[Utterance],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mut model = match init {
        Some(m) => m.clone(),
        None => EncoderModel::init(scratch_config.clone(), child_seed(cfg.seed, "scratch", 0))?,
    };
    // The conv windowing mode is a forward-time choice; weights carry over.
    model.config.conv_mode = cfg.conv_mode;
    if model.config.input_dim != cfg.n_mels {
        return Err(Error::invalid(format!(
            "model expects input_dim {}, front-end produces {}",
            model.config.input_dim, cfg.n_mels
        )));
    }
    let prep = prepare(corpus, vocab, cfg.n_mels, cfg.label_fraction, cfg.seed)?;
    let v_out = vocab.size() + 1;
    let mut head = Linear::init(
        model.config.d_model,
        v_out,
        &mut rng_for(cfg.seed, "ctc-head-init", 0),
    );
    let eval_resolved = eval_chunk(&cfg.chunk);
    let mut records = Vec::new();
    let mut eval_wers: Vec<(u64, f64)> = Vec::new();

    if cfg.steps == 0 {
        let w = evaluate(&model, &head, &prep, &prep.held, eval_resolved)?;
        records.push(RunRecord::new("finetune", 0, "heldout_wer", w));
        return Ok(FinetuneOutcome { model, head, records, final_wer: w, eval_wers: vec![(0, w)] });
    }

    let warm = cfg.head_warmup_steps.min(cfg.steps);
    let head_len = head.w.len() + head.b.len();
    // The head is tiny; it takes a hotter learning rate than the trunk.
    let mut head_opt = AdamW::new(
        head_len,
        OptimConfig {
            lr: cfg.optim.lr * 5.0,
            warmup_steps: (warm / 5).max(1),
            total_steps: warm.max(1),
            weight_decay: 0.0,
            ..cfg.optim.clone()
        },
    );
    let mut optim_cfg = cfg.optim.clone();
    optim_cfg.total_steps = cfg.steps - warm;
    let flat_len = model.num_params() + head_len;
    let mut opt = AdamW::new(flat_len, optim_cfg);
    let mut best_wer = f64::INFINITY;
    let mut since_best = 0u64;

    for step in 0..cfg.steps {
        let frozen = step < warm;
        let resolved = sample_chunk(
            &mut rng_for(cfg.seed, "ft-chunk", step),
            Phase::Finetune,
            &cfg.chunk,
            cfg.allow_dynamic_chunk,
        )?;
        let batch = batch_indices(cfg.seed, step, &prep.train_pool, cfg.batch_utts);
        let per_utt: Vec<(f64, usize, HeadedGrads)> = batch
            .par_iter()
            .map(|&i| {
                utterance_grads(&model, &head, &prep.feats[i], &prep.labels[i], resolved, !frozen)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = HeadedGrads::zeros(&model, &head);
        let mut loss_sum = 0.0;
        let mut tok_sum = 0usize;
        for (loss, toks, g) in &per_utt {
            loss_sum += loss;
            tok_sum += toks;
            total.add(g);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Divergence(format!("CTC loss diverged at step {step}")));
        }
        let scale = 1.0 / tok_sum.max(1) as f64;
        total.scale(scale);
        if frozen {
            let mut flat: Vec<f64> =
                head.w.iter().copied().chain(head.b.iter().copied()).collect();
            let grads: Vec<f64> =
                total.head_w.iter().copied().chain(total.head_b.iter().copied()).collect();
            head_opt.step(&mut flat, &grads);
            let (rows, cols) = head.w.dim();
            for i in 0..rows {
                for j in 0..cols {
                    head.w[[i, j]] = flat[i * cols + j];
                }
            }
            for j in 0..head.b.len() {
                head.b[j] = flat[rows * cols + j];
            }
        } else {
            let mut flat = flat_with_head(&model.params, &head);
            opt.step(&mut flat, &total.to_flat());
            unflat_with_head(&mut model.params, &mut head, &flat);
        }

        let is_eval = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps;
        if is_eval {
            let train_loss = loss_sum * scale;
            let w = evaluate(&model, &head, &prep, &prep.held, eval_resolved)?;
            records.push(RunRecord::new("finetune", step + 1, "train_loss", train_loss));
            records.push(RunRecord::new("finetune", step + 1, "heldout_wer", w));
            // Checkpoints inside the frozen-head phase are reported but do
            // not count toward the final WER window or early stopping.
            if step + 1 <= warm {
                continue;
            }
            eval_wers.push((step + 1, w));
            if w + 1e-12 < best_wer {
                best_wer = w;
                since_best = 0;
            } else {
                since_best += 1;
                if let Some(patience) = cfg.early_stop_patience {
                    if since_best >= patience {
                        records.push(RunRecord::new("finetune", step + 1, "early_stop", 1.0));
                        break;
                    }
                }
            }
        }
    }

    if eval_wers.is_empty() {
        let w = evaluate(&model, &head, &prep, &prep.held, eval_resolved)?;
        records.push(RunRecord::new("finetune", cfg.steps, "heldout_wer", w));
        eval_wers.push((cfg.steps, w));
    }
    let tail = eval_wers.iter().rev().take(10).map(|(_, w)| *w).collect::<Vec<_>>();
    let final_wer = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(FinetuneOutcome { model, head, records, final_wer, eval_wers })
}
