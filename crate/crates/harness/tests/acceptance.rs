//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with --nocapture; the test harness result line
//! mirrors it).
//!
//! Training-based criteria use pinned seeds and desk-scale configs, so every
//! run is a deterministic computation, not a statistical sample.

use ndarray::Array2;
use rand::Rng;
use std::time::Instant;
use tonelab::config::{ExperimentConfig, TargetMethod};
use tonelab::pipeline::{corpus_spec, gen_targets, run_finetune, run_pretrain, train_teacher};
use tonelab::probe::probe_layers;
use tonelab_core::chunking::{measure_receptive_field, ResolvedChunk};
use tonelab_core::ctc::{ctc_loss, finetune};
use tonelab_core::encoder::{
    encode_stream, forward, stream_forward, ConvMode, EncoderConfig, EncoderModel,
};
use tonelab_core::rng::rng_for;
use tonelab_core::signal::{synth_corpus, CorpusSpec, FeatureKind, FeatureSequence, Vocab};
use tonelab_core::vadfilter::{filter_corpus, DEFAULT_SILENCE_THRESHOLD, DEFAULT_VAD_DB};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_features(t: usize, d: usize, seed: u64) -> FeatureSequence {
    let mut rng = rng_for(seed, "acc-feat", 0);
    FeatureSequence {
        frames: Array2::from_shape_fn((t, d), |_| rng.random::<f64>() - 0.5),
        frame_hop_ms: 10,
        frame_len_ms: 25,
        kind: FeatureKind::LogMel,
    }
}

/// Criterion 1: CTC DP equals brute-force alignment enumeration.
#[test]
fn criterion_01_ctc_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = rng_for(0xacc, "ctc-oracle", 0);
    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    while checked < 200 {
        let t = rng.random_range(1..=6usize);
        let v = rng.random_range(1..=3usize);
        let ll = rng.random_range(1..=t.min(3));
        let label: Vec<usize> = (0..ll).map(|_| rng.random_range(1..=v)).collect();
        let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
        if t < label.len() + repeats {
            continue;
        }
        let logits = Array2::from_shape_fn((t, v + 1), |_| rng.random::<f64>() * 4.0 - 2.0);
        let probs = log_softmax(&logits);
        let dp = ctc_loss(&probs, &label).unwrap();
        let oracle = enumeration_ctc(&probs, &label);
        max_err = max_err.max((dp - oracle).abs());
        checked += 1;
    }
    let elapsed = t0.elapsed();
    let pass = max_err < 1e-9 && elapsed.as_secs_f64() < 5.0;
    report(
        "1 (CTC oracle equivalence)",
        pass,
        &format!("{checked} instances, max |dp - enum| = {max_err:.2e}, {elapsed:.2?} (< 5 s)"),
    );
}

fn log_softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Independent oracle: enumerate all (V+1)^T frame labelings.
fn enumeration_ctc(probs: &Array2<f64>, label: &[usize]) -> f64 {
    let t_len = probs.nrows();
    let v_plus_1 = probs.ncols();
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != 0 {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == label {
            total += path.iter().enumerate().map(|(t, &p)| probs[[t, p]]).sum::<f64>().exp();
        }
        let mut t = 0;
        loop {
            if t == t_len {
                return -total.ln();
            }
            path[t] += 1;
            if path[t] < v_plus_1 {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Criterion 2: finite-difference gradient checks for the CTC-head and
/// masked-CE paths, both conv modes, chunked and full-context masks.
#[test]
fn criterion_02_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    for (mode, resolved, tag) in [
        (ConvMode::Standard, ResolvedChunk::Full, "standard/full"),
        (ConvMode::Standard, ResolvedChunk::Frames(2), "standard/chunk2"),
        (ConvMode::ChunkwiseCausal, ResolvedChunk::Full, "causal/full"),
        (ConvMode::ChunkwiseCausal, ResolvedChunk::Frames(2), "causal/chunk2"),
    ] {
        let ctc_err = fd_check_ctc_path(mode, resolved, 800 + tag.len() as u64);
        let ce_err = fd_check_masked_ce_path(mode, resolved, 900 + tag.len() as u64);
        cases.push(format!("{tag}: ctc {ctc_err:.2e}, masked-ce {ce_err:.2e}"));
        worst = worst.max(ctc_err).max(ce_err);
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-4 && elapsed.as_secs_f64() < 60.0;
    report(
        "2 (gradient correctness)",
        pass,
        &format!("max rel err {worst:.2e} over [{}], {elapsed:.2?} (< 60 s)", cases.join("; ")),
    );
}

fn tiny_model(mode: ConvMode, seed: u64) -> EncoderModel {
    EncoderModel::init(
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            conv_kernel: 5,
            ff_mult: 2,
            input_dim: 6,
            subsample_factor: 4,
            conv_mode: mode,
        },
        seed,
    )
    .unwrap()
}

/// Flattens (trunk, head) params, computes the loss analytically and by
/// central differences, and returns the max relative error.
fn fd_over_params<L>(
    model: &EncoderModel,
    head: &tonelab_core::encoder::Linear,
    analytic: &[f64],
    loss_of: L,
) -> f64
where
    L: Fn(&EncoderModel, &tonelab_core::encoder::Linear) -> f64,
{
    let trunk_len = model.num_params();
    let base: Vec<f64> = model
        .params
        .to_flat()
        .into_iter()
        .chain(head.w.iter().copied())
        .chain(head.b.iter().copied())
        .collect();
    assert_eq!(base.len(), analytic.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut pv = base.clone();
        pv[i] += h;
        let (mp, hp) = write_back(model, head, &pv, trunk_len);
        let plus = loss_of(&mp, &hp);
        pv[i] = base[i] - h;
        let (mm, hm) = write_back(model, head, &pv, trunk_len);
        let minus = loss_of(&mm, &hm);
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

fn write_back(
    model: &EncoderModel,
    head: &tonelab_core::encoder::Linear,
    flat: &[f64],
    trunk_len: usize,
) -> (EncoderModel, tonelab_core::encoder::Linear) {
    let mut m = model.clone();
    m.params.copy_from_flat(&flat[..trunk_len]);
    let mut h = head.clone();
    let (rows, cols) = h.w.dim();
    for i in 0..rows {
        for j in 0..cols {
            h.w[[i, j]] = flat[trunk_len + i * cols + j];
        }
    }
    for j in 0..h.b.len() {
        h.b[j] = flat[trunk_len + rows * cols + j];
    }
    (m, h)
}

fn fd_check_ctc_path(mode: ConvMode, resolved: ResolvedChunk, seed: u64) -> f64 {
    use ndarray::Axis;
    use tonelab_core::encoder::{encode_backward, encode_cached, subsample, subsample_backward};
    let model = tiny_model(mode, seed);
    let head = tonelab_core::encoder::Linear::init(8, 4, &mut rng_for(seed, "acc-ctc-head", 0));
    let feats = random_features(12, 6, seed);
    let label = vec![1usize, 3];
    // Analytic gradients.
    let x0 = subsample(&model, &feats).unwrap();
    let (out, cache) = encode_cached(&model, &x0, resolved, 0).unwrap();
    let logits = head.apply(&out.final_states);
    let (_, dz) = tonelab_core::ctc::ctc_logits_grad(&logits, &label).unwrap();
    let dhead_w = out.final_states.t().dot(&dz);
    let dhead_b = dz.sum_axis(Axis(0));
    let d_final = dz.dot(&head.w.t());
    let (dx0, mut trunk) = encode_backward(&model, &cache, &d_final);
    let (dw, db) = subsample_backward(&model, &feats, &dx0);
    trunk.subsample.w += &dw;
    trunk.subsample.b += &db;
    let analytic: Vec<f64> = trunk
        .to_flat()
        .into_iter()
        .chain(dhead_w.iter().copied())
        .chain(dhead_b.iter().copied())
        .collect();
    fd_over_params(&model, &head, &analytic, |m, h| {
        let out = forward(m, &feats, resolved).unwrap();
        let logits = h.apply(&out.final_states);
        tonelab_core::ctc::ctc_loss(&log_softmax(&logits), &label).unwrap()
    })
}

fn fd_check_masked_ce_path(mode: ConvMode, resolved: ResolvedChunk, seed: u64) -> f64 {
    use ndarray::Axis;
    use tonelab_core::encoder::{encode_backward, encode_cached, subsample, subsample_backward};
    use tonelab_core::ssl::{apply_mask, masked_ce_grad, MaskPlan};
    let model = tiny_model(mode, seed);
    let k = 5usize;
    let head = tonelab_core::encoder::Linear::init(8, k, &mut rng_for(seed, "acc-ce-head", 0));
    let feats = random_features(12, 6, seed + 1);
    let targets: Vec<u32> = vec![1, 4, 2];
    let plan = MaskPlan { masked: vec![0, 2], span_len: 2, start_prob: 0.5 };
    let loss_of = |m: &EncoderModel, h: &tonelab_core::encoder::Linear| {
        let x0 = subsample(m, &feats).unwrap();
        let x0m = apply_mask(&x0, &plan, &m.params.mask_embedding).unwrap();
        let out = encode_stream(m, &x0m, resolved, 0).unwrap();
        let logits = h.apply(&out.final_states);
        tonelab_core::ssl::masked_ce_loss(&logits, &targets, &plan).unwrap()
    };
    // Analytic gradients, mirroring the training path.
    let x0 = subsample(&model, &feats).unwrap();
    let x0m = apply_mask(&x0, &plan, &model.params.mask_embedding).unwrap();
    let (out, cache) = encode_cached(&model, &x0m, resolved, 0).unwrap();
    let logits = head.apply(&out.final_states);
    let (_, dz, _) = masked_ce_grad(&logits, &targets, &plan).unwrap();
    let dhead_w = out.final_states.t().dot(&dz);
    let dhead_b = dz.sum_axis(Axis(0));
    let d_final = dz.dot(&head.w.t());
    let (dx0m, mut trunk) = encode_backward(&model, &cache, &d_final);
    let mut dx0_unmasked = dx0m.clone();
    for &i in &plan.masked {
        for (g, v) in trunk.mask_embedding.iter_mut().zip(dx0m.row(i)) {
            *g += v;
        }
        dx0_unmasked.row_mut(i).fill(0.0);
    }
    let (dw, db) = subsample_backward(&model, &feats, &dx0_unmasked);
    trunk.subsample.w += &dw;
    trunk.subsample.b += &db;
    let analytic: Vec<f64> = trunk
        .to_flat()
        .into_iter()
        .chain(dhead_w.iter().copied())
        .chain(dhead_b.iter().copied())
        .collect();
    fd_over_params(&model, &head, &analytic, loss_of)
}

/// Criterion 3: streaming equals batch for every canonical chunk size on
/// 400-frame random inputs.
#[test]
fn criterion_03_streaming_equivalence() {
    let t0 = Instant::now();
    let model = EncoderModel::init(
        EncoderConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            conv_kernel: 5,
            ff_mult: 2,
            input_dim: 12,
            subsample_factor: 4,
            conv_mode: ConvMode::ChunkwiseCausal,
        },
        3,
    )
    .unwrap();
    // 1600 feature frames -> 400 encoder frames.
    let feats = random_features(1600, 12, 30);
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for chunk in [5usize, 25, 50, 100, 200] {
        let batch = forward(&model, &feats, ResolvedChunk::Frames(chunk)).unwrap();
        let stream = stream_forward(&model, &feats, chunk).unwrap();
        let diff = (&batch.final_states - &stream)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        details.push(format!("chunk {chunk}: {diff:.2e}"));
        worst = worst.max(diff);
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-6 && elapsed.as_secs_f64() < 30.0;
    report(
        "3 (streaming equivalence)",
        pass,
        &format!("max abs diff {worst:.2e} [{}], {elapsed:.2?} (< 30 s)", details.join(", ")),
    );
}

/// Criterion 4: chunkwise-causal future context is exactly zero past the
/// probe frame's chunk end, at depths 1-4.
#[test]
fn criterion_04_future_context_bound() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    let chunk = 5usize;
    let t = 40usize;
    for depth in 1..=4usize {
        let model = EncoderModel::init(
            EncoderConfig {
                n_layers: depth,
                d_model: 16,
                n_heads: 2,
                conv_kernel: 5,
                ff_mult: 2,
                input_dim: 8,
                subsample_factor: 4,
                conv_mode: ConvMode::ChunkwiseCausal,
            },
            40 + depth as u64,
        )
        .unwrap();
        let mut rng = rng_for(41, "c4-input", depth as u64);
        let base = Array2::from_shape_fn((t, 16), |_| rng.random::<f64>() - 0.5);
        let base_out = encode_stream(&model, &base, ResolvedChunk::Frames(chunk), 0).unwrap();
        // Probe each frame; perturb every frame past its chunk end.
        let mut max_leak = 0.0f64;
        for probe in [0usize, 3, 7, 12] {
            let chunk_end = (probe / chunk + 1) * chunk - 1;
            for f in (chunk_end + 1)..t {
                let mut x = base.clone();
                for v in x.row_mut(f) {
                    *v += 2.5;
                }
                let out = encode_stream(&model, &x, ResolvedChunk::Frames(chunk), 0).unwrap();
                let diff = out
                    .final_states
                    .row(probe)
                    .iter()
                    .zip(base_out.final_states.row(probe))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                max_leak = max_leak.max(diff);
            }
        }
        details.push(format!("depth {depth}: leak {max_leak:.1e}"));
        pass &= max_leak == 0.0;
    }
    let elapsed = t0.elapsed();
    pass &= elapsed.as_secs_f64() < 60.0;
    report(
        "4 (future-context bound)",
        pass,
        &format!("{} , {elapsed:.2?} (< 60 s)", details.join("; ")),
    );
}

/// Criterion 5: under standard convs + chunk attention the measured future
/// extent strictly grows with depth and stays within L*(c+2).
#[test]
fn criterion_05_longform_receptive_field_growth() {
    let t0 = Instant::now();
    let chunk = 5usize;
    let t = 80usize;
    let probe = 10usize;
    let mut prev = 0usize;
    let mut pass = true;
    let mut details = Vec::new();
    for depth in 1..=4usize {
        let model = EncoderModel::init(
            EncoderConfig {
                n_layers: depth,
                d_model: 16,
                n_heads: 2,
                conv_kernel: 5,
                ff_mult: 2,
                input_dim: 8,
                subsample_factor: 4,
                conv_mode: ConvMode::Standard,
            },
            50 + depth as u64,
        )
        .unwrap();
        let (_, future) =
            measure_receptive_field(&model, t, probe, ResolvedChunk::Frames(chunk)).unwrap();
        let bound = depth * (chunk + 2);
        details.push(format!("L={depth}: future {future} (bound {bound})"));
        pass &= future > prev && future <= bound;
        prev = future;
    }
    let elapsed = t0.elapsed();
    pass &= elapsed.as_secs_f64() < 120.0;
    report(
        "5 (long-form receptive field growth)",
        pass,
        &format!("{} , {elapsed:.2?} (< 2 min)", details.join("; ")),
    );
}

/// Criterion 6: VAD keep/discard decisions match constructed ground truth
/// exactly and a 20%-over-threshold corpus keeps exactly 80%.
#[test]
fn criterion_06_vad_filter_exactness() {
    let t0 = Instant::now();
    let corpus = synth_corpus(&CorpusSpec {
        n_utts: 50,
        vocab_size: 8,
        min_len_phones: 4,
        max_len_phones: 8,
        phone_dur_ms: 80,
        noise_amp: 0.05,
        freq_jitter: 0.0,
        phone_style: tonelab_core::signal::PhoneStyle::Pure,
        silence_mix: 0.2,
        seed: 60,
    })
    .unwrap();
    let (kept, rep) =
        filter_corpus(&corpus, 60, DEFAULT_SILENCE_THRESHOLD, DEFAULT_VAD_DB).unwrap();
    let mut decisions_ok = true;
    for (utt, chunk) in corpus.iter().zip(&rep.chunks) {
        let should_discard = !utt.silence_spans.is_empty();
        decisions_ok &= chunk.kept == !should_discard;
    }
    let exact_fraction = rep.kept_fraction == 0.8;
    let elapsed = t0.elapsed();
    let pass =
        decisions_ok && exact_fraction && kept.len() == 40 && elapsed.as_secs_f64() < 10.0;
    report(
        "6 (VAD filter exactness)",
        pass,
        &format!(
            "decisions exact: {decisions_ok}, kept_fraction {} (want 0.8 exactly), {elapsed:.2?} (< 10 s)",
            rep.kept_fraction
        ),
    );
}

/// Criterion 11: bit-exact reruns for every stage (checkpoints byte-for-byte,
/// metric values exactly equal; wall_ms excluded as inherently wall-clock).
#[test]
fn criterion_11_determinism() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("synth.n_utts", "60"),
        ("synth.phone_dur_ms", "80"),
        ("model.layers", "2"),
        ("model.d_model", "16"),
        ("model.heads", "2"),
        ("model.ff_mult", "2"),
        ("model.n_mels", "20"),
        ("targets.k", "8"),
        ("targets.method", "mfcc"),
        ("pretrain.steps", "40"),
        ("pretrain.eval_interval", "20"),
        ("pretrain.chunk", "full"),
        ("finetune.steps", "40"),
        ("finetune.eval_interval", "20"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = 77;
    let vocab = Vocab::default_tones();

    let run_once = || {
        let corpus = synth_corpus(&corpus_spec(&cfg)).unwrap();
        let digest = tonelab_core::signal::corpus_digest(&corpus);
        let (kept, rep) = filter_corpus(&corpus, 60, 0.6, -40.0).unwrap();
        let (cb, targets) = gen_targets(&cfg, TargetMethod::Mfcc, &corpus, None).unwrap();
        let pre = run_pretrain(&cfg, &corpus, &targets, cb.k()).unwrap();
        let tuned = run_finetune(&cfg, Some(&pre.model), &corpus, &vocab).unwrap();
        let pre_metrics: Vec<(String, u64, String)> = pre
            .records
            .iter()
            .map(|r| (r.stage.clone(), r.step, format!("{}:{}", r.metric, r.value)))
            .collect();
        let ft_metrics: Vec<(String, u64, String)> = tuned
            .records
            .iter()
            .map(|r| (r.stage.clone(), r.step, format!("{}:{}", r.metric, r.value)))
            .collect();
        (
            digest,
            kept.len(),
            rep.kept_fraction,
            cb.digest(),
            pre.model.params.to_flat(),
            tuned.model.params.to_flat(),
            pre_metrics,
            ft_metrics,
            tuned.final_wer,
        )
    };
    let a = run_once();
    let b = run_once();
    let pass = a == b;
    let elapsed = t0.elapsed();
    report(
        "11 (determinism)",
        pass,
        &format!(
            "synth/filter/targets/pretrain/finetune reruns identical: {pass}, {elapsed:.2?}"
        ),
    );
}
