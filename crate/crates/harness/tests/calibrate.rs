//! Trend calibration for the acceptance criteria (temporary; --ignored).

use std::time::Instant;
use tonelab::config::{ExperimentConfig, TargetMethod};
use tonelab::pipeline::{corpus_spec, gen_targets, run_finetune, run_pretrain, train_teacher};
use tonelab_core::signal::{synth_corpus, Utterance, Vocab};

fn base_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("synth.n_utts", "500"),
        ("synth.vocab", "8"),
        ("synth.style", "paired"),
        ("synth.min_phones", "4"),
        ("synth.max_phones", "8"),
        ("synth.phone_dur_ms", "160"),
        ("synth.noise_amp", "0.25"),
        ("model.layers", "4"),
        ("model.d_model", "32"),
        ("model.heads", "4"),
        ("model.ff_mult", "2"),
        ("model.n_mels", "40"),
        ("targets.k", "12"),
        ("pretrain.steps", "1500"),
        ("pretrain.batch", "8"),
        ("pretrain.lr", "2e-3"),
        ("pretrain.warmup", "150"),
        ("pretrain.span_len", "2"),
        ("pretrain.start_prob", "0.3"),
        ("pretrain.unmasked_weight", "0.5"),
        ("pretrain.chunk", "full"),
        ("pretrain.eval_interval", "300"),
        ("finetune.steps", "500"),
        ("finetune.batch", "8"),
        ("finetune.lr", "1e-3"),
        ("finetune.warmup", "50"),
        ("finetune.head_warmup", "150"),
        ("finetune.eval_interval", "25"),
        ("finetune.fraction", "0.1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

/// Labeled manifest: deterministic subset of the corpus (the supervised pool
/// is much smaller than the unlabeled pool, as in practice).
fn labeled_pool(corpus: &[Utterance], take: usize) -> Vec<Utterance> {
    corpus.iter().take(take).cloned().collect()
}

#[test]
#[ignore]
fn calibrate_criterion7() {
    for seed in [0u64, 1, 2] {
        let t0 = Instant::now();
        let cfg = base_cfg(seed);
        let corpus = synth_corpus(&corpus_spec(&cfg)).unwrap();
        let vocab = Vocab::default_tones();
        let labeled = labeled_pool(&corpus, 200);

        let teacher = train_teacher(&cfg, &labeled, &vocab).unwrap();
        let (cb, targets) =
            gen_targets(&cfg, TargetMethod::HubertCtc, &corpus, Some(&teacher.model)).unwrap();
        let pre = run_pretrain(&cfg, &corpus, &targets, cb.k()).unwrap();

        let tuned = run_finetune(&cfg, Some(&pre.model), &labeled, &vocab).unwrap();
        let scratch = run_finetune(&cfg, None, &labeled, &vocab).unwrap();
        let gap = 100.0 * (scratch.final_wer - tuned.final_wer) / scratch.final_wer.max(1e-9);
        println!(
            "seed {seed}: teacher {:.3} | pretrained {:.3} scratch {:.3} gap {gap:+.0}% | {:.0?}",
            teacher.final_wer,
            tuned.final_wer,
            scratch.final_wer,
            t0.elapsed()
        );
    }
}
