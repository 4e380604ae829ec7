//! Fine-tune recipe sweep on a fixed pretrained model (temporary).

use tonelab::config::{ExperimentConfig, TargetMethod};
use tonelab::pipeline::{corpus_spec, gen_targets, run_finetune, run_pretrain, train_teacher};
use tonelab_core::signal::{synth_corpus, Vocab};

fn base_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("synth.n_utts", "300"),
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
        ("pretrain.unmasked_weight", "1.0"),
        ("pretrain.chunk", "full"),
        ("pretrain.eval_interval", "300"),
        ("finetune.batch", "8"),
        ("finetune.eval_interval", "25"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

#[test]
#[ignore]
fn sweep_finetune_recipes() {
    for seed in [0u64, 2] {
        let cfg = base_cfg(seed);
        let corpus = synth_corpus(&corpus_spec(&cfg)).unwrap();
        let vocab = Vocab::default_tones();
        let teacher = train_teacher(&cfg, &corpus, &vocab).unwrap();
        println!("--- seed {seed} teacher WER {:.3}", teacher.final_wer);
        let (cb, targets) =
            gen_targets(&cfg, TargetMethod::HubertCtc, &corpus, Some(&teacher.model)).unwrap();
        let pre = run_pretrain(&cfg, &corpus, &targets, cb.k()).unwrap();

        let probes = tonelab::probe::probe_layers(
            &pre.model, &corpus, &vocab, &cfg.probe, cfg.model.n_mels, seed,
        )
        .unwrap();
        println!(
            "probe: {}",
            probes.wer_by_layer.iter().map(|(l, w)| format!("{l}:{w:.3}")).collect::<Vec<_>>().join(" ")
        );
        // (steps, lr, warmup(head), label)
        let recipes: [(u64, f64, u64, &str); 3] = [
            (500, 1e-3, 500, "frozen hot"),
            (800, 1e-3, 800, "frozen hot long"),
            (500, 1e-3, 150, "warm150 lr1e-3"),
        ];
        for fraction in [0.1, 0.05, 0.02] {
            for (steps, lr, warm, label) in recipes {
                let mut c = cfg.clone();
                c.finetune.steps = steps;
                c.finetune.lr = lr;
                c.finetune.head_warmup = warm;
                c.finetune.fraction = fraction;
                let tuned = run_finetune(&c, Some(&pre.model), &corpus, &vocab).unwrap();
                let scratch = run_finetune(&c, None, &corpus, &vocab).unwrap();
                println!(
                    "frac {fraction} {label}: pretrained {:.3} scratch {:.3} gap {:+.0}%",
                    tuned.final_wer,
                    scratch.final_wer,
                    100.0 * (scratch.final_wer - tuned.final_wer) / scratch.final_wer.max(1e-9)
                );
            }
        }
    }
}
