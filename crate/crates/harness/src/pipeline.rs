//! Stage drivers: each one reads/writes the run directory and appends
//! metrics rows tagged with the config hash.
//!
//! The in-memory entry points (`train_teacher`, `gen_targets`, `run_pretrain`,
//! `run_finetune`) are shared by the CLI stages, the grid runner and the
//! acceptance suite; the `stage_*` wrappers add file IO around them.

use crate::config::{ExperimentConfig, TargetMethod};
use crate::{Error, Result};
use std::path::{Path, PathBuf};
use std::time::Instant;
use tonelab_core::checkpoint::{load_model, save_model};
use tonelab_core::chunking::ChunkSpec;
use tonelab_core::ctc::{finetune, FinetuneConfig, FinetuneOutcome};
use tonelab_core::encoder::{ConvMode, EncoderModel};
use tonelab_core::optim::OptimConfig;
use tonelab_core::rng::child_seed;
use tonelab_core::run::RunRecord;
use tonelab_core::signal::{
    load_corpus, save_corpus, synth_corpus, CorpusSpec, Utterance, Vocab,
};
use tonelab_core::ssl::{pretrain, PretrainConfig, PretrainOutcome};
use tonelab_core::targets::{
    bestrq_targets, load_targets, mfcc_targets, save_targets, teacher_targets, Codebook,
    TargetSequence,
};
use tonelab_core::vadfilter::{filter_corpus, FilterReport};

/// A run directory plus the effective config.
pub struct Workspace {
    pub out: PathBuf,
    pub config: ExperimentConfig,
    pub hash: String,
}

impl Workspace {
    pub fn new(out: &Path, config: ExperimentConfig) -> Self {
        let hash = config.hash();
        Workspace { out: out.to_path_buf(), config, hash }
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.out.join("corpus").join(tonelab_core::signal::MANIFEST_NAME)
    }

    pub fn filtered_manifest(&self) -> PathBuf {
        self.out.join("filtered").join(tonelab_core::signal::MANIFEST_NAME)
    }

    pub fn teacher_ckpt(&self) -> PathBuf {
        self.out.join("teacher.ckpt")
    }

    pub fn targets_dir(&self, method: TargetMethod) -> PathBuf {
        self.out.join("targets").join(method.name())
    }

    pub fn pretrain_ckpt(&self, method: TargetMethod) -> PathBuf {
        self.out.join(format!("pretrained_{}.ckpt", method.name()))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    /// Appends records to `metrics.csv`, stamping hash and wall time.
    pub fn append_records(&self, records: &[RunRecord], wall_ms: u64) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.metrics_path();
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(["config_hash", "stage", "step", "metric", "value", "wall_ms"])?;
        }
        for r in records {
            w.write_record([
                self.hash.as_str(),
                r.stage.as_str(),
                &r.step.to_string(),
                r.metric.as_str(),
                &format!("{}", r.value),
                &wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the synthetic corpus spec for a config.
pub fn corpus_spec(cfg: &ExperimentConfig) -> CorpusSpec {
    CorpusSpec {
        n_utts: cfg.synth.n_utts,
        vocab_size: cfg.synth.vocab_size,
        min_len_phones: cfg.synth.min_phones,
        max_len_phones: cfg.synth.max_phones,
        phone_dur_ms: cfg.synth.phone_dur_ms,
        noise_amp: cfg.synth.noise_amp,
        freq_jitter: cfg.synth.freq_jitter,
        phone_style: if cfg.synth.paired_phones {
            tonelab_core::signal::PhoneStyle::Paired
        } else {
            tonelab_core::signal::PhoneStyle::Pure
        },
        silence_mix: cfg.synth.silence_mix,
        seed: cfg.seed,
    }
}

/// CTC-fine-tunes a fresh encoder on the full labeled corpus (full context,
/// standard convolutions): the teacher for HuBERT-CTC targets.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    corpus: &[Utterance],
    vocab: &Vocab,
) -> Result<FinetuneOutcome> {
    let ft = FinetuneConfig {
        steps: cfg.finetune.steps,
        batch_utts: cfg.finetune.batch_utts,
        optim: OptimConfig {
            lr: cfg.finetune.lr,
            warmup_steps: cfg.finetune.warmup_steps,
            total_steps: cfg.finetune.steps,
            weight_decay: cfg.finetune.weight_decay,
            ..Default::default()
        },
        eval_interval: cfg.finetune.eval_interval,
        early_stop_patience: None,
        label_fraction: 1.0,
        chunk: ChunkSpec::FullContext,
        conv_mode: ConvMode::Standard,
        allow_dynamic_chunk: false,
        head_warmup_steps: 0,
        n_mels: cfg.model.n_mels,
        seed: child_seed(cfg.seed, "teacher", 0),
    };
    let scratch = cfg.model.encoder_config(ConvMode::Standard);
    Ok(finetune(None, &scratch, corpus, vocab, &ft)?)
}

/// Produces quantized targets for a method. HuBERT-CTC requires the teacher.
pub fn gen_targets(
    cfg: &ExperimentConfig,
    method: TargetMethod,
    corpus: &[Utterance],
    teacher: Option<&EncoderModel>,
) -> Result<(Codebook, Vec<TargetSequence>)> {
    let seed = child_seed(cfg.seed, "targets", 0);
    match method {
        TargetMethod::HubertCtc => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config(
                    "HuBERT-CTC targets need a teacher checkpoint; run CTC fine-tuning on the \
                     full labeled corpus first (e.g. `tonelab finetune` saving teacher.ckpt)"
                        .into(),
                )
            })?;
            Ok(teacher_targets(
                teacher,
                corpus,
                cfg.targets.k,
                seed,
                cfg.targets.layer,
                cfg.model.n_mels,
            )?)
        }
        TargetMethod::Bestrq => {
            let feats = corpus
                .iter()
                .map(|u| tonelab_core::signal::log_mel(&u.waveform, cfg.model.n_mels))
                .collect::<tonelab_core::Result<Vec<_>>>()?;
            Ok(bestrq_targets(&feats, cfg.targets.k, cfg.targets.d_proj, seed)?)
        }
        TargetMethod::Mfcc => {
            Ok(mfcc_targets(corpus, cfg.targets.k, seed, cfg.targets.n_coeffs)?)
        }
    }
}

/// Masked-prediction pretraining with the config's policy.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    corpus: &[Utterance],
    targets: &[TargetSequence],
    k: usize,
) -> Result<PretrainOutcome> {
    let pt = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_utts: cfg.pretrain.batch_utts,
        optim: OptimConfig {
            lr: cfg.pretrain.lr,
            warmup_steps: cfg.pretrain.warmup_steps,
            total_steps: cfg.pretrain.steps,
            weight_decay: cfg.pretrain.weight_decay,
            ..Default::default()
        },
        span_len: cfg.pretrain.span_len,
        start_prob: cfg.pretrain.start_prob,
        unmasked_weight: cfg.pretrain.unmasked_weight,
        chunk_policy: cfg.pretrain.chunk.clone(),
        conv_mode: cfg.pretrain.conv,
        eval_interval: cfg.pretrain.eval_interval,
        n_mels: cfg.model.n_mels,
        seed: child_seed(cfg.seed, "pretrain", 0),
    };
    let model_cfg = cfg.model.encoder_config(cfg.pretrain.conv);
    Ok(pretrain(corpus, targets, k, &model_cfg, &pt)?)
}

/// Supervised fine-tuning from an optional initialization.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    init: Option<&EncoderModel>,
    corpus: &[Utterance],
    vocab: &Vocab,
) -> Result<FinetuneOutcome> {
    let patience = if cfg.finetune.early_stop_patience > 0 {
        Some(cfg.finetune.early_stop_patience)
    } else if cfg.finetune.fraction < 1.0 {
        // Few-shot fractions overfit quickly; stop on held-out WER.
        Some(4)
    } else {
        None
    };
    let ft = FinetuneConfig {
        steps: cfg.finetune.steps,
        batch_utts: cfg.finetune.batch_utts,
        optim: OptimConfig {
            lr: cfg.finetune.lr,
            warmup_steps: cfg.finetune.warmup_steps,
            total_steps: cfg.finetune.steps,
            weight_decay: cfg.finetune.weight_decay,
            ..Default::default()
        },
        eval_interval: cfg.finetune.eval_interval,
        early_stop_patience: patience,
        label_fraction: cfg.finetune.fraction,
        chunk: cfg.finetune.chunk.clone(),
        conv_mode: cfg.finetune.conv,
        allow_dynamic_chunk: cfg.finetune.allow_dynamic_chunk,
        head_warmup_steps: cfg.finetune.head_warmup,
        n_mels: cfg.model.n_mels,
        seed: child_seed(cfg.seed, "finetune", 0),
    };
    let scratch = cfg.model.encoder_config(cfg.finetune.conv);
    Ok(finetune(init, &scratch, corpus, vocab, &ft)?)
}

/// `synth`: writes the corpus directory and a digest record.
pub fn stage_synth(ws: &Workspace) -> Result<()> {
    let t0 = Instant::now();
    let corpus = synth_corpus(&corpus_spec(&ws.config))?;
    let dir = ws.out.join("corpus");
    save_corpus(&dir, &corpus)?;
    let records = vec![
        RunRecord::new("synth", 0, "n_utts", corpus.len() as f64),
        RunRecord::new("synth", 0, "total_ms", corpus.iter().map(|u| u.waveform.duration_ms()).sum::<u64>() as f64),
    ];
    ws.append_records(&records, t0.elapsed().as_millis() as u64)?;
    Ok(())
}

/// `filter`: VAD-filters a manifest into `<out>/filtered` plus a report CSV.
pub fn stage_filter(ws: &Workspace, manifest: &Path) -> Result<FilterReport> {
    let t0 = Instant::now();
    let corpus = load_corpus(manifest)?;
    let f = &ws.config.filter;
    let (kept, report) = filter_corpus(&corpus, f.chunk_seconds, f.threshold, f.vad_db)?;
    let kept_utts: Vec<Utterance> = kept.into_iter().map(|k| k.utterance).collect();
    save_corpus(&ws.out.join("filtered"), &kept_utts)?;
    let report_path = ws.out.join("filter_report.csv");
    let mut w = csv::Writer::from_path(&report_path)?;
    w.write_record(["utterance_id", "chunk_index", "silence_ratio", "kept"])?;
    for c in &report.chunks {
        w.write_record([
            c.utterance_id.as_str(),
            &c.chunk_index.to_string(),
            &format!("{}", c.silence_ratio),
            &(c.kept as u8).to_string(),
        ])?;
    }
    w.flush()?;
    let records = vec![
        RunRecord::new("filter", 0, "total_chunks", report.total_chunks as f64),
        RunRecord::new("filter", 0, "kept_chunks", report.kept_chunks as f64),
        RunRecord::new("filter", 0, "kept_fraction", report.kept_fraction),
    ];
    ws.append_records(&records, t0.elapsed().as_millis() as u64)?;
    Ok(report)
}

/// `targets`: generates quantized targets for the configured method.
pub fn stage_targets(ws: &Workspace, manifest: &Path, teacher_path: &Path) -> Result<PathBuf> {
    let t0 = Instant::now();
    let corpus = load_corpus(manifest)?;
    let method = ws.config.targets.method;
    let teacher = if method == TargetMethod::HubertCtc {
        if !teacher_path.exists() {
            return Err(Error::Config(format!(
                "teacher checkpoint not found at {}; run CTC fine-tuning on the full labeled \
                 corpus first and save it there",
                teacher_path.display()
            )));
        }
        Some(load_model(teacher_path)?.0)
    } else {
        None
    };
    let (codebook, seqs) = gen_targets(&ws.config, method, &corpus, teacher.as_ref())?;
    let dir = ws.targets_dir(method);
    let ids: Vec<String> = corpus.iter().map(|u| u.id.clone()).collect();
    save_targets(&dir, &ids, &seqs, &codebook)?;
    let distinct: std::collections::BTreeSet<u32> =
        seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let records = vec![
        RunRecord::new("targets", 0, "k", codebook.k() as f64),
        RunRecord::new("targets", 0, "distinct_tokens", distinct.len() as f64),
    ];
    ws.append_records(&records, t0.elapsed().as_millis() as u64)?;
    Ok(dir)
}

/// `pretrain`: loads corpus + targets, trains, saves the checkpoint.
pub fn stage_pretrain(ws: &Workspace, manifest: &Path, targets_dir: &Path) -> Result<PathBuf> {
    let t0 = Instant::now();
    let corpus = load_corpus(manifest)?;
    let (ids, seqs, codebook) = load_targets(targets_dir)?;
    let by_id: std::collections::HashMap<&str, &TargetSequence> =
        ids.iter().map(|s| s.as_str()).zip(seqs.iter()).collect();
    let ordered: Vec<TargetSequence> = corpus
        .iter()
        .map(|u| {
            by_id
                .get(u.id.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Config(format!("no targets for utterance {}", u.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = run_pretrain(&ws.config, &corpus, &ordered, codebook.k())?;
    let path = ws.pretrain_ckpt(ws.config.targets.method);
    save_model(&path, &out.model, &[])?;
    ws.append_records(&out.records, t0.elapsed().as_millis() as u64)?;
    Ok(path)
}

/// `finetune`: trains from an optional checkpoint and saves the result with
/// its CTC head.
pub fn stage_finetune(
    ws: &Workspace,
    manifest: &Path,
    init: Option<&Path>,
    out_ckpt: &str,
) -> Result<(PathBuf, f64)> {
    let t0 = Instant::now();
    let corpus = load_corpus(manifest)?;
    let vocab = Vocab::tones(ws.config.synth.vocab_size)?;
    let init_model = match init {
        Some(p) => Some(load_model(p)?.0),
        None => None,
    };
    let out = run_finetune(&ws.config, init_model.as_ref(), &corpus, &vocab)?;
    let path = ws.out.join(out_ckpt);
    save_model(
        &path,
        &out.model,
        &[
            ("head.w".to_string(), tonelab_core::checkpoint::Entry::M(out.head.w.clone())),
            ("head.b".to_string(), tonelab_core::checkpoint::Entry::V(out.head.b.clone())),
        ],
    )?;
    let mut records = out.records.clone();
    records.push(RunRecord::new("finetune", ws.config.finetune.steps, "final_wer", out.final_wer));
    ws.append_records(&records, t0.elapsed().as_millis() as u64)?;
    Ok((path, out.final_wer))
}
