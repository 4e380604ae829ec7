//! Command-line entry point.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tonelab::config::{ExperimentConfig, TargetMethod};
use tonelab::pipeline::{
    stage_filter, stage_finetune, stage_pretrain, stage_synth, stage_targets, Workspace,
};
use tonelab::{Error, Result};

#[derive(Parser)]
#[command(name = "tonelab", version, about = "Desk-scale speech-SSL experiment lab")]
struct Cli {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output / run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus.
    Synth,
    /// VAD-filter a corpus manifest into <out>/filtered.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "chunk-seconds")]
        chunk_seconds: Option<usize>,
        #[arg(long = "vad-db")]
        vad_db: Option<f64>,
    },
    /// Generate quantized pretraining targets.
    Targets {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// hubert_ctc | bestrq | mfcc
        #[arg(long)]
        method: Option<String>,
        /// Teacher checkpoint (hubert_ctc only).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Masked-prediction pretraining.
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory produced by `targets`.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// CTC fine-tuning (also how teacher checkpoints are made).
    Finetune {
        /// Checkpoint to initialize from; fresh weights when missing.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Labeled fraction of the training split, e.g. 1.0, 0.1, 0.01.
        #[arg(long)]
        fraction: Option<f64>,
        /// full | 8s | 4s | 2s | 1s | 200ms | dynamic
        #[arg(long)]
        chunk: Option<String>,
        /// standard | chunkwise-causal
        #[arg(long)]
        conv: Option<String>,
        /// Checkpoint file name inside <out>.
        #[arg(long = "out-ckpt", default_value = "finetuned.ckpt")]
        out_ckpt: String,
    },
    /// Linear-CTC probe of every encoder layer.
    Probe {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the experiment grid from the config's grid.* axes.
    Grid,
    /// Emit plot-ready CSVs from grid results in <out>.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn default_manifest(ws: &Workspace, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| ws.corpus_manifest())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let ws = Workspace::new(&cli.out, cfg);
            stage_synth(&ws)?;
            println!("corpus written to {}", ws.out.join("corpus").display());
        }
        Command::Filter { manifest, threshold, chunk_seconds, vad_db } => {
            if let Some(t) = threshold {
                cfg.filter.threshold = t;
            }
            if let Some(c) = chunk_seconds {
                cfg.filter.chunk_seconds = c;
            }
            if let Some(db) = vad_db {
                cfg.filter.vad_db = db;
            }
            let ws = Workspace::new(&cli.out, cfg);
            let report = stage_filter(&ws, &manifest)?;
            println!(
                "kept {}/{} chunks (fraction {:.3}); report at {}",
                report.kept_chunks,
                report.total_chunks,
                report.kept_fraction,
                ws.out.join("filter_report.csv").display()
            );
        }
        Command::Targets { manifest, method, teacher } => {
            if let Some(m) = method {
                cfg.targets.method = TargetMethod::parse(&m)?;
            }
            let ws = Workspace::new(&cli.out, cfg);
            let manifest = default_manifest(&ws, manifest);
            let teacher = teacher.unwrap_or_else(|| ws.teacher_ckpt());
            let dir = stage_targets(&ws, &manifest, &teacher)?;
            println!("targets written to {}", dir.display());
        }
        Command::Pretrain { manifest, targets } => {
            let ws = Workspace::new(&cli.out, cfg);
            let manifest = default_manifest(&ws, manifest);
            let targets = targets.unwrap_or_else(|| ws.targets_dir(ws.config.targets.method));
            let ckpt = stage_pretrain(&ws, &manifest, &targets)?;
            println!("pretrained checkpoint at {}", ckpt.display());
        }
        Command::Finetune { init, manifest, fraction, chunk, conv, out_ckpt } => {
            if let Some(f) = fraction {
                cfg.finetune.fraction = f;
            }
            if let Some(c) = chunk {
                cfg.set("finetune.chunk", &c)?;
            }
            if let Some(c) = conv {
                cfg.set("finetune.conv", &c)?;
            }
            let ws = Workspace::new(&cli.out, cfg);
            let manifest = default_manifest(&ws, manifest);
            let (ckpt, wer) = stage_finetune(&ws, &manifest, init.as_deref(), &out_ckpt)?;
            println!("fine-tuned checkpoint at {} (held-out WER {:.4})", ckpt.display(), wer);
        }
        Command::Probe { init, manifest } => {
            let ws = Workspace::new(&cli.out, cfg);
            let manifest = default_manifest(&ws, manifest);
            let corpus = tonelab_core::signal::load_corpus(&manifest)?;
            let (model, _) = tonelab_core::checkpoint::load_model(&init)?;
            let vocab = tonelab_core::signal::Vocab::tones(ws.config.synth.vocab_size)?;
            let result = tonelab::probe::probe_layers(
                &model,
                &corpus,
                &vocab,
                &ws.config.probe,
                ws.config.model.n_mels,
                ws.config.seed,
            )?;
            std::fs::create_dir_all(&ws.out)?;
            let mut w = csv::Writer::from_path(ws.out.join("probe.csv"))?;
            w.write_record(["layer", "heldout_wer"])?;
            for (layer, wer) in &result.wer_by_layer {
                w.write_record([layer.to_string(), format!("{wer:.6}")])?;
                println!("layer {layer}: held-out WER {wer:.4}");
            }
            w.flush()?;
        }
        Command::Grid => {
            let results = tonelab::grid::run_grid(&cfg, &cli.out)?;
            let done = results.iter().filter(|r| r.status == "done").count();
            let cached = results.iter().filter(|r| r.status == "cached").count();
            let failed = results.len() - done - cached;
            println!(
                "grid finished: {done} run, {cached} cached, {failed} failed; summary at {}",
                cli.out.join("summary.csv").display()
            );
        }
        Command::Report => {
            let cells_dir = cli.out.join("cells");
            let mut results = Vec::new();
            if cells_dir.exists() {
                for entry in std::fs::read_dir(&cells_dir)? {
                    let p = entry?.path().join("result.json");
                    if p.exists() {
                        let text = std::fs::read_to_string(&p)?;
                        results.push(
                            serde_json::from_str(&text)
                                .map_err(|e| Error::Config(e.to_string()))?,
                        );
                    }
                }
            }
            results.sort_by(|a: &tonelab::grid::CellResult, b: &tonelab::grid::CellResult| {
                a.hash.cmp(&b.hash)
            });
            tonelab::report::emit_plots_data(&results, &cli.out)?;
            tonelab::grid::write_summary(&results, &cli.out)?;
            println!(
                "reports written: {} cells -> plot_wer_vs_data.csv, plot_wer_vs_model.csv",
                results.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
