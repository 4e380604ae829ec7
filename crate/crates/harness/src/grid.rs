//! Experiment grid runner: expands axis lists into cells, executes each cell
//! end to end at desk scale, caches completed cells by config hash, and
//! writes tidy + pivoted summaries.

use crate::config::{ExperimentConfig, TargetMethod};
use crate::pipeline::{corpus_spec, gen_targets, run_finetune, run_pretrain, train_teacher};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use tonelab_core::signal::{synth_corpus, Vocab};

/// One grid cell: every axis pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: String,
    pub fraction: f64,
    pub pretrain_chunk: String,
    pub finetune_chunk: String,
    pub conv: String,
    pub d_model: usize,
    pub steps: u64,
    pub data_size: usize,
    pub seed: u64,
}

impl CellSpec {
    pub fn hash(&self, base: &ExperimentConfig) -> Result<String> {
        let cfg = self.apply(base)?;
        let mut h = Sha256::new();
        h.update(cfg.canonical_lines().as_bytes());
        h.update(format!("{self:?}").as_bytes());
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Derives the cell's effective config from the base config.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.seed = self.seed;
        cfg.synth.n_utts = self.data_size;
        cfg.model.d_model = self.d_model;
        cfg.pretrain.steps = self.steps;
        cfg.set("pretrain.chunk", &self.pretrain_chunk).map_err(cell_err)?;
        cfg.set("finetune.chunk", &self.finetune_chunk).map_err(cell_err)?;
        cfg.set("finetune.conv", &self.conv).map_err(cell_err)?;
        cfg.finetune.fraction = self.fraction;
        if self.method != "scratch" {
            cfg.targets.method = TargetMethod::parse(&self.method)?;
        }
        Ok(cfg)
    }
}

fn cell_err(e: Error) -> Error {
    Error::Config(format!("grid cell: {e}"))
}

/// Result row for one executed (or cached/failed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub hash: String,
    pub status: String,
    pub wer: f64,
}

/// Cross product of the grid axes.
pub fn expand_grid(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut g = cfg.grid.clone();
    if g.methods.is_empty() {
        g.methods = vec!["scratch".into()];
    }
    if g.fractions.is_empty() {
        g.fractions = vec![1.0];
    }
    if g.pretrain_chunks.is_empty() {
        g.pretrain_chunks = vec!["full".into()];
    }
    if g.finetune_chunks.is_empty() {
        g.finetune_chunks = vec!["full".into()];
    }
    if g.convs.is_empty() {
        g.convs = vec!["standard".into()];
    }
    if g.d_models.is_empty() {
        g.d_models = vec![cfg.model.d_model];
    }
    if g.steps.is_empty() {
        g.steps = vec![cfg.pretrain.steps];
    }
    if g.data_sizes.is_empty() {
        g.data_sizes = vec![cfg.synth.n_utts];
    }
    if g.seeds.is_empty() {
        g.seeds = vec![cfg.seed];
    }
    let mut cells = Vec::new();
    for method in &g.methods {
        for &fraction in &g.fractions {
            for pt in &g.pretrain_chunks {
                for ft in &g.finetune_chunks {
                    for conv in &g.convs {
                        for &d_model in &g.d_models {
                            for &steps in &g.steps {
                                for &data_size in &g.data_sizes {
                                    for &seed in &g.seeds {
                                        cells.push(CellSpec {
                                            method: method.clone(),
                                            fraction,
                                            pretrain_chunk: pt.clone(),
                                            finetune_chunk: ft.clone(),
                                            conv: conv.clone(),
                                            d_model,
                                            steps,
                                            data_size,
                                            seed,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Executes one cell in memory and returns its held-out WER.
pub fn run_cell(base: &ExperimentConfig, spec: &CellSpec) -> Result<f64> {
    let cfg = spec.apply(base)?;
    let corpus = synth_corpus(&corpus_spec(&cfg))?;
    let vocab = Vocab::tones(cfg.synth.vocab_size)?;
    let init = if spec.method == "scratch" {
        None
    } else {
        let method = TargetMethod::parse(&spec.method)?;
        let teacher = if method == TargetMethod::HubertCtc {
            Some(train_teacher(&cfg, &corpus, &vocab)?.model)
        } else {
            None
        };
        let (codebook, targets) = gen_targets(&cfg, method, &corpus, teacher.as_ref())?;
        let out = run_pretrain(&cfg, &corpus, &targets, codebook.k())?;
        Some(out.model)
    };
    let out = run_finetune(&cfg, init.as_ref(), &corpus, &vocab)?;
    Ok(out.final_wer)
}

/// Runs every cell, skipping ones already finished under `out/cells`, and
/// writes `summary.csv` plus the two pivot tables.
pub fn run_grid(base: &ExperimentConfig, out: &Path) -> Result<Vec<CellResult>> {
    let cells = expand_grid(base);
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let cells_dir = out.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    let mut results = Vec::with_capacity(cells.len());
    for spec in &cells {
        let hash = spec.hash(base)?;
        let cell_dir = cells_dir.join(&hash);
        let result_path = cell_dir.join("result.json");
        if result_path.exists() {
            let text = std::fs::read_to_string(&result_path)?;
            let mut cached: CellResult =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cached.status = "cached".into();
            results.push(cached);
            continue;
        }
        std::fs::create_dir_all(&cell_dir)?;
        match run_cell(base, spec) {
            Ok(wer) => {
                let res = CellResult {
                    spec: spec.clone(),
                    hash: hash.clone(),
                    status: "done".into(),
                    wer,
                };
                std::fs::write(
                    &result_path,
                    serde_json::to_string_pretty(&res).map_err(|e| Error::Config(e.to_string()))?,
                )?;
                results.push(res);
            }
            Err(e) => {
                // Record the failure and keep going.
                std::fs::write(cell_dir.join("error.txt"), e.to_string())?;
                results.push(CellResult {
                    spec: spec.clone(),
                    hash,
                    status: format!("failed: {e}"),
                    wer: f64::NAN,
                });
            }
        }
    }
    write_summary(&results, out)?;
    Ok(results)
}

/// Tidy summary plus method x fraction and chunk-grid pivots.
pub fn write_summary(results: &[CellResult], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record([
        "hash", "method", "fraction", "pretrain_chunk", "finetune_chunk", "conv", "d_model",
        "steps", "data_size", "seed", "status", "wer",
    ])?;
    for r in results {
        w.write_record([
            r.hash.as_str(),
            r.spec.method.as_str(),
            &format!("{}", r.spec.fraction),
            r.spec.pretrain_chunk.as_str(),
            r.spec.finetune_chunk.as_str(),
            r.spec.conv.as_str(),
            &r.spec.d_model.to_string(),
            &r.spec.steps.to_string(),
            &r.spec.data_size.to_string(),
            &r.spec.seed.to_string(),
            r.status.as_str(),
            &format!("{}", r.wer),
        ])?;
    }
    w.flush()?;

    // Pivot 1: methods (rows) x label fractions (columns), means over seeds.
    let ok = |r: &&CellResult| r.wer.is_finite();
    let mut fractions: Vec<f64> = results.iter().filter(ok).map(|r| r.spec.fraction).collect();
    fractions.sort_by(|a, b| b.partial_cmp(a).unwrap());
    fractions.dedup();
    let mut methods: Vec<String> =
        results.iter().filter(ok).map(|r| r.spec.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut w = csv::Writer::from_path(out.join("pivot_methods.csv"))?;
    let mut header = vec!["method".to_string()];
    header.extend(fractions.iter().map(|f| format!("{f}")));
    w.write_record(&header)?;
    for m in &methods {
        let mut row = vec![m.clone()];
        for &f in &fractions {
            let vals: Vec<f64> = results
                .iter()
                .filter(ok)
                .filter(|r| &r.spec.method == m && r.spec.fraction == f)
                .map(|r| r.wer)
                .collect();
            row.push(if vals.is_empty() {
                "-".into()
            } else {
                format!("{:.4}", vals.iter().sum::<f64>() / vals.len() as f64)
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    // Pivot 2: fine-tuning chunk groups x pretraining chunking, one column
    // per conv mode.
    let mut w = csv::Writer::from_path(out.join("pivot_chunks.csv"))?;
    w.write_record(["finetune_chunk", "pretrain_chunk", "standard", "chunkwise-causal"])?;
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results.iter().filter(ok) {
        let key = (r.spec.finetune_chunk.clone(), r.spec.pretrain_chunk.clone());
        let slot = groups.entry(key).or_default();
        if r.spec.conv == "chunkwise-causal" {
            slot.1.push(r.wer);
        } else {
            slot.0.push(r.wer);
        }
    }
    let fmt = |v: &[f64]| {
        if v.is_empty() {
            "-".to_string()
        } else {
            format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    for ((ft, pt), (std_w, str_w)) in &groups {
        w.write_record([ft.as_str(), pt.as_str(), &fmt(std_w), &fmt(str_w)])?;
    }
    w.flush()?;
    Ok(())
}
