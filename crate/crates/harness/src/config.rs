//! Experiment configuration: a documented key-value text file with typed
//! stage sections, strict unknown-key rejection, and a canonical hash that
//! tags every metrics row.

use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use tonelab_core::chunking::ChunkSpec;
use tonelab_core::encoder::{ConvMode, EncoderConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub phone_dur_ms: usize,
    pub noise_amp: f64,
    pub freq_jitter: f64,
    /// "pure" single tones or "paired" two-tone sequences.
    pub paired_phones: bool,
    pub silence_mix: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 400,
            vocab_size: 8,
            min_phones: 4,
            max_phones: 10,
            phone_dur_ms: 80,
            noise_amp: 0.05,
            freq_jitter: 0.0,
            paired_phones: false,
            silence_mix: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub chunk_seconds: usize,
    pub threshold: f64,
    pub vad_db: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { chunk_seconds: 60, threshold: 0.6, vad_db: -40.0 }
    }
}

/// Quantized-target generation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMethod {
    HubertCtc,
    Bestrq,
    Mfcc,
}

impl TargetMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hubert_ctc" | "hubert-ctc" | "teacher" | "teacher_kmeans" => Ok(TargetMethod::HubertCtc),
            "bestrq" | "best-rq" => Ok(TargetMethod::Bestrq),
            "mfcc" | "mfcc_kmeans" => Ok(TargetMethod::Mfcc),
            other => Err(Error::Config(format!("unknown target method `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetMethod::HubertCtc => "hubert_ctc",
            TargetMethod::Bestrq => "bestrq",
            TargetMethod::Mfcc => "mfcc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetsConfig {
    pub method: TargetMethod,
    pub k: usize,
    pub d_proj: usize,
    pub n_coeffs: usize,
    /// Teacher layer to cluster; None means the last layer.
    pub layer: Option<usize>,
}

impl Default for TargetsConfig {
    fn default() -> Self {
        TargetsConfig { method: TargetMethod::HubertCtc, k: 64, d_proj: 16, n_coeffs: 13, layer: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ff_mult: usize,
    pub n_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { layers: 4, d_model: 64, heads: 4, kernel: 5, ff_mult: 4, n_mels: 80 }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, conv_mode: ConvMode) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            n_heads: self.heads,
            conv_kernel: self.kernel,
            ff_mult: self.ff_mult,
            input_dim: self.n_mels,
            subsample_factor: 4,
            conv_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStage {
    pub steps: u64,
    pub batch_utts: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub span_len: usize,
    pub start_prob: f64,
    pub unmasked_weight: f64,
    pub chunk: ChunkSpec,
    pub conv: ConvMode,
    pub eval_interval: u64,
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            steps: 2000,
            batch_utts: 8,
            lr: 2e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            span_len: 10,
            start_prob: 0.065,
            unmasked_weight: 0.0,
            chunk: ChunkSpec::dynamic_default(),
            conv: ConvMode::Standard,
            eval_interval: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStage {
    pub steps: u64,
    pub batch_utts: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub fraction: f64,
    pub chunk: ChunkSpec,
    pub conv: ConvMode,
    pub eval_interval: u64,
    /// 0 disables early stopping.
    pub early_stop_patience: u64,
    pub allow_dynamic_chunk: bool,
    /// Trunk frozen for this many initial steps while the head settles.
    pub head_warmup: u64,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        FinetuneStage {
            steps: 800,
            batch_utts: 8,
            lr: 2e-3,
            warmup_steps: 80,
            weight_decay: 0.01,
            fraction: 1.0,
            chunk: ChunkSpec::FullContext,
            conv: ConvMode::Standard,
            eval_interval: 50,
            early_stop_patience: 0,
            allow_dynamic_chunk: false,
            head_warmup: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStage {
    pub steps: u64,
    pub batch_utts: usize,
    pub lr: f64,
    pub eval_interval: u64,
}

impl Default for ProbeStage {
    fn default() -> Self {
        ProbeStage { steps: 300, batch_utts: 8, lr: 5e-3, eval_interval: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridStage {
    pub methods: Vec<String>,
    pub fractions: Vec<f64>,
    pub pretrain_chunks: Vec<String>,
    pub finetune_chunks: Vec<String>,
    pub convs: Vec<String>,
    pub d_models: Vec<usize>,
    pub steps: Vec<u64>,
    pub data_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl GridStage {
    fn populated(&self) -> Self {
        let or = |v: &Vec<String>, d: &str| {
            if v.is_empty() {
                vec![d.to_string()]
            } else {
                v.clone()
            }
        };
        GridStage {
            methods: or(&self.methods, "scratch"),
            fractions: if self.fractions.is_empty() { vec![1.0] } else { self.fractions.clone() },
            pretrain_chunks: or(&self.pretrain_chunks, "full"),
            finetune_chunks: or(&self.finetune_chunks, "full"),
            convs: or(&self.convs, "standard"),
            d_models: if self.d_models.is_empty() { vec![64] } else { self.d_models.clone() },
            steps: if self.steps.is_empty() { vec![2000] } else { self.steps.clone() },
            data_sizes: if self.data_sizes.is_empty() { vec![400] } else { self.data_sizes.clone() },
            seeds: if self.seeds.is_empty() { vec![0] } else { self.seeds.clone() },
        }
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
    pub targets: TargetsConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainStage,
    pub finetune: FinetuneStage,
    pub probe: ProbeStage,
    pub grid: GridStage,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value for {key}: `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad value in {key}: `{s}`"))))
        .collect()
}

fn parse_conv(key: &str, v: &str) -> Result<ConvMode> {
    v.parse().map_err(|_| Error::Config(format!("bad conv mode for {key}: `{v}`")))
}

fn parse_chunk(key: &str, v: &str) -> Result<ChunkSpec> {
    ChunkSpec::parse(v).map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "synth.n_utts" => self.synth.n_utts = parse_num(key, v)?,
            "synth.vocab" => self.synth.vocab_size = parse_num(key, v)?,
            "synth.min_phones" => self.synth.min_phones = parse_num(key, v)?,
            "synth.max_phones" => self.synth.max_phones = parse_num(key, v)?,
            "synth.phone_dur_ms" => self.synth.phone_dur_ms = parse_num(key, v)?,
            "synth.noise_amp" => self.synth.noise_amp = parse_num(key, v)?,
            "synth.freq_jitter" => self.synth.freq_jitter = parse_num(key, v)?,
            "synth.style" => {
                self.synth.paired_phones = match v.trim() {
                    "pure" => false,
                    "paired" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "synth.style must be pure or paired, got `{other}`"
                        )))
                    }
                }
            }
            "synth.silence_mix" => self.synth.silence_mix = parse_num(key, v)?,
            "filter.chunk_seconds" => self.filter.chunk_seconds = parse_num(key, v)?,
            "filter.threshold" => self.filter.threshold = parse_num(key, v)?,
            "filter.vad_db" => self.filter.vad_db = parse_num(key, v)?,
            "targets.method" => self.targets.method = TargetMethod::parse(v)?,
            "targets.k" => self.targets.k = parse_num(key, v)?,
            "targets.d_proj" => self.targets.d_proj = parse_num(key, v)?,
            "targets.n_coeffs" => self.targets.n_coeffs = parse_num(key, v)?,
            "targets.layer" => {
                self.targets.layer =
                    if v == "last" { None } else { Some(parse_num(key, v)?) }
            }
            "model.layers" => self.model.layers = parse_num(key, v)?,
            "model.d_model" => self.model.d_model = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.kernel" => self.model.kernel = parse_num(key, v)?,
            "model.ff_mult" => self.model.ff_mult = parse_num(key, v)?,
            "model.n_mels" => self.model.n_mels = parse_num(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, v)?,
            "pretrain.batch" => self.pretrain.batch_utts = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.warmup" => self.pretrain.warmup_steps = parse_num(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse_num(key, v)?,
            "pretrain.span_len" => self.pretrain.span_len = parse_num(key, v)?,
            "pretrain.start_prob" => self.pretrain.start_prob = parse_num(key, v)?,
            "pretrain.unmasked_weight" => self.pretrain.unmasked_weight = parse_num(key, v)?,
            "pretrain.chunk" => self.pretrain.chunk = parse_chunk(key, v)?,
            "pretrain.conv" => self.pretrain.conv = parse_conv(key, v)?,
            "pretrain.eval_interval" => self.pretrain.eval_interval = parse_num(key, v)?,
            "finetune.steps" => self.finetune.steps = parse_num(key, v)?,
            "finetune.batch" => self.finetune.batch_utts = parse_num(key, v)?,
            "finetune.lr" => self.finetune.lr = parse_num(key, v)?,
            "finetune.warmup" => self.finetune.warmup_steps = parse_num(key, v)?,
            "finetune.weight_decay" => self.finetune.weight_decay = parse_num(key, v)?,
            "finetune.fraction" => self.finetune.fraction = parse_num(key, v)?,
            "finetune.chunk" => self.finetune.chunk = parse_chunk(key, v)?,
            "finetune.conv" => self.finetune.conv = parse_conv(key, v)?,
            "finetune.eval_interval" => self.finetune.eval_interval = parse_num(key, v)?,
            "finetune.early_stop" => self.finetune.early_stop_patience = parse_num(key, v)?,
            "finetune.head_warmup" => self.finetune.head_warmup = parse_num(key, v)?,
            "finetune.allow_dynamic_chunk" => {
                self.finetune.allow_dynamic_chunk = parse_num::<u8>(key, v)? != 0
            }
            "probe.steps" => self.probe.steps = parse_num(key, v)?,
            "probe.batch" => self.probe.batch_utts = parse_num(key, v)?,
            "probe.lr" => self.probe.lr = parse_num(key, v)?,
            "probe.eval_interval" => self.probe.eval_interval = parse_num(key, v)?,
            "grid.methods" => self.grid.methods = parse_list(key, v)?,
            "grid.fractions" => self.grid.fractions = parse_list(key, v)?,
            "grid.pretrain_chunks" => self.grid.pretrain_chunks = parse_list(key, v)?,
            "grid.finetune_chunks" => self.grid.finetune_chunks = parse_list(key, v)?,
            "grid.convs" => self.grid.convs = parse_list(key, v)?,
            "grid.d_models" => self.grid.d_models = parse_list(key, v)?,
            "grid.steps" => self.grid.steps = parse_list(key, v)?,
            "grid.data_sizes" => self.grid.data_sizes = parse_list(key, v)?,
            "grid.seeds" => self.grid.seeds = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Every effective setting as canonical `key = value` lines.
    pub fn canonical_lines(&self) -> String {
        let g = self.grid.populated();
        let mut s = String::new();
        let join_f = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let join_u = |v: &[u64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let join_us = |v: &[usize]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "synth.n_utts = {}", self.synth.n_utts);
        let _ = writeln!(s, "synth.vocab = {}", self.synth.vocab_size);
        let _ = writeln!(s, "synth.min_phones = {}", self.synth.min_phones);
        let _ = writeln!(s, "synth.max_phones = {}", self.synth.max_phones);
        let _ = writeln!(s, "synth.phone_dur_ms = {}", self.synth.phone_dur_ms);
        let _ = writeln!(s, "synth.noise_amp = {}", self.synth.noise_amp);
        let _ = writeln!(s, "synth.freq_jitter = {}", self.synth.freq_jitter);
        let _ = writeln!(
            s,
            "synth.style = {}",
            if self.synth.paired_phones { "paired" } else { "pure" }
        );
        let _ = writeln!(s, "synth.silence_mix = {}", self.synth.silence_mix);
        let _ = writeln!(s, "filter.chunk_seconds = {}", self.filter.chunk_seconds);
        let _ = writeln!(s, "filter.threshold = {}", self.filter.threshold);
        let _ = writeln!(s, "filter.vad_db = {}", self.filter.vad_db);
        let _ = writeln!(s, "targets.method = {}", self.targets.method.name());
        let _ = writeln!(s, "targets.k = {}", self.targets.k);
        let _ = writeln!(s, "targets.d_proj = {}", self.targets.d_proj);
        let _ = writeln!(s, "targets.n_coeffs = {}", self.targets.n_coeffs);
        let _ = writeln!(
            s,
            "targets.layer = {}",
            self.targets.layer.map(|l| l.to_string()).unwrap_or_else(|| "last".into())
        );
        let _ = writeln!(s, "model.layers = {}", self.model.layers);
        let _ = writeln!(s, "model.d_model = {}", self.model.d_model);
        let _ = writeln!(s, "model.heads = {}", self.model.heads);
        let _ = writeln!(s, "model.kernel = {}", self.model.kernel);
        let _ = writeln!(s, "model.ff_mult = {}", self.model.ff_mult);
        let _ = writeln!(s, "model.n_mels = {}", self.model.n_mels);
        let _ = writeln!(s, "pretrain.steps = {}", self.pretrain.steps);
        let _ = writeln!(s, "pretrain.batch = {}", self.pretrain.batch_utts);
        let _ = writeln!(s, "pretrain.lr = {}", self.pretrain.lr);
        let _ = writeln!(s, "pretrain.warmup = {}", self.pretrain.warmup_steps);
        let _ = writeln!(s, "pretrain.weight_decay = {}", self.pretrain.weight_decay);
        let _ = writeln!(s, "pretrain.span_len = {}", self.pretrain.span_len);
        let _ = writeln!(s, "pretrain.start_prob = {}", self.pretrain.start_prob);
        let _ = writeln!(s, "pretrain.unmasked_weight = {}", self.pretrain.unmasked_weight);
        let _ = writeln!(s, "pretrain.chunk = {}", self.pretrain.chunk);
        let _ = writeln!(s, "pretrain.conv = {}", self.pretrain.conv);
        let _ = writeln!(s, "pretrain.eval_interval = {}", self.pretrain.eval_interval);
        let _ = writeln!(s, "finetune.steps = {}", self.finetune.steps);
        let _ = writeln!(s, "finetune.batch = {}", self.finetune.batch_utts);
        let _ = writeln!(s, "finetune.lr = {}", self.finetune.lr);
        let _ = writeln!(s, "finetune.warmup = {}", self.finetune.warmup_steps);
        let _ = writeln!(s, "finetune.weight_decay = {}", self.finetune.weight_decay);
        let _ = writeln!(s, "finetune.fraction = {}", self.finetune.fraction);
        let _ = writeln!(s, "finetune.chunk = {}", self.finetune.chunk);
        let _ = writeln!(s, "finetune.conv = {}", self.finetune.conv);
        let _ = writeln!(s, "finetune.eval_interval = {}", self.finetune.eval_interval);
        let _ = writeln!(s, "finetune.early_stop = {}", self.finetune.early_stop_patience);
        let _ = writeln!(s, "finetune.head_warmup = {}", self.finetune.head_warmup);
        let _ = writeln!(
            s,
            "finetune.allow_dynamic_chunk = {}",
            self.finetune.allow_dynamic_chunk as u8
        );
        let _ = writeln!(s, "probe.steps = {}", self.probe.steps);
        let _ = writeln!(s, "probe.batch = {}", self.probe.batch_utts);
        let _ = writeln!(s, "probe.lr = {}", self.probe.lr);
        let _ = writeln!(s, "probe.eval_interval = {}", self.probe.eval_interval);
        let _ = writeln!(s, "grid.methods = {}", g.methods.join(","));
        let _ = writeln!(s, "grid.fractions = {}", join_f(&g.fractions));
        let _ = writeln!(s, "grid.pretrain_chunks = {}", g.pretrain_chunks.join(","));
        let _ = writeln!(s, "grid.finetune_chunks = {}", g.finetune_chunks.join(","));
        let _ = writeln!(s, "grid.convs = {}", g.convs.join(","));
        let _ = writeln!(s, "grid.d_models = {}", join_us(&g.d_models));
        let _ = writeln!(s, "grid.steps = {}", join_u(&g.steps));
        let _ = writeln!(s, "grid.data_sizes = {}", join_us(&g.data_sizes));
        let _ = writeln!(s, "grid.seeds = {}", join_u(&g.seeds));
        s
    }

    /// Hash of the effective configuration (first 16 hex chars).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_lines().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
