//! Parameter containers for the encoder.
//!
//! Gradients reuse the same containers ([`ParamSet`] of zeros), so the
//! optimizer and checkpoint writer walk one canonical traversal order.

use super::EncoderConfig;
use crate::rng::rng_for;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `y = x . w + b` with `w` laid out `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    pub fn init(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / n_in as f64).sqrt();
        let w = Array2::from_shape_fn((n_in, n_out), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Linear { w, b: Array1::zeros(n_out) }
    }

    /// `y = x . w + b`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn zeros(d: usize) -> Self {
        LayerNorm { gain: Array1::zeros(d), bias: Array1::zeros(d) }
    }

    fn init(d: usize) -> Self {
        LayerNorm { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub struct ConvModule {
    pub pw1: Linear,
    /// Depthwise taps, `[d_model, kernel]`.
    pub dw_weight: Array2<f64>,
    pub dw_bias: Array1<f64>,
    pub pw2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln_ff1: LayerNorm,
    pub ff1: FeedForward,
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_conv: LayerNorm,
    pub conv: ConvModule,
    pub ln_ff2: LayerNorm,
    pub ff2: FeedForward,
}

/// Every trainable array of the encoder trunk.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub subsample: Linear,
    pub mask_embedding: Array1<f64>,
    pub blocks: Vec<Block>,
}

/// Gradients share the parameter layout.
pub type EncoderGrads = ParamSet;

/// Borrowed view of one named parameter array.
pub enum ParamRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

pub enum ParamMut<'a> {
    V(&'a mut Array1<f64>),
    M(&'a mut Array2<f64>),
}

fn block_zeros(cfg: &EncoderConfig) -> Block {
    let d = cfg.d_model;
    let f = cfg.ff_mult * d;
    Block {
        ln_ff1: LayerNorm::zeros(d),
        ff1: FeedForward { lin1: Linear::zeros(d, f), lin2: Linear::zeros(f, d) },
        ln_attn: LayerNorm::zeros(d),
        attn: Attention {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
        },
        ln_conv: LayerNorm::zeros(d),
        conv: ConvModule {
            pw1: Linear::zeros(d, d),
            dw_weight: Array2::zeros((d, cfg.conv_kernel)),
            dw_bias: Array1::zeros(d),
            pw2: Linear::zeros(d, d),
        },
        ln_ff2: LayerNorm::zeros(d),
        ff2: FeedForward { lin1: Linear::zeros(d, f), lin2: Linear::zeros(f, d) },
    }
}

fn block_init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Block {
    let d = cfg.d_model;
    let f = cfg.ff_mult * d;
    Block {
        ln_ff1: LayerNorm::init(d),
        ff1: FeedForward { lin1: Linear::init(d, f, rng), lin2: Linear::init(f, d, rng) },
        ln_attn: LayerNorm::init(d),
        attn: Attention {
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
        },
        ln_conv: LayerNorm::init(d),
        conv: ConvModule {
            pw1: Linear::init(d, d, rng),
            dw_weight: {
                let scale = (1.0 / cfg.conv_kernel as f64).sqrt();
                Array2::from_shape_fn((d, cfg.conv_kernel), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
            },
            // Small random bias keeps ReLU-dead conv windows off the exact
            // kink, where subgradients are ambiguous.
            dw_bias: Array1::from_shape_fn(d, |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * 0.05
            }),
            pw2: Linear::init(d, d, rng),
        },
        ln_ff2: LayerNorm::init(d),
        ff2: FeedForward { lin1: Linear::init(d, f, rng), lin2: Linear::init(f, d, rng) },
    }
}

impl ParamSet {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        ParamSet {
            subsample: Linear::zeros(cfg.subsample_factor * cfg.input_dim, d),
            mask_embedding: Array1::zeros(d),
            blocks: (0..cfg.n_layers).map(|_| block_zeros(cfg)).collect(),
        }
    }

    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "encoder-init", 0);
        let d = cfg.d_model;
        ParamSet {
            subsample: Linear::init(cfg.subsample_factor * cfg.input_dim, d, &mut rng),
            mask_embedding: Array1::from_shape_fn(d, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.1
            }),
            blocks: (0..cfg.n_layers).map(|_| block_init(cfg, &mut rng)).collect(),
        }
    }

    /// Canonical traversal over (name, array) pairs.
    pub fn for_each(&self, f: &mut dyn FnMut(String, ParamRef<'_>)) {
        let lin = |f: &mut dyn FnMut(String, ParamRef<'_>), name: String, l: &Linear| {
            f(format!("{name}.w"), ParamRef::M(&l.w));
            f(format!("{name}.b"), ParamRef::V(&l.b));
        };
        let ln = |f: &mut dyn FnMut(String, ParamRef<'_>), name: String, l: &LayerNorm| {
            f(format!("{name}.gain"), ParamRef::V(&l.gain));
            f(format!("{name}.bias"), ParamRef::V(&l.bias));
        };
        lin(f, "subsample".into(), &self.subsample);
        f("mask_embedding".into(), ParamRef::V(&self.mask_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            ln(f, format!("{p}.ln_ff1"), &b.ln_ff1);
            lin(f, format!("{p}.ff1.lin1"), &b.ff1.lin1);
            lin(f, format!("{p}.ff1.lin2"), &b.ff1.lin2);
            ln(f, format!("{p}.ln_attn"), &b.ln_attn);
            lin(f, format!("{p}.attn.wq"), &b.attn.wq);
            lin(f, format!("{p}.attn.wk"), &b.attn.wk);
            lin(f, format!("{p}.attn.wv"), &b.attn.wv);
            lin(f, format!("{p}.attn.wo"), &b.attn.wo);
            ln(f, format!("{p}.ln_conv"), &b.ln_conv);
            lin(f, format!("{p}.conv.pw1"), &b.conv.pw1);
            f(format!("{p}.conv.dw_weight"), ParamRef::M(&b.conv.dw_weight));
            f(format!("{p}.conv.dw_bias"), ParamRef::V(&b.conv.dw_bias));
            lin(f, format!("{p}.conv.pw2"), &b.conv.pw2);
            ln(f, format!("{p}.ln_ff2"), &b.ln_ff2);
            lin(f, format!("{p}.ff2.lin1"), &b.ff2.lin1);
            lin(f, format!("{p}.ff2.lin2"), &b.ff2.lin2);
        }
    }

    /// Mutable traversal; must mirror [`ParamSet::for_each`] exactly.
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ParamMut<'_>)) {
        let lin = |f: &mut dyn FnMut(String, ParamMut<'_>), name: String, l: &mut Linear| {
            f(format!("{name}.w"), ParamMut::M(&mut l.w));
            f(format!("{name}.b"), ParamMut::V(&mut l.b));
        };
        let ln = |f: &mut dyn FnMut(String, ParamMut<'_>), name: String, l: &mut LayerNorm| {
            f(format!("{name}.gain"), ParamMut::V(&mut l.gain));
            f(format!("{name}.bias"), ParamMut::V(&mut l.bias));
        };
        lin(f, "subsample".into(), &mut self.subsample);
        f("mask_embedding".into(), ParamMut::V(&mut self.mask_embedding));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            ln(f, format!("{p}.ln_ff1"), &mut b.ln_ff1);
            lin(f, format!("{p}.ff1.lin1"), &mut b.ff1.lin1);
            lin(f, format!("{p}.ff1.lin2"), &mut b.ff1.lin2);
            ln(f, format!("{p}.ln_attn"), &mut b.ln_attn);
            lin(f, format!("{p}.attn.wq"), &mut b.attn.wq);
            lin(f, format!("{p}.attn.wk"), &mut b.attn.wk);
            lin(f, format!("{p}.attn.wv"), &mut b.attn.wv);
            lin(f, format!("{p}.attn.wo"), &mut b.attn.wo);
            ln(f, format!("{p}.ln_conv"), &mut b.ln_conv);
            lin(f, format!("{p}.conv.pw1"), &mut b.conv.pw1);
            f(format!("{p}.conv.dw_weight"), ParamMut::M(&mut b.conv.dw_weight));
            f(format!("{p}.conv.dw_bias"), ParamMut::V(&mut b.conv.dw_bias));
            lin(f, format!("{p}.conv.pw2"), &mut b.conv.pw2);
            ln(f, format!("{p}.ln_ff2"), &mut b.ln_ff2);
            lin(f, format!("{p}.ff2.lin1"), &mut b.ff2.lin1);
            lin(f, format!("{p}.ff2.lin2"), &mut b.ff2.lin2);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, p| {
            n += match p {
                ParamRef::V(v) => v.len(),
                ParamRef::M(m) => m.len(),
            }
        });
        n
    }

    /// Concatenates every array in traversal order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(&mut |_, p| match p {
            ParamRef::V(v) => out.extend(v.iter()),
            ParamRef::M(m) => out.extend(m.iter()),
        });
        out
    }

    /// Writes a flat vector back in traversal order.
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.for_each_mut(&mut |_, p| match p {
            ParamMut::V(v) => {
                for x in v.iter_mut() {
                    *x = flat[at];
                    at += 1;
                }
            }
            ParamMut::M(m) => {
                for x in m.iter_mut() {
                    *x = flat[at];
                    at += 1;
                }
            }
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// `self += c * other`, used for gradient accumulation.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) {
        let flat = other.to_flat();
        let mut at = 0;
        self.for_each_mut(&mut |_, p| match p {
            ParamMut::V(v) => {
                for x in v.iter_mut() {
                    *x += c * flat[at];
                    at += 1;
                }
            }
            ParamMut::M(m) => {
                for x in m.iter_mut() {
                    *x += c * flat[at];
                    at += 1;
                }
            }
        });
    }
}

/// Closed-form parameter count for a config.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.ff_mult * d;
    let k = cfg.conv_kernel;
    let sub = cfg.subsample_factor * cfg.input_dim * d + d;
    let ffn = 2 * (d * f + f + f * d + d);
    let attn = 4 * (d * d + d);
    let conv = (d * d + d) + (d * k + d) + (d * d + d);
    let lns = 4 * 2 * d;
    sub + d + cfg.n_layers * (lns + ffn + attn + conv)
}
