//! Shared training plumbing: trunk+head flattening for the optimizer and
//! deterministic batch composition.

use crate::encoder::{EncoderModel, Linear, ParamSet};
use crate::rng::rng_for;
use ndarray::{Array1, Array2};
use rand::Rng;

/// Flattens trunk parameters followed by a linear head.
pub(crate) fn flat_with_head(params: &ParamSet, head: &Linear) -> Vec<f64> {
    let mut flat = params.to_flat();
    flat.extend(head.w.iter());
    flat.extend(head.b.iter());
    flat
}

/// Writes a flat vector back into trunk and head.
pub(crate) fn unflat_with_head(params: &mut ParamSet, head: &mut Linear, flat: &[f64]) {
    let trunk_len = params.num_params();
    params.copy_from_flat(&flat[..trunk_len]);
    let (rows, cols) = head.w.dim();
    let mut at = trunk_len;
    for i in 0..rows {
        for j in 0..cols {
            head.w[[i, j]] = flat[at];
            at += 1;
        }
    }
    for j in 0..head.b.len() {
        head.b[j] = flat[at];
        at += 1;
    }
    assert_eq!(at, flat.len());
}

/// Gradient accumulator matching [`flat_with_head`] layout.
pub(crate) struct HeadedGrads {
    pub trunk: ParamSet,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl HeadedGrads {
    pub fn zeros(model: &EncoderModel, head: &Linear) -> Self {
        HeadedGrads {
            trunk: ParamSet::zeros(&model.config),
            head_w: Array2::zeros(head.w.dim()),
            head_b: Array1::zeros(head.b.len()),
        }
    }

    pub fn add(&mut self, other: &HeadedGrads) {
        self.trunk.add_scaled(&other.trunk, 1.0);
        self.head_w += &other.head_w;
        self.head_b += &other.head_b;
    }

    pub fn scale(&mut self, c: f64) {
        let flat = self.trunk.to_flat();
        let scaled: Vec<f64> = flat.iter().map(|v| v * c).collect();
        self.trunk.copy_from_flat(&scaled);
        self.head_w *= c;
        self.head_b *= c;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.trunk.to_flat();
        flat.extend(self.head_w.iter());
        flat.extend(self.head_b.iter());
        flat
    }
}

/// Deterministic batch of utterance indices for a step: sampled without
/// replacement when the pool is large enough, with replacement otherwise.
pub(crate) fn batch_indices(seed: u64, step: u64, pool: &[usize], batch: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, "batch", step);
    if pool.len() >= batch {
        // Partial Fisher-Yates over a copy.
        let mut pool: Vec<usize> = pool.to_vec();
        for i in 0..batch {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(batch);
        pool
    } else {
        (0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Numerically stable row-wise log-softmax.
pub(crate) fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn head_flattening_round_trips() {
        let cfg = EncoderConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            input_dim: 4,
            ..Default::default()
        };
        let model = EncoderModel::init(cfg.clone(), 5).unwrap();
        let mut rng = rng_for(6, "head", 0);
        let head = Linear::init(8, 5, &mut rng);
        let flat = flat_with_head(&model.params, &head);
        let mut p2 = ParamSet::zeros(&cfg);
        let mut h2 = Linear::zeros(8, 5);
        unflat_with_head(&mut p2, &mut h2, &flat);
        assert_eq!(p2.to_flat(), model.params.to_flat());
        assert_eq!(h2.w, head.w);
        assert_eq!(h2.b, head.b);
    }

    #[test]
    fn batches_are_deterministic_and_in_pool() {
        let pool: Vec<usize> = (10..50).collect();
        let a = batch_indices(3, 7, &pool, 8);
        let b = batch_indices(3, 7, &pool, 8);
        assert_eq!(a, b);
        assert!(a.iter().all(|i| pool.contains(i)));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len(), "no replacement when pool is large");
        let small: Vec<usize> = vec![1, 2];
        let c = batch_indices(3, 8, &small, 5);
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let z = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let lp = log_softmax_rows(&z);
        for row in lp.rows() {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
