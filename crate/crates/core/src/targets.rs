//! Quantized-target generation: deterministic k-means (k-means++ plus Lloyd
//! iterations), the frozen random quantizer, teacher-state clustering and
//! MFCC clustering, all frame-synchronous with the encoder output rate.

use crate::checkpoint::{load_container, save_container, Entry};
use crate::chunking::ResolvedChunk;
use crate::encoder::EncoderModel;
use crate::rng::rng_for;
use crate::signal::{log_mel, mfcc, FeatureSequence, Utterance};
use crate::{Error, Result};
use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Frame-token sequence at the encoder frame rate.
pub type TargetSequence = Vec<u32>;

/// K-means fitting never sees more than this many frames.
pub const MAX_FIT_FRAMES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TeacherKmeans,
    Bestrq,
    MfccKmeans,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::TeacherKmeans => "teacher_kmeans",
            Provenance::Bestrq => "bestrq",
            Provenance::MfccKmeans => "mfcc_kmeans",
        };
        write!(f, "{s}")
    }
}

/// K quantizer centroids plus provenance; BEST-RQ codebooks also carry their
/// frozen random projection.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub provenance: Provenance,
    pub projection: Option<Array2<f64>>,
    pub frozen: bool,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// SHA-256 over centroid and projection bytes; frozen codebooks must
    /// keep this stable for the lifetime of a run.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.centroids.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(p) = &self.projection {
            for v in p.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties break to the lowest
/// index.
pub fn assign(codebook: &Codebook, vector: &[f64]) -> Result<u32> {
    if vector.len() != codebook.dim() {
        return Err(Error::invalid(format!(
            "vector dim {} does not match codebook dim {}",
            vector.len(),
            codebook.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, c) in codebook.centroids.rows().into_iter().enumerate() {
        let d = sq_dist(vector, c.as_slice().expect("contiguous"));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best as u32)
}

/// Assigns every row of a matrix.
pub fn assign_rows(codebook: &Codebook, rows: &Array2<f64>) -> Result<TargetSequence> {
    (0..rows.nrows())
        .map(|i| assign(codebook, rows.row(i).as_slice().expect("contiguous")))
        .collect()
}

fn inertia_of(vectors: &Array2<f64>, centroids: &Array2<f64>, labels: &[usize]) -> f64 {
    vectors
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(v, &l)| sq_dist(v.as_slice().unwrap(), centroids.row(l).as_slice().unwrap()))
        .sum()
}

/// K-means++ initialization then Lloyd iterations to an assignment fixpoint.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid. Returns the codebook plus the per-iteration inertia trace.
pub fn kmeans_fit_trace(
    vectors: &Array2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
    provenance: Provenance,
) -> Result<(Codebook, Vec<f64>)> {
    let n = vectors.nrows();
    let d = vectors.ncols();
    if k < 2 {
        return Err(Error::invalid("K must be >= 2"));
    }
    if n < k {
        return Err(Error::invalid(format!("need at least K={k} vectors, got {n}")));
    }
    let mut rng = rng_for(seed, "kmeans", 0);
    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&vectors.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(vectors.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&vectors.row(pick));
        for i in 0..n {
            let d2 = sq_dist(vectors.row(i).as_slice().unwrap(), centroids.row(c).as_slice().unwrap());
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    let book = |centroids: &Array2<f64>| Codebook {
        centroids: centroids.clone(),
        provenance,
        projection: None,
        frozen: false,
    };
    let mut labels: Vec<usize> =
        assign_rows(&book(&centroids), vectors)?.into_iter().map(|t| t as usize).collect();
    let mut trace = vec![inertia_of(vectors, &centroids, &labels)];
    for _ in 0..max_iters {
        // Means update.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += &vectors.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        // Re-seed empty clusters to the farthest point from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            vectors.row(a).as_slice().unwrap(),
                            centroids.row(labels[a]).as_slice().unwrap(),
                        );
                        let db = sq_dist(
                            vectors.row(b).as_slice().unwrap(),
                            centroids.row(labels[b]).as_slice().unwrap(),
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("non-empty data");
                centroids.row_mut(c).assign(&vectors.row(far));
            }
        }
        let new_labels: Vec<usize> =
            assign_rows(&book(&centroids), vectors)?.into_iter().map(|t| t as usize).collect();
        trace.push(inertia_of(vectors, &centroids, &new_labels));
        let fixpoint = new_labels == labels;
        labels = new_labels;
        if fixpoint {
            break;
        }
    }
    Ok((book(&centroids), trace))
}

/// [`kmeans_fit_trace`] without the trace.
pub fn kmeans_fit(
    vectors: &Array2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
    provenance: Provenance,
) -> Result<Codebook> {
    kmeans_fit_trace(vectors, k, max_iters, seed, provenance).map(|(c, _)| c)
}

/// Deterministic subsample of at most `limit` rows.
fn subsample_rows(rows: &Array2<f64>, limit: usize, seed: u64) -> Array2<f64> {
    let n = rows.nrows();
    if n <= limit {
        return rows.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "fit-subsample", 0);
    for i in 0..limit {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = Array2::zeros((limit, rows.ncols()));
    for (r, &i) in idx.iter().take(limit).enumerate() {
        out.row_mut(r).assign(&rows.row(i));
    }
    out
}

fn concat_rows(parts: &[Array2<f64>]) -> Array2<f64> {
    let d = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let n: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((n, d));
    let mut at = 0;
    for p in parts {
        out.slice_mut(s![at..at + p.nrows(), ..]).assign(p);
        at += p.nrows();
    }
    out
}

/// Averages groups of 4 feature frames (ragged tail averaged over what is
/// there), matching the encoder frame rate.
pub fn pool_to_encoder_rate(frames: &Array2<f64>) -> Array2<f64> {
    let (t, d) = frames.dim();
    let t_out = t.div_ceil(4);
    let mut out = Array2::zeros((t_out, d));
    for i in 0..t_out {
        let lo = i * 4;
        let hi = (lo + 4).min(t);
        let span = (hi - lo) as f64;
        for c in 0..d {
            let mut s = 0.0;
            for r in lo..hi {
                s += frames[[r, c]];
            }
            out[[i, c]] = s / span;
        }
    }
    out
}

/// Runs the teacher full-context, clusters the chosen layer's states
/// (default: last) and assigns every frame.
pub fn teacher_targets(
    teacher: &EncoderModel,
    corpus: &[Utterance],
    k: usize,
    seed: u64,
    layer: Option<usize>,
    n_mels: usize,
) -> Result<(Codebook, Vec<TargetSequence>)> {
    let layer_idx = layer.unwrap_or(teacher.config.n_layers);
    if layer_idx > teacher.config.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer_idx} out of range (model has {} layers)",
            teacher.config.n_layers
        )));
    }
    let states: Vec<Array2<f64>> = corpus
        .par_iter()
        .map(|u| -> Result<Array2<f64>> {
            let feats = log_mel(&u.waveform, n_mels)?;
            let out = crate::encoder::forward(teacher, &feats, ResolvedChunk::Full)?;
            Ok(out.layers.states[layer_idx].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let all = concat_rows(&states);
    let fit_on = subsample_rows(&all, MAX_FIT_FRAMES, seed);
    let codebook = kmeans_fit(&fit_on, k, 50, seed, Provenance::TeacherKmeans)?;
    let seqs = states
        .par_iter()
        .map(|s| assign_rows(&codebook, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, seqs))
}

/// Frozen random projection of stacked features plus a frozen random
/// codebook; nearest-neighbor assignment.
pub fn bestrq_targets(
    feats: &[FeatureSequence],
    k: usize,
    d_proj: usize,
    seed: u64,
) -> Result<(Codebook, Vec<TargetSequence>)> {
    if k < 2 || d_proj == 0 {
        return Err(Error::invalid("K must be >= 2 and D_proj >= 1"));
    }
    let d_in = feats
        .first()
        .map(|f| 4 * f.dim())
        .ok_or_else(|| Error::invalid("empty corpus"))?;
    let mut rng = rng_for(seed, "bestrq", 0);
    let scale = (1.0 / d_in as f64).sqrt();
    let projection = Array2::from_shape_fn((d_in, d_proj), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let centroids = Array2::from_shape_fn((k, d_proj), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let codebook = Codebook {
        centroids,
        provenance: Provenance::Bestrq,
        projection: Some(projection.clone()),
        frozen: true,
    };
    let seqs = feats
        .par_iter()
        .map(|f| {
            let stacked = crate::encoder::stack_for_targets(&f.frames);
            assign_rows(&codebook, &stacked.dot(&projection))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, seqs))
}

/// HuBERT stage-1 style targets: K-means over pooled MFCCs.
pub fn mfcc_targets(
    corpus: &[Utterance],
    k: usize,
    seed: u64,
    n_coeffs: usize,
) -> Result<(Codebook, Vec<TargetSequence>)> {
    let pooled: Vec<Array2<f64>> = corpus
        .par_iter()
        .map(|u| -> Result<Array2<f64>> {
            Ok(pool_to_encoder_rate(&mfcc(&u.waveform, n_coeffs)?.frames))
        })
        .collect::<Result<Vec<_>>>()?;
    let all = concat_rows(&pooled);
    let fit_on = subsample_rows(&all, MAX_FIT_FRAMES, seed);
    let codebook = kmeans_fit(&fit_on, k, 50, seed, Provenance::MfccKmeans)?;
    let seqs = pooled
        .par_iter()
        .map(|p| assign_rows(&codebook, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, seqs))
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    provenance: Provenance,
    k: usize,
    d: usize,
    frozen: bool,
    has_projection: bool,
}

/// Serializes a codebook next to model checkpoints (same container format).
pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let header = CodebookHeader {
        provenance: cb.provenance,
        k: cb.k(),
        d: cb.dim(),
        frozen: cb.frozen,
        has_projection: cb.projection.is_some(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut entries = vec![("centroids".to_string(), Entry::M(cb.centroids.clone()))];
    if let Some(p) = &cb.projection {
        entries.push(("projection".to_string(), Entry::M(p.clone())));
    }
    save_container(path, &json, &entries)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let (json, mut entries) = load_container(path)?;
    let header: CodebookHeader =
        serde_json::from_str(&json).map_err(|e| Error::Format(e.to_string()))?;
    let centroids = match entries.remove("centroids") {
        Some(Entry::M(m)) => m,
        _ => return Err(Error::Format("codebook missing centroids".into())),
    };
    let projection = match entries.remove("projection") {
        Some(Entry::M(m)) => Some(m),
        None if !header.has_projection => None,
        _ => return Err(Error::Format("codebook projection malformed".into())),
    };
    Ok(Codebook { centroids, provenance: header.provenance, projection, frozen: header.frozen })
}

/// Writes per-utterance token files plus a `targets.csv` manifest.
pub fn save_targets(
    dir: &Path,
    ids: &[String],
    seqs: &[TargetSequence],
    codebook: &Codebook,
) -> Result<()> {
    if ids.len() != seqs.len() {
        return Err(Error::invalid("ids/sequences length mismatch"));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,path,len\n");
    for (id, seq) in ids.iter().zip(seqs) {
        let rel = format!("{id}.tok");
        let mut bytes = Vec::with_capacity(seq.len() * 4);
        for t in seq {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        std::fs::write(dir.join(&rel), bytes)?;
        manifest.push_str(&format!("{id},{rel},{}\n", seq.len()));
    }
    std::fs::write(dir.join("targets.csv"), manifest)?;
    save_codebook(&dir.join("codebook.ckpt"), codebook)
}

/// Loads target sequences in manifest order: (ids, sequences, codebook).
pub fn load_targets(dir: &Path) -> Result<(Vec<String>, Vec<TargetSequence>, Codebook)> {
    let text = std::fs::read_to_string(dir.join("targets.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,path,len") {
        return Err(Error::Format("targets manifest missing header".into()));
    }
    let mut ids = Vec::new();
    let mut seqs = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(Error::Format("targets manifest line malformed".into()));
        }
        let bytes = std::fs::read(dir.join(parts[1]))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("token file not a whole number of u32s".into()));
        }
        let seq: TargetSequence =
            bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let expect: usize =
            parts[2].parse().map_err(|_| Error::Format("bad target length".into()))?;
        if seq.len() != expect {
            return Err(Error::Format(format!("target length mismatch for {}", parts[0])));
        }
        ids.push(parts[0].to_string());
        seqs.push(seq);
    }
    let codebook = load_codebook(&dir.join("codebook.ckpt"))?;
    Ok((ids, seqs, codebook))
}

#[cfg(test)]
mod tests;
