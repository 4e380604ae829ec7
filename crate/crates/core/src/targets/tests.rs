use super::*;
use crate::signal::{synth_corpus, CorpusSpec};
use ndarray::array;

#[test]
fn n_equals_k_distinct_points_have_zero_inertia() {
    let data = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
    let (cb, trace) = kmeans_fit_trace(&data, 4, 20, 0, Provenance::MfccKmeans).unwrap();
    assert!(trace.last().unwrap() < &1e-12, "{trace:?}");
    // Every point is its own centroid (in some order).
    for row in data.rows() {
        let toks = assign(&cb, row.as_slice().unwrap()).unwrap();
        let c = cb.centroids.row(toks as usize);
        assert!(row.iter().zip(c.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn one_dimensional_pairs_find_the_two_means() {
    let data = array![[0.0], [1.0], [10.0], [11.0]];
    // Exhaustive oracle: the best 2-partition is {0,1} | {10,11}.
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for split in 1..4usize {
        let (a, b) = (&[0.0, 1.0, 10.0, 11.0][..split], &[0.0, 1.0, 10.0, 11.0][split..]);
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let inertia = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
            + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        if inertia < best.0 {
            best = (inertia, ma, mb);
        }
    }
    assert_eq!((best.1, best.2), (0.5, 10.5));
    for seed in 0..5 {
        let cb = kmeans_fit(&data, 2, 30, seed, Provenance::MfccKmeans).unwrap();
        let mut cents: Vec<f64> = cb.centroids.iter().copied().collect();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cents[0] - 0.5).abs() < 1e-12, "seed {seed}: {cents:?}");
        assert!((cents[1] - 10.5).abs() < 1e-12, "seed {seed}: {cents:?}");
    }
}

#[test]
fn inertia_is_monotone_nonincreasing() {
    let mut rng = crate::rng::rng_for(7, "km-data", 0);
    use rand::Rng;
    let data = Array2::from_shape_fn((200, 6), |_| rng.random::<f64>() * 10.0);
    let (_, trace) = kmeans_fit_trace(&data, 8, 40, 3, Provenance::MfccKmeans).unwrap();
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "inertia rose: {trace:?}");
    }
}

#[test]
fn final_assignment_is_a_fixpoint() {
    let mut rng = crate::rng::rng_for(8, "km-fix", 0);
    use rand::Rng;
    let data = Array2::from_shape_fn((150, 4), |_| rng.random::<f64>());
    let cb = kmeans_fit(&data, 5, 50, 1, Provenance::MfccKmeans).unwrap();
    // One more Lloyd step must not move assignments.
    let labels = assign_rows(&cb, &data).unwrap();
    let mut sums = Array2::<f64>::zeros((5, 4));
    let mut counts = [0usize; 5];
    for (i, &l) in labels.iter().enumerate() {
        counts[l as usize] += 1;
        let mut r = sums.row_mut(l as usize);
        r += &data.row(i);
    }
    let mut moved = cb.centroids.clone();
    for c in 0..5 {
        if counts[c] > 0 {
            moved.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
        }
    }
    let cb2 = Codebook { centroids: moved, ..cb.clone() };
    assert_eq!(labels, assign_rows(&cb2, &data).unwrap());
}

#[test]
fn fewer_points_than_clusters_is_rejected() {
    let data = array![[0.0], [1.0]];
    assert!(kmeans_fit(&data, 3, 10, 0, Provenance::MfccKmeans).is_err());
}

#[test]
fn assign_matches_brute_force_and_breaks_ties_low() {
    let cb = Codebook {
        centroids: array![[0.0, 0.0], [2.0, 0.0], [2.0, 0.0]],
        provenance: Provenance::MfccKmeans,
        projection: None,
        frozen: false,
    };
    // Exactly on centroid index 1 and 2 (identical): tie goes to 1.
    assert_eq!(assign(&cb, &[2.0, 0.0]).unwrap(), 1);
    // Equidistant between 0 and 1: tie goes to 0.
    assert_eq!(assign(&cb, &[1.0, 0.0]).unwrap(), 0);
    assert!(assign(&cb, &[1.0]).is_err());
    use rand::Rng;
    let mut rng = crate::rng::rng_for(9, "assign", 0);
    let cb = Codebook {
        centroids: Array2::from_shape_fn((7, 3), |_| rng.random::<f64>()),
        provenance: Provenance::MfccKmeans,
        projection: None,
        frozen: false,
    };
    for _ in 0..100 {
        let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let got = assign(&cb, &v).unwrap() as usize;
        let oracle = (0..7)
            .min_by(|&a, &b| {
                sq_dist(&v, cb.centroids.row(a).as_slice().unwrap())
                    .partial_cmp(&sq_dist(&v, cb.centroids.row(b).as_slice().unwrap()))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(got, oracle);
    }
}

fn tone_corpus(seed: u64, n: usize) -> Vec<Utterance> {
    synth_corpus(&CorpusSpec {
        n_utts: n,
        vocab_size: 8,
        min_len_phones: 3,
        max_len_phones: 6,
        phone_dur_ms: 80,
        noise_amp: 0.02,
        freq_jitter: 0.0,
        phone_style: crate::signal::PhoneStyle::Pure,
        silence_mix: 0.0,
        seed,
    })
    .unwrap()
}

#[test]
fn bestrq_is_frozen_and_deterministic() {
    let corpus = tone_corpus(4, 6);
    let feats: Vec<FeatureSequence> =
        corpus.iter().map(|u| log_mel(&u.waveform, 20).unwrap()).collect();
    let (cb1, seqs1) = bestrq_targets(&feats, 16, 8, 11).unwrap();
    let (cb2, seqs2) = bestrq_targets(&feats, 16, 8, 11).unwrap();
    assert_eq!(cb1.digest(), cb2.digest());
    assert_eq!(seqs1, seqs2);
    assert!(cb1.frozen);
    assert!(cb1.projection.is_some());
}

#[test]
fn bestrq_assignments_match_nearest_neighbor_oracle() {
    let corpus = tone_corpus(5, 3);
    let feats: Vec<FeatureSequence> =
        corpus.iter().map(|u| log_mel(&u.waveform, 20).unwrap()).collect();
    let (cb, seqs) = bestrq_targets(&feats, 8, 6, 2).unwrap();
    let proj = cb.projection.as_ref().unwrap();
    for (f, seq) in feats.iter().zip(&seqs) {
        let projected = crate::encoder::stack_for_targets(&f.frames).dot(proj);
        for (i, &tok) in seq.iter().enumerate() {
            let v = projected.row(i);
            let oracle = (0..cb.k())
                .min_by(|&a, &b| {
                    sq_dist(v.as_slice().unwrap(), cb.centroids.row(a).as_slice().unwrap())
                        .partial_cmp(&sq_dist(
                            v.as_slice().unwrap(),
                            cb.centroids.row(b).as_slice().unwrap(),
                        ))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(tok as usize, oracle);
        }
    }
}

#[test]
fn identical_frames_map_to_identical_tokens() {
    // A constant waveform has identical feature frames away from the edges.
    let w = crate::signal::Waveform {
        samples: vec![0.25; 16000],
        sample_rate: crate::signal::SAMPLE_RATE,
    };
    let f = log_mel(&w, 20).unwrap();
    let (_, seqs) = bestrq_targets(&[f], 8, 6, 3).unwrap();
    let mid = &seqs[0][5..15];
    assert!(mid.iter().all(|t| *t == mid[0]), "{mid:?}");
}

#[test]
fn mfcc_targets_pool_to_encoder_rate() {
    let corpus = vec![{
        let mut u = tone_corpus(6, 1).remove(0);
        // Make it exactly 1 s so T = 98 and T' = 25.
        u.waveform.samples.resize(16000, 0.1);
        u
    }];
    let (_, seqs) = mfcc_targets(&corpus, 4, 0, 13).unwrap();
    assert_eq!(seqs[0].len(), 25);
}

#[test]
fn mfcc_targets_deterministic() {
    let corpus = tone_corpus(7, 8);
    let (cb1, s1) = mfcc_targets(&corpus, 8, 5, 13).unwrap();
    let (cb2, s2) = mfcc_targets(&corpus, 8, 5, 13).unwrap();
    assert_eq!(cb1.digest(), cb2.digest());
    assert_eq!(s1, s2);
}

#[test]
fn two_tone_corpus_separates_with_k2() {
    // Alternating pure tones, K=2: tokens should track the tone with high
    // purity (the tones are far apart in MFCC space).
    let vocab = crate::signal::Vocab::default_tones();
    let tone = |p: &str| vocab.freq(p);
    let phones: Vec<String> = "a h a h a h a h".split(' ').map(str::to_string).collect();
    let mut utt =
        crate::signal::synth_utterance(&phones, &tone, 160, 0.0, 3).unwrap();
    utt.id = "two-tone".into();
    let (_, seqs) = mfcc_targets(&[utt], 2, 1, 13).unwrap();
    let seq = &seqs[0];
    // Each phone is 160 ms = 4 encoder frames. Count agreement of each
    // frame's token with its phone's majority token.
    let frames_per_phone = 4;
    let mut per_phone_major = vec![];
    for p in 0..phones.len() {
        let lo = p * frames_per_phone;
        let hi = ((p + 1) * frames_per_phone).min(seq.len());
        let ones = seq[lo..hi].iter().filter(|t| **t == 1).count();
        per_phone_major.push(if ones * 2 >= hi - lo { 1u32 } else { 0u32 });
    }
    let mut agree = 0;
    let mut total = 0;
    for (p, major) in per_phone_major.iter().enumerate() {
        let lo = p * frames_per_phone;
        let hi = ((p + 1) * frames_per_phone).min(seq.len());
        for t in &seq[lo..hi] {
            total += 1;
            if t == major {
                agree += 1;
            }
        }
    }
    let purity = agree as f64 / total as f64;
    assert!(purity >= 0.95, "purity {purity}");
    // And the two tones land on different tokens.
    assert_ne!(per_phone_major[0], per_phone_major[1]);
}

#[test]
fn codebook_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cb.ckpt");
    use rand::Rng;
    let mut rng = crate::rng::rng_for(10, "cb", 0);
    let cb = Codebook {
        centroids: Array2::from_shape_fn((8, 5), |_| rng.random::<f64>()),
        provenance: Provenance::Bestrq,
        projection: Some(Array2::from_shape_fn((12, 5), |_| rng.random::<f64>())),
        frozen: true,
    };
    save_codebook(&path, &cb).unwrap();
    let back = load_codebook(&path).unwrap();
    assert_eq!(back.digest(), cb.digest());
    assert_eq!(back.provenance, cb.provenance);
    assert!(back.frozen);
}

#[test]
fn targets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ids = vec!["u0".to_string(), "u1".to_string()];
    let seqs = vec![vec![1u32, 2, 3], vec![0u32, 5]];
    let cb = Codebook {
        centroids: array![[0.0, 1.0], [2.0, 3.0]],
        provenance: Provenance::TeacherKmeans,
        projection: None,
        frozen: false,
    };
    save_targets(dir.path(), &ids, &seqs, &cb).unwrap();
    let (ids2, seqs2, cb2) = load_targets(dir.path()).unwrap();
    assert_eq!(ids, ids2);
    assert_eq!(seqs, seqs2);
    assert_eq!(cb.digest(), cb2.digest());
}

#[test]
fn teacher_targets_are_frame_synchronous() {
    let corpus = tone_corpus(12, 8);
    let cfg = crate::encoder::EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        input_dim: 20,
        ..Default::default()
    };
    let teacher = EncoderModel::init(cfg, 13).unwrap();
    let (cb, seqs) = teacher_targets(&teacher, &corpus, 8, 1, None, 20).unwrap();
    assert_eq!(cb.provenance, Provenance::TeacherKmeans);
    for (u, s) in corpus.iter().zip(&seqs) {
        let t = crate::signal::frame_count(u.waveform.len());
        assert_eq!(s.len(), t.div_ceil(4));
    }
    // Requesting a bogus layer fails.
    assert!(teacher_targets(&teacher, &corpus, 8, 1, Some(9), 20).is_err());
}
