//! Library results checked against independent brute-force computations.

use std::collections::HashMap;

use dualenc::autodiff::{grad_check, Tape, Tensor, TensorError, Var, DEFAULT_STEP};
use dualenc::corpus::{build_vocabulary, generate_synthetic_corpus, SyntheticCorpusSpec};
use dualenc::encoders::{encode_video, EncoderConfig, EncoderParams, Lexicon};
use dualenc::par::Execution;
use dualenc::retrieval::build_index;
use dualenc::training::{train_epoch, Adam, Dataset, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn gru_step(tape: &mut Tape<'_>, v: &[Var]) -> Result<Var, TensorError> {
    let [x, h, wz, wr, wh, uz, ur, uh, bz, br, bh, c] = v.try_into().unwrap();
    let xz = tape.matmul(x, wz)?;
    let xz = tape.add(xz, bz)?;
    let hz = tape.matmul(h, uz)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let xr = tape.matmul(x, wr)?;
    let xr = tape.add(xr, br)?;
    let hr = tape.matmul(h, ur)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let rh = tape.matmul(rh, uh)?;
    let xh = tape.matmul(x, wh)?;
    let xh = tape.add(xh, bh)?;
    let cand = tape.add(xh, rh)?;
    let cand = tape.tanh(cand)?;
    let delta = tape.sub(cand, h)?;
    let delta = tape.mul(z, delta)?;
    let next = tape.add(h, delta)?;
    let weighted = tape.mul(next, c)?;
    tape.sum(weighted)
}

#[test]
fn gru_step_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (input, hidden) = (3, 4);
    let mut params = vec![random(&mut rng, 1, input), random(&mut rng, 1, hidden)];
    for _ in 0..3 {
        params.push(random(&mut rng, input, hidden));
    }
    for _ in 0..3 {
        params.push(random(&mut rng, hidden, hidden));
    }
    for _ in 0..4 {
        params.push(random(&mut rng, 1, hidden));
    }
    let report = grad_check(&params, DEFAULT_STEP, Execution::Sequential, gru_step).unwrap();
    assert_eq!(report.coordinates, 3 + 4 + 3 * 12 + 3 * 16 + 4 * 4);
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

/// A smooth composite of most tape operations.
fn composite(tape: &mut Tape<'_>, v: &[Var]) -> Result<Var, TensorError> {
    let [x, w1, w2, b, c] = v.try_into().unwrap();
    let a = tape.matmul(x, w1)?;
    let a = tape.row_softmax(a)?;
    let g = tape.matmul(x, w2)?;
    let g = tape.add(g, b)?;
    let g = tape.tanh(g)?;
    let m = tape.mul(a, g)?;
    let s = tape.matmul_nt(m, g)?;
    let s = tape.sigmoid(s)?;
    let pooled = tape.mean_rows(m)?;
    let joined = tape.concat(&[pooled, b])?;
    let joined = tape.l2_normalize(joined)?;
    let first = tape.row(s, 0)?;
    let first = tape.scale(first, 0.5)?;
    let t1 = tape.sum(first)?;
    let t2 = tape.mul(joined, c)?;
    let t2 = tape.sum(t2)?;
    tape.add(t1, t2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_small_graphs_pass_gradcheck(
        n in 1usize..5,
        d in 1usize..5,
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random(&mut rng, n, d),
            random(&mut rng, d, k),
            random(&mut rng, d, k),
            random(&mut rng, 1, k),
            random(&mut rng, 1, 2 * k),
        ];
        let report = grad_check(&params, DEFAULT_STEP, Execution::Sequential, composite).unwrap();
        prop_assert!(report.max_relative_error < 1e-4, "{:?}", report);
    }
}

#[test]
fn vocabulary_counts_match_brute_force() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        shots_per_prototype: 100,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    let captions: Vec<&str> = corpus
        .train_captions
        .iter()
        .chain(&corpus.validation_captions)
        .map(|c| c.caption.as_str())
        .take(1000)
        .collect();
    assert_eq!(captions.len(), 1000);

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in &captions {
        for w in c.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    for threshold in [1, 5, 40] {
        let vocab = build_vocabulary(&captions, threshold).unwrap();
        let mut expected: Vec<(&str, usize)> = counts
            .iter()
            .filter(|(_, &n)| n >= threshold)
            .map(|(&w, &n)| (w, n))
            .collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let got: Vec<(&str, usize)> = (0..vocab.len()).map(|i| (vocab.word(i), vocab.count(i))).collect();
        assert_eq!(got, expected, "threshold {threshold}");
    }
}

fn frame_mean(frames: &[f32], dim: usize) -> Vec<f64> {
    let n = (frames.len() / dim) as f64;
    (0..dim)
        .map(|j| frames.iter().skip(j).step_by(dim).map(|&x| f64::from(x)).sum::<f64>() / n)
        .collect()
}

#[test]
fn nearest_centroid_separates_prototypes() {
    let spec = SyntheticCorpusSpec {
        prototypes: 5,
        shots_per_prototype: 40,
        noise: 0.1,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let dim = spec.feature_dim;
    let means: Vec<Vec<f64>> = corpus.features.iter().map(|s| frame_mean(s.frames(), dim)).collect();

    // Classify every shot by its frame mean against the generator's centroids.
    let distance = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = means
        .iter()
        .zip(&corpus.labels)
        .filter(|(m, &label)| {
            let best = (0..spec.prototypes)
                .min_by(|&i, &j| distance(m, &corpus.centroids[i]).total_cmp(&distance(m, &corpus.centroids[j])))
                .unwrap();
            best == label
        })
        .count();
    let accuracy = correct as f64 / means.len() as f64;
    assert_eq!(means.len(), 200);
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}

#[test]
fn index_matches_per_shot_encoding() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        shots_per_prototype: 20,
        seed: 6,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    assert_eq!(corpus.features.len(), 100);
    let config = EncoderConfig {
        feature_dim: corpus.spec.feature_dim,
        vocab_size: 10,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(config, 6).unwrap();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let index = build_index(&corpus.features, &params, exec).unwrap();
        assert_eq!(index.len(), 100);
        for ((id, v), shot) in index.shots.iter().zip(&corpus.features) {
            assert_eq!(id, &shot.shot_id);
            assert_eq!(v, &encode_video(shot, &params).unwrap().1);
        }
    }
}

#[test]
fn loss_decreases_over_first_ten_epochs() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        shots_per_prototype: 22,
        validation_per_prototype: 2,
        captions_per_shot: 2,
        seed: 1,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap();
    assert_eq!(corpus.train_captions.len(), 200);
    let captions: Vec<&str> = corpus.train_captions.iter().map(|c| c.caption.as_str()).collect();
    let lexicon = Lexicon::new(build_vocabulary(&captions, 1).unwrap(), &corpus.embeddings).unwrap();
    let data = Dataset::new(&corpus.train_captions, &corpus.features, &lexicon).unwrap();
    let encoder = EncoderConfig {
        feature_dim: corpus.spec.feature_dim,
        word_dim: corpus.spec.word_dim,
        vocab_size: lexicon.vocabulary().len(),
        ..EncoderConfig::default()
    };
    let mut params = EncoderParams::init(encoder, 1).unwrap();
    let config = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let mut optimizer = Adam::new(&params, &config);
    let mut losses = Vec::new();
    for epoch in 0..10 {
        let stats = train_epoch(&data, &lexicon, &mut params, &mut optimizer, &config, epoch).unwrap();
        assert_eq!(stats.pairs, 200);
        losses.push(stats.mean_loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}
