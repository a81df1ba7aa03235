//! Three-level video and text encoders projected into a shared space.

mod network;
mod params;
mod text;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

pub(crate) use network::{encode_branch, BranchVars};
pub use params::{
    Attention, BiGru, Branch, ConvBank, EncoderConfig, EncoderParams, Gru, Linear, Network,
};
pub use text::{EmbeddingTable, Lexicon, TokenSequence};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sentence has no in-vocabulary words: {0:?}")]
    EmptySentence(String),
    #[error("shot {0} has no frames")]
    EmptyShot(String),
    #[error("token index {index} outside vocabulary of {vocab}")]
    TokenIndex { index: usize, vocab: usize },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One video shot: `n` keyframe vectors of dimension `D`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub shot_id: String,
    frames: Vec<f32>,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(shot_id: impl Into<String>, dim: usize, frames: Vec<f32>) -> Result<Self, EncodeError> {
        let shot_id = shot_id.into();
        if dim == 0 {
            return Err(EncodeError::Config(format!("shot {shot_id}: zero feature dimension")));
        }
        if frames.is_empty() {
            return Err(EncodeError::EmptyShot(shot_id));
        }
        if !frames.len().is_multiple_of(dim) {
            return Err(EncodeError::Dimension {
                what: "frame data",
                expected: dim,
                got: frames.len() % dim,
            });
        }
        Ok(Self {
            shot_id,
            frames,
            dim,
        })
    }

    pub fn from_rows(shot_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self, EncodeError> {
        let shot_id = shot_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EncodeError::Dimension {
                what: "frame",
                expected: dim,
                got: bad.len(),
            });
        }
        if rows.is_empty() {
            return Err(EncodeError::EmptyShot(shot_id));
        }
        Self::new(shot_id, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.frames.iter().map(|&x| f64::from(x)).collect();
        Tensor::matrix(self.len(), self.dim, data).expect("validated on construction")
    }

    /// Keeps at most `max_frames` frames, picking indices
    /// `floor(i * n / max_frames)`.
    pub fn subsample(&self, max_frames: usize) -> FeatureSequence {
        let n = self.len();
        if max_frames == 0 || n <= max_frames {
            return self.clone();
        }
        let mut frames = Vec::with_capacity(max_frames * self.dim);
        for i in 0..max_frames {
            frames.extend_from_slice(self.frame(i * n / max_frames));
        }
        FeatureSequence {
            shot_id: self.shot_id.clone(),
            frames,
            dim: self.dim,
        }
    }
}

/// The three per-level representations of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEncodings {
    pub level1: Vec<f64>,
    pub level2: Vec<f64>,
    pub level3: Vec<f64>,
}

/// Unit-norm vector in the common space (zero for degenerate input).
#[derive(Clone, Debug, PartialEq)]
pub struct CommonSpaceVector(Vec<f64>);

impl CommonSpaceVector {
    /// Scales `values` to unit norm; the zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut values {
                *x /= norm;
            }
        }
        Self(values)
    }

    /// Wraps values that are already normalized.
    pub fn from_unit(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Cosine similarity; zero vectors score 0.
pub fn similarity(a: &CommonSpaceVector, b: &CommonSpaceVector) -> f64 {
    let (a, b) = (a.values(), b.values());
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Self-attention over the rows of `h`. Returns the attended sequence and
/// the row-stochastic attention matrix.
pub fn self_attention(h: &Tensor, params: &Attention<&Tensor>) -> Result<(Tensor, Tensor), EncodeError> {
    if h.rows() == 0 {
        return Err(EncodeError::Tensor(TensorError::EmptyInput("self_attention")));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let p = Attention {
        query: tape.param(params.query),
        key: tape.param(params.key),
    };
    let (a, attended) = network::self_attention(&mut tape, hv, &p)?;
    Ok((tape.value(attended).clone(), tape.value(a).clone()))
}

/// Every parameter bound onto `tape`, both as the network layout and in
/// flat parameter order.
pub(crate) fn bind<'a>(tape: &mut Tape<'a>, params: &'a EncoderParams) -> (Network<Var>, Vec<Var>) {
    let flat: Vec<Var> = params.tensors().map(|t| tape.param(t)).collect();
    let net = params.layout().map(&mut |&i| flat[i]);
    (net, flat)
}

pub(crate) fn video_forward(
    tape: &mut Tape<'_>,
    net: &Network<Var>,
    config: &EncoderConfig,
    shot: &FeatureSequence,
) -> Result<BranchVars, EncodeError> {
    if shot.dim() != config.feature_dim {
        return Err(EncodeError::Dimension {
            what: "frame features",
            expected: config.feature_dim,
            got: shot.dim(),
        });
    }
    let seq = tape.constant(shot.to_tensor());
    let level1 = tape.mean_rows(seq)?;
    Ok(encode_branch(tape, seq, level1, &net.video)?)
}

pub(crate) fn text_forward(
    tape: &mut Tape<'_>,
    net: &Network<Var>,
    config: &EncoderConfig,
    lexicon: &Lexicon,
    sentence: &TokenSequence,
) -> Result<BranchVars, EncodeError> {
    if lexicon.vocabulary().len() != config.vocab_size {
        return Err(EncodeError::Dimension {
            what: "vocabulary size",
            expected: config.vocab_size,
            got: lexicon.vocabulary().len(),
        });
    }
    if lexicon.word_dim() != config.word_dim {
        return Err(EncodeError::Dimension {
            what: "word embedding",
            expected: config.word_dim,
            got: lexicon.word_dim(),
        });
    }
    let bow = lexicon.bag_of_words(sentence)?;
    let seq = lexicon.embed(sentence)?;
    let level1 = tape.constant(bow);
    let seq = tape.constant(seq);
    Ok(encode_branch(tape, seq, level1, &net.text)?)
}

fn collect(tape: &Tape<'_>, vars: &BranchVars) -> (LevelEncodings, CommonSpaceVector) {
    let levels = LevelEncodings {
        level1: tape.value(vars.level1).data().to_vec(),
        level2: tape.value(vars.level2).data().to_vec(),
        level3: tape.value(vars.level3).data().to_vec(),
    };
    let common = CommonSpaceVector::from_unit(tape.value(vars.common).data().to_vec());
    (levels, common)
}

pub fn encode_video(
    shot: &FeatureSequence,
    params: &EncoderParams,
) -> Result<(LevelEncodings, CommonSpaceVector), EncodeError> {
    let mut tape = Tape::new();
    let (net, _) = bind(&mut tape, params);
    let vars = video_forward(&mut tape, &net, params.config(), shot)?;
    Ok(collect(&tape, &vars))
}

pub fn encode_text(
    sentence: &TokenSequence,
    lexicon: &Lexicon,
    params: &EncoderParams,
) -> Result<(LevelEncodings, CommonSpaceVector), EncodeError> {
    let mut tape = Tape::new();
    let (net, _) = bind(&mut tape, params);
    let vars = text_forward(&mut tape, &net, params.config(), lexicon, sentence)?;
    Ok(collect(&tape, &vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            feature_dim: 6,
            word_dim: 4,
            vocab_size: vocab,
            hidden: 3,
            attention_dim: 5,
            conv_widths: vec![2, 3, 4],
            conv_filters: 2,
            common_dim: 7,
        }
    }

    fn random_shot(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureSequence {
        let frames = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureSequence::new("s", dim, frames).unwrap()
    }

    #[test]
    fn single_frame_mean_is_the_frame() {
        let params = EncoderParams::init(small_config(3), 0).unwrap();
        let shot = FeatureSequence::from_rows("s", &[vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]]).unwrap();
        let (levels, common) = encode_video(&shot, &params).unwrap();
        let expected: Vec<f64> = shot.frame(0).iter().map(|&x| f64::from(x)).collect();
        assert_eq!(levels.level1, expected);
        assert_eq!(levels.level2.len(), 6);
        assert_eq!(levels.level3.len(), 6);
        assert_eq!(common.dim(), 7);
        // Widths 2..4 exceed the sequence and contribute zeros.
        assert!(levels.level3.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn permuting_frames_keeps_first_level() {
        let params = EncoderParams::init(small_config(3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shot = random_shot(&mut rng, 4, 6);
        let rows: Vec<Vec<f32>> = (0..4).rev().map(|i| shot.frame(i).to_vec()).collect();
        let reversed = FeatureSequence::from_rows("s", &rows).unwrap();
        let (a, _) = encode_video(&shot, &params).unwrap();
        let (b, _) = encode_video(&reversed, &params).unwrap();
        for (x, y) in a.level1.iter().zip(&b.level1) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dimension_rejected() {
        let params = EncoderParams::init(small_config(3), 1).unwrap();
        let shot = FeatureSequence::from_rows("s", &[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            encode_video(&shot, &params),
            Err(EncodeError::Dimension { .. })
        ));
        assert!(FeatureSequence::new("x", 3, vec![]).is_err());
        assert!(FeatureSequence::new("x", 3, vec![1.0; 4]).is_err());
    }

    #[test]
    fn text_first_level_and_determinism() {
        let vocab = build_vocabulary(&["a a b"], 1).unwrap();
        let table = EmbeddingTable::random(vocab.words(), 4, 9);
        let lex = Lexicon::new(vocab, &table).unwrap();
        let params = EncoderParams::init(small_config(2), 2).unwrap();
        let s = lex.tokenize("a a b").unwrap();
        let (levels, common) = encode_text(&s, &lex, &params).unwrap();
        assert_eq!(levels.level1, vec![2.0 / 3.0, 1.0 / 3.0]);
        let again = encode_text(&s, &lex, &params).unwrap();
        assert_eq!(again.1, common);
        let norm: f64 = common.values().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_word_attention_is_identity() {
        let h = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let q = Tensor::filled(4, 2, 0.7);
        let k = Tensor::filled(4, 2, -0.4);
        let (attended, a) = self_attention(&h, &Attention { query: &q, key: &k }).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(attended, h);
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let h = Tensor::from_rows(&[vec![0.5, 1.0], vec![0.5, 1.0], vec![0.5, 1.0]]).unwrap();
        let q = Tensor::identity(2);
        let (attended, a) = self_attention(&h, &Attention { query: &q, key: &q }).unwrap();
        for &x in a.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(attended.max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn similarity_cases() {
        let x = CommonSpaceVector::normalized(vec![3.0, 4.0]);
        let y = CommonSpaceVector::normalized(vec![-4.0, 3.0]);
        let neg = CommonSpaceVector::from_unit(x.values().iter().map(|v| -v).collect());
        assert!((similarity(&x, &x) - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&x, &y), 0.0);
        assert!((similarity(&x, &neg) + 1.0).abs() < 1e-15);
        let zero = CommonSpaceVector::normalized(vec![0.0, 0.0]);
        assert_eq!(similarity(&x, &zero), 0.0);
    }

    #[test]
    fn subsample_picks_uniform_indices() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32]).collect();
        let shot = FeatureSequence::from_rows("s", &rows).unwrap();
        let sub = shot.subsample(4);
        assert_eq!(sub.frames(), &[0.0, 2.0, 5.0, 7.0]);
        assert_eq!(shot.subsample(20), shot);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_are_stochastic(n in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = |r: usize, c: usize| {
                Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
            };
            let h = m(n, 4);
            let (q, k) = (m(4, 3), m(4, 3));
            let (_, a) = self_attention(&h, &Attention { query: &q, key: &k }).unwrap();
            for i in 0..n {
                let s: f64 = a.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn output_dimension_is_fixed(n in 1usize..=9, seed in any::<u64>()) {
            let params = EncoderParams::init(small_config(3), 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shot = random_shot(&mut rng, n, 6);
            let (levels, common) = encode_video(&shot, &params).unwrap();
            prop_assert_eq!(levels.level2.len(), 6);
            prop_assert_eq!(levels.level3.len(), 6);
            prop_assert_eq!(common.dim(), 7);
            let (_, again) = encode_video(&shot, &params).unwrap();
            prop_assert_eq!(common, again);
        }
    }
}
