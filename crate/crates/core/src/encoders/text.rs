use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::corpus::{tokenize, Vocabulary};

use super::EncodeError;

/// Word vectors keyed by word.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            dim,
        }
    }

    /// Appends a word; returns `false` when the word is already present.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<bool, EncodeError> {
        if vector.len() != self.dim {
            return Err(EncodeError::Dimension {
                what: "embedding vector",
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.index.contains_key(word) {
            return Ok(false);
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    /// Standard-normal vectors for each word, scaled by `1 / sqrt(dim)`.
    pub fn random<S: AsRef<str>>(words: &[S], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut table = Self::new(dim);
        for w in words {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    (x * scale) as f32 as f64
                })
                .collect();
            table.insert(w.as_ref(), &v).expect("dimension fixed above");
        }
        table
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Per-word concatenation with a second table. Words of `self` missing
    /// from `other` get zeros for the second half.
    pub fn concat(&self, other: &EmbeddingTable) -> EmbeddingTable {
        let mut out = EmbeddingTable::new(self.dim + other.dim);
        let zeros = vec![0.0; other.dim];
        for w in &self.words {
            let mut v = self.lookup(w).expect("own word").to_vec();
            v.extend_from_slice(other.lookup(w).unwrap_or(&zeros));
            out.insert(w, &v).expect("dimension fixed above");
        }
        out
    }
}

/// A sentence as vocabulary indices, out-of-vocabulary words removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Vocabulary plus word vectors aligned to vocabulary indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    vocabulary: Vocabulary,
    embeddings: Tensor,
}

impl Lexicon {
    /// Aligns `table` to `vocabulary`; vocabulary words without a vector
    /// get the zero vector.
    pub fn new(vocabulary: Vocabulary, table: &EmbeddingTable) -> Result<Self, EncodeError> {
        if vocabulary.is_empty() {
            return Err(EncodeError::Config("empty vocabulary".into()));
        }
        let dim = table.dim();
        let mut data = Vec::with_capacity(vocabulary.len() * dim);
        let zeros = vec![0.0; dim];
        let mut missing = 0;
        for w in vocabulary.words() {
            match table.lookup(w) {
                Some(v) => data.extend_from_slice(v),
                None => {
                    missing += 1;
                    data.extend_from_slice(&zeros);
                }
            }
        }
        if missing > 0 {
            log::warn!("{missing} vocabulary word(s) have no embedding; using zeros");
        }
        let embeddings = Tensor::matrix(vocabulary.len(), dim, data)?;
        Ok(Self {
            vocabulary,
            embeddings,
        })
    }

    pub fn from_parts(vocabulary: Vocabulary, embeddings: Tensor) -> Result<Self, EncodeError> {
        if embeddings.rows() != vocabulary.len() || !embeddings.is_matrix() {
            return Err(EncodeError::Dimension {
                what: "lexicon rows",
                expected: vocabulary.len(),
                got: embeddings.rows(),
            });
        }
        Ok(Self {
            vocabulary,
            embeddings,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn word_dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Tokenizes and drops out-of-vocabulary words.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, EncodeError> {
        let tokens: Vec<usize> = tokenize(text)
            .iter()
            .filter_map(|w| self.vocabulary.get(w))
            .collect();
        if tokens.is_empty() {
            return Err(EncodeError::EmptySentence(text.to_string()));
        }
        Ok(TokenSequence {
            tokens,
            text: text.to_string(),
        })
    }

    /// Average of the one-hot vectors of the tokens.
    pub fn bag_of_words(&self, sentence: &TokenSequence) -> Result<Tensor, EncodeError> {
        self.check(sentence)?;
        let mut counts = vec![0usize; self.vocabulary.len()];
        for &t in &sentence.tokens {
            counts[t] += 1;
        }
        let m = sentence.tokens.len() as f64;
        let data = counts.into_iter().map(|c| c as f64 / m).collect();
        Ok(Tensor::matrix(1, self.vocabulary.len(), data)?)
    }

    /// `m x E` matrix of token vectors.
    pub fn embed(&self, sentence: &TokenSequence) -> Result<Tensor, EncodeError> {
        self.check(sentence)?;
        let dim = self.word_dim();
        let mut data = Vec::with_capacity(sentence.tokens.len() * dim);
        for &t in &sentence.tokens {
            data.extend_from_slice(self.embeddings.row(t));
        }
        Ok(Tensor::matrix(sentence.tokens.len(), dim, data)?)
    }

    fn check(&self, sentence: &TokenSequence) -> Result<(), EncodeError> {
        if sentence.tokens.is_empty() {
            return Err(EncodeError::EmptySentence(sentence.text.clone()));
        }
        if let Some(&bad) = sentence.tokens.iter().find(|&&t| t >= self.vocabulary.len()) {
            return Err(EncodeError::TokenIndex {
                index: bad,
                vocab: self.vocabulary.len(),
            });
        }
        Ok(())
    }
}
