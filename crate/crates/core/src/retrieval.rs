//! Shot index and ranked retrieval for concept queries.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::encoders::{
    encode_text, encode_video, similarity, CommonSpaceVector, EncodeError, EncoderParams,
    FeatureSequence, Lexicon,
};
use crate::par::Execution;
use crate::taxonomy::AugmentedQuery;

const INDEX_MAGIC: &[u8; 4] = b"DIDX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("shot {shot}: {source}")]
    Shot {
        shot: String,
        #[source]
        source: EncodeError,
    },
    #[error("duplicate shot id {0}")]
    DuplicateShot(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("k must be at least 1")]
    BadK,
    #[error("index was built with parameters {index}, but the model is {params}")]
    Fingerprint { index: String, params: String },
    #[error("query {0}: every sentence is out of vocabulary")]
    AllOutOfVocabulary(String),
    #[error("bad index file: {0}")]
    Format(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Encoded corpus, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotIndex {
    pub fingerprint: String,
    pub shots: Vec<(String, CommonSpaceVector)>,
}

impl ShotIndex {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shots.first().map_or(0, |s| s.1.dim())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&(self.shots.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for (id, v) in &self.shots {
            put_str(&mut out, id);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(RetrievalError::Format("missing DIDX magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION as usize {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let fingerprint = r.string()?;
        let count = r.u32()?;
        let dim = r.u32()?;
        let mut shots = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let id = r.string()?;
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateShot(id));
            }
            let values = r
                .take(dim * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            shots.push((id, CommonSpaceVector::from_unit(values)));
        }
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        Ok(Self { fingerprint, shots })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RetrievalError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String, RetrievalError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RetrievalError::Format("non UTF-8 string".into()))
    }
}

/// Encodes every shot with the video branch.
pub fn build_index(
    shots: &[FeatureSequence],
    params: &EncoderParams,
    exec: Execution,
) -> Result<ShotIndex, RetrievalError> {
    if shots.is_empty() {
        return Err(RetrievalError::Empty("shot corpus"));
    }
    let mut seen = HashSet::new();
    for s in shots {
        if !seen.insert(s.shot_id.as_str()) {
            return Err(RetrievalError::DuplicateShot(s.shot_id.clone()));
        }
    }
    let encoded = exec.map(shots, |s| encode_video(s, params).map(|(_, v)| v));
    let mut out = Vec::with_capacity(shots.len());
    for (shot, v) in shots.iter().zip(encoded) {
        let v = v.map_err(|source| RetrievalError::Shot {
            shot: shot.shot_id.clone(),
            source,
        })?;
        out.push((shot.shot_id.clone(), v));
    }
    Ok(ShotIndex {
        fingerprint: params.fingerprint(),
        shots: out,
    })
}

/// How scores of several query sentences are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean of per-sentence cosine scores.
    #[default]
    MeanScore,
    /// Cosine against the normalized mean of sentence embeddings.
    MeanEmbedding,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean-score" => Ok(Aggregation::MeanScore),
            "mean-embedding" => Ok(Aggregation::MeanEmbedding),
            _ => Err(format!("unknown aggregation {s:?} (mean-score | mean-embedding)")),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::MeanScore => "mean-score",
            Aggregation::MeanEmbedding => "mean-embedding",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub topic_id: String,
    pub entries: Vec<(String, f64)>,
}

/// Query sentences in the common space. Sentences with no known words are
/// skipped with a warning.
pub fn encode_query(
    query: &AugmentedQuery,
    lexicon: &Lexicon,
    params: &EncoderParams,
) -> Result<Vec<CommonSpaceVector>, RetrievalError> {
    let mut out = Vec::with_capacity(query.sentences.len());
    for sentence in &query.sentences {
        let tokens = match lexicon.tokenize(sentence) {
            Ok(t) => t,
            Err(EncodeError::EmptySentence(_)) => {
                log::warn!("{}: skipping out-of-vocabulary sentence {sentence:?}", query.concept_id);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        out.push(encode_text(&tokens, lexicon, params)?.1);
    }
    if out.is_empty() {
        return Err(RetrievalError::AllOutOfVocabulary(query.concept_id.clone()));
    }
    Ok(out)
}

/// Score-descending, then shot id ascending.
pub fn sort_entries(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Ranks indexed shots against already encoded query sentences.
pub fn rank_encoded(
    topic_id: &str,
    sentences: &[CommonSpaceVector],
    index: &ShotIndex,
    k: usize,
    aggregation: Aggregation,
    exec: Execution,
) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::BadK);
    }
    if sentences.is_empty() {
        return Err(RetrievalError::AllOutOfVocabulary(topic_id.to_string()));
    }
    let pooled;
    let sentences = match aggregation {
        Aggregation::MeanScore => sentences,
        Aggregation::MeanEmbedding => {
            let mut sum = vec![0.0; sentences[0].dim()];
            for s in sentences {
                for (acc, x) in sum.iter_mut().zip(s.values()) {
                    *acc += x;
                }
            }
            pooled = [CommonSpaceVector::normalized(sum)];
            &pooled[..]
        }
    };
    let count = sentences.len() as f64;
    let scores = exec.map(&index.shots, |(_, v)| {
        sentences.iter().map(|s| similarity(s, v)).sum::<f64>() / count
    });
    let mut entries: Vec<(String, f64)> = index
        .shots
        .iter()
        .zip(scores)
        .map(|((id, _), s)| (id.clone(), s))
        .collect();
    sort_entries(&mut entries);
    entries.truncate(k);
    Ok(RankedList {
        topic_id: topic_id.to_string(),
        entries,
    })
}

pub fn rank_shots(
    query: &AugmentedQuery,
    index: &ShotIndex,
    lexicon: &Lexicon,
    params: &EncoderParams,
    k: usize,
    aggregation: Aggregation,
    exec: Execution,
) -> Result<RankedList, RetrievalError> {
    let fingerprint = params.fingerprint();
    if index.fingerprint != fingerprint {
        return Err(RetrievalError::Fingerprint {
            index: index.fingerprint.clone(),
            params: fingerprint,
        });
    }
    if k == 0 {
        return Err(RetrievalError::BadK);
    }
    let sentences = encode_query(query, lexicon, params)?;
    rank_encoded(&query.concept_id, &sentences, index, k, aggregation, exec)
}

/// `topic Q0 shot rank score tag` lines.
pub fn format_run(lists: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for (i, (shot, score)) in list.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {:.6} {}", list.topic_id, shot, i + 1, score, tag).unwrap();
        }
    }
    out
}

/// Groups run lines by topic, in order of first appearance; entries are
/// ordered by rank.
pub fn parse_run(source: &str) -> Result<Vec<RankedList>, RetrievalError> {
    let mut lists: Vec<(RankedList, Vec<usize>, HashSet<String>)> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| RetrievalError::Malformed {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [topic, _q0, shot, rank, score, _tag] = fields[..] else {
            return Err(bad("expected `topic Q0 shot rank score tag`".into()));
        };
        let rank: usize = rank.parse().map_err(|_| bad(format!("bad rank {rank:?}")))?;
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        if rank == 0 {
            return Err(bad("ranks start at 1".into()));
        }
        let pos = match lists.iter().position(|l| l.0.topic_id == topic) {
            Some(p) => p,
            None => {
                lists.push((
                    RankedList {
                        topic_id: topic.into(),
                        entries: Vec::new(),
                    },
                    Vec::new(),
                    HashSet::new(),
                ));
                lists.len() - 1
            }
        };
        let (list, ranks, seen) = &mut lists[pos];
        if !seen.insert(shot.to_string()) {
            return Err(bad(format!("shot {shot} listed twice for topic {topic}")));
        }
        if ranks.contains(&rank) {
            return Err(bad(format!("rank {rank} repeated for topic {topic}")));
        }
        list.entries.push((shot.into(), score));
        ranks.push(rank);
    }
    if lists.is_empty() {
        return Err(RetrievalError::Empty("run file"));
    }
    Ok(lists
        .into_iter()
        .map(|(mut list, ranks, _)| {
            let mut order: Vec<usize> = (0..ranks.len()).collect();
            order.sort_by_key(|&i| ranks[i]);
            list.entries = order.into_iter().map(|i| list.entries[i].clone()).collect();
            list
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::encoders::{EmbeddingTable, EncoderConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> CommonSpaceVector {
        CommonSpaceVector::normalized(v)
    }

    fn index(vectors: Vec<(&str, Vec<f64>)>) -> ShotIndex {
        ShotIndex {
            fingerprint: "x".into(),
            shots: vectors.into_iter().map(|(id, v)| (id.to_string(), unit(v))).collect(),
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let idx = index(vec![("a", vec![1.0, 0.0]), ("b", vec![0.6, 0.8]), ("c", vec![0.0, 1.0])]);
        let q = [unit(vec![0.6, 0.8])];
        let list = rank_encoded("t", &q, &idx, 2, Aggregation::MeanScore, Execution::Sequential).unwrap();
        assert_eq!(list.entries.len(), 2);
        assert_eq!(list.entries[0].0, "b");
        assert!((list.entries[0].1 - 1.0).abs() < 1e-15);
        assert!(rank_encoded("t", &q, &idx, 0, Aggregation::MeanScore, Execution::Sequential).is_err());
        let all = rank_encoded("t", &q, &idx, 10, Aggregation::MeanScore, Execution::Parallel).unwrap();
        assert_eq!(all.entries.len(), 3);
    }

    #[test]
    fn ties_break_by_shot_id() {
        let idx = index(vec![("z", vec![1.0, 1.0]), ("m", vec![1.0, 1.0]), ("a", vec![0.0, 1.0])]);
        let q = [unit(vec![1.0, 0.0])];
        let list = rank_encoded("t", &q, &idx, 3, Aggregation::MeanScore, Execution::Sequential).unwrap();
        let ids: Vec<&str> = list.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["m", "z", "a"]);
    }

    #[test]
    fn aggregation_modes_differ() {
        let idx = index(vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let q = [unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let score = rank_encoded("t", &q, &idx, 2, Aggregation::MeanScore, Execution::Sequential).unwrap();
        assert!((score.entries[0].1 - 0.5).abs() < 1e-15);
        let emb = rank_encoded("t", &q, &idx, 2, Aggregation::MeanEmbedding, Execution::Sequential).unwrap();
        assert!((emb.entries[0].1 - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!("mean-embedding".parse::<Aggregation>().unwrap(), Aggregation::MeanEmbedding);
    }

    #[test]
    fn queries_need_known_words() {
        let cfg = EncoderConfig {
            feature_dim: 4,
            word_dim: 3,
            vocab_size: 2,
            hidden: 2,
            attention_dim: 2,
            conv_widths: vec![2],
            conv_filters: 2,
            common_dim: 3,
        };
        let params = EncoderParams::init(cfg, 0).unwrap();
        let vocab = build_vocabulary(&["boat ship"], 1).unwrap();
        let lex = Lexicon::new(vocab.clone(), &EmbeddingTable::random(vocab.words(), 3, 1)).unwrap();
        let shot = FeatureSequence::new("s", 4, vec![0.5; 8]).unwrap();
        let idx = build_index(std::slice::from_ref(&shot), &params, Execution::Sequential).unwrap();
        let query = AugmentedQuery {
            concept_id: "c".into(),
            sentences: vec!["zzz".into(), "a boat".into()],
        };
        let list = rank_shots(&query, &idx, &lex, &params, 5, Aggregation::MeanScore, Execution::Sequential).unwrap();
        assert_eq!(list.entries.len(), 1);
        let oov = AugmentedQuery {
            concept_id: "c".into(),
            sentences: vec!["zzz".into()],
        };
        assert!(matches!(
            rank_shots(&oov, &idx, &lex, &params, 5, Aggregation::MeanScore, Execution::Sequential),
            Err(RetrievalError::AllOutOfVocabulary(_))
        ));
        let other = EncoderParams::init(params.config().clone(), 1).unwrap();
        assert!(matches!(
            rank_shots(&query, &idx, &lex, &other, 5, Aggregation::MeanScore, Execution::Sequential),
            Err(RetrievalError::Fingerprint { .. })
        ));
        assert!(matches!(
            build_index(&[shot.clone(), shot], &params, Execution::Sequential),
            Err(RetrievalError::DuplicateShot(_))
        ));
        assert!(build_index(&[], &params, Execution::Sequential).is_err());
    }

    #[test]
    fn run_file_round_trip() {
        let lists = vec![
            RankedList {
                topic_id: "war".into(),
                entries: vec![("s2".into(), 0.9), ("s1".into(), 0.25)],
            },
            RankedList {
                topic_id: "education".into(),
                entries: vec![("s1".into(), -0.5)],
            },
        ];
        let text = format_run(&lists, "dualenc");
        assert!(text.starts_with("war Q0 s2 1 0.900000 dualenc\n"));
        assert_eq!(parse_run(&text).unwrap(), lists);
        let shuffled: String = text.lines().rev().map(|l| format!("{l}\n")).collect();
        let back = parse_run(&shuffled).unwrap();
        assert_eq!(back[1].entries, lists[0].entries);
        assert!(parse_run("").is_err());
        assert!(parse_run("t Q0 a 1 0.5 x\nt Q0 a 2 0.4 x\n").is_err());
        assert!(parse_run("t Q0 a one 0.5 x\n").is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let idx = index(vec![("a", vec![0.3, -0.7, 0.1]), ("b", vec![1.0, 2.0, 3.0])]);
        let back = ShotIndex::decode(&idx.encode()).unwrap();
        assert_eq!(back, idx);
        let mut bytes = idx.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(ShotIndex::decode(&bytes).is_err());
        assert!(ShotIndex::decode(b"NOPE").is_err());
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ShotIndex {
        ShotIndex {
            fingerprint: String::new(),
            shots: (0..n)
                .map(|i| {
                    let v = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (format!("s{i:03}"), unit(v))
                })
                .collect(),
        }
    }

    proptest! {
        #[test]
        fn length_is_min_k_and_size(n in 1usize..30, k in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, n, 4);
            let q = [unit(vec![1.0, 0.5, 0.0, -0.5])];
            let list = rank_encoded("t", &q, &idx, k, Aggregation::MeanScore, Execution::Sequential).unwrap();
            prop_assert_eq!(list.entries.len(), k.min(n));
            for w in list.entries.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }

        #[test]
        fn extra_shot_keeps_relative_order(n in 2usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, n, 5);
            let q = [unit(vec![0.2, 0.1, -0.3, 0.9, 0.0])];
            let before = rank_encoded("t", &q, &idx, n, Aggregation::MeanScore, Execution::Sequential).unwrap();
            let mut bigger = idx.clone();
            bigger.shots.push(("zz-new".into(), unit(vec![0.5, 0.5, 0.5, 0.5, 0.5])));
            let after = rank_encoded("t", &q, &bigger, n + 1, Aggregation::MeanScore, Execution::Sequential).unwrap();
            let filtered: Vec<&String> = after.entries.iter().map(|e| &e.0).filter(|id| *id != "zz-new").collect();
            let original: Vec<&String> = before.entries.iter().map(|e| &e.0).collect();
            prop_assert_eq!(filtered, original);
        }

        #[test]
        fn rescaled_query_keeps_order(n in 1usize..20, scale in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, n, 3);
            let raw = vec![0.4, -0.2, 0.7];
            let a = rank_encoded("t", &[unit(raw.clone())], &idx, n, Aggregation::MeanScore, Execution::Sequential).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
            let b = rank_encoded("t", &[unit(scaled)], &idx, n, Aggregation::MeanScore, Execution::Sequential).unwrap();
            let ids = |l: &RankedList| l.entries.iter().map(|e| e.0.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }
}
