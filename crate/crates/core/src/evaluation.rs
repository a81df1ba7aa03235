//! Inferred average precision over stratified, partially judged pools.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::par::Execution;
use crate::retrieval::RankedList;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: judgment {value:?} is not one of -1, 0, 1")]
    BadJudgment { line: usize, value: String },
    #[error("line {line}: shot {shot} of topic {topic} appears in more than one stratum")]
    ShotInTwoStrata {
        line: usize,
        topic: String,
        shot: String,
    },
    #[error("line {line}: shot {shot} judged twice in topic {topic}")]
    Duplicate {
        line: usize,
        topic: String,
        shot: String,
    },
    #[error("topic {topic}: stratum {stratum} has no judged shots")]
    EmptyStratum { topic: String, stratum: String },
    #[error("topic {0} is not in the judgment pool")]
    UnknownTopic(String),
    #[error("topic {0} has no judged relevant shots; score is undefined")]
    NoRelevant(String),
    #[error("rank {k} is outside the run of length {len}")]
    RankOutOfRange { k: usize, len: usize },
    #[error("topic {topic}: shot at rank {k} is not judged relevant")]
    NotRelevant { topic: String, k: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Judgment {
    Unjudged,
    NonRelevant,
    Relevant,
}

impl Judgment {
    pub fn code(self) -> i8 {
        match self {
            Judgment::Unjudged => -1,
            Judgment::NonRelevant => 0,
            Judgment::Relevant => 1,
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "-1" => Some(Judgment::Unjudged),
            "0" => Some(Judgment::NonRelevant),
            "1" => Some(Judgment::Relevant),
            _ => None,
        }
    }
}

/// One qrels line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Qrel {
    pub topic: String,
    pub stratum: String,
    pub shot: String,
    pub judgment: Judgment,
}

pub fn format_qrels(qrels: &[Qrel]) -> String {
    let mut out = String::new();
    for q in qrels {
        writeln!(out, "{} {} {} {}", q.topic, q.stratum, q.shot, q.judgment.code()).unwrap();
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stratum {
    pub id: String,
    pub pooled: BTreeSet<String>,
    pub relevant: BTreeSet<String>,
    pub nonrelevant: BTreeSet<String>,
}

impl Stratum {
    pub fn judged(&self) -> usize {
        self.relevant.len() + self.nonrelevant.len()
    }

    /// Fraction of pooled shots that were judged.
    pub fn rate(&self) -> f64 {
        self.judged() as f64 / self.pooled.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicPool {
    strata: Vec<Stratum>,
    stratum_of: HashMap<String, usize>,
}

impl TopicPool {
    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum_of(&self, shot: &str) -> Option<usize> {
        self.stratum_of.get(shot).copied()
    }

    pub fn judgment(&self, shot: &str) -> Option<Judgment> {
        let s = &self.strata[self.stratum_of(shot)?];
        Some(if s.relevant.contains(shot) {
            Judgment::Relevant
        } else if s.nonrelevant.contains(shot) {
            Judgment::NonRelevant
        } else {
            Judgment::Unjudged
        })
    }

    /// Estimated number of relevant shots, `sum_t |rel_t| / rate_t`.
    pub fn estimated_relevant(&self) -> f64 {
        self.strata
            .iter()
            .map(|s| s.relevant.len() as f64 / s.rate())
            .sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JudgmentPool {
    topics: BTreeMap<String, TopicPool>,
}

impl JudgmentPool {
    pub fn from_qrels(qrels: &[Qrel]) -> Result<Self, EvalError> {
        Self::build(qrels.iter().enumerate().map(|(i, q)| (i + 1, q.clone())))
    }

    fn build(lines: impl Iterator<Item = (usize, Qrel)>) -> Result<Self, EvalError> {
        let mut topics: BTreeMap<String, TopicPool> = BTreeMap::new();
        for (line, q) in lines {
            let topic = topics.entry(q.topic.clone()).or_default();
            let idx = match topic.strata.iter().position(|s| s.id == q.stratum) {
                Some(i) => i,
                None => {
                    topic.strata.push(Stratum {
                        id: q.stratum.clone(),
                        ..Stratum::default()
                    });
                    topic.strata.len() - 1
                }
            };
            match topic.stratum_of.get(&q.shot) {
                Some(&other) if other != idx => {
                    return Err(EvalError::ShotInTwoStrata {
                        line,
                        topic: q.topic,
                        shot: q.shot,
                    })
                }
                Some(_) => {
                    return Err(EvalError::Duplicate {
                        line,
                        topic: q.topic,
                        shot: q.shot,
                    })
                }
                None => {}
            }
            topic.stratum_of.insert(q.shot.clone(), idx);
            let s = &mut topic.strata[idx];
            s.pooled.insert(q.shot.clone());
            match q.judgment {
                Judgment::Relevant => {
                    s.relevant.insert(q.shot);
                }
                Judgment::NonRelevant => {
                    s.nonrelevant.insert(q.shot);
                }
                Judgment::Unjudged => {}
            }
        }
        for (name, topic) in &topics {
            if let Some(s) = topic.strata.iter().find(|s| s.judged() == 0) {
                return Err(EvalError::EmptyStratum {
                    topic: name.clone(),
                    stratum: s.id.clone(),
                });
            }
        }
        if topics.is_empty() {
            return Err(EvalError::Empty("qrels"));
        }
        Ok(Self { topics })
    }

    pub fn topic(&self, id: &str) -> Option<&TopicPool> {
        self.topics.get(id)
    }

    pub fn topics(&self) -> impl Iterator<Item = (&str, &TopicPool)> {
        self.topics.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Parses `topic stratum shot judgment` lines.
pub fn parse_qrels(source: &str) -> Result<JudgmentPool, EvalError> {
    let mut parsed = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [topic, stratum, shot, judgment] = fields[..] else {
            return Err(EvalError::Malformed {
                line: line_no,
                reason: "expected `topic stratum shot judgment`".into(),
            });
        };
        let judgment = Judgment::from_code(judgment).ok_or_else(|| EvalError::BadJudgment {
            line: line_no,
            value: judgment.to_string(),
        })?;
        parsed.push((
            line_no,
            Qrel {
                topic: topic.into(),
                stratum: stratum.into(),
                shot: shot.into(),
                judgment,
            },
        ));
    }
    JudgmentPool::build(parsed.into_iter())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(EvalError::BadEpsilon(self.epsilon))
        }
    }
}

/// Running per-stratum counts of the shots ranked so far.
struct Above {
    pooled: Vec<usize>,
    relevant: Vec<usize>,
    nonrelevant: Vec<usize>,
}

impl Above {
    fn new(strata: usize) -> Self {
        Self {
            pooled: vec![0; strata],
            relevant: vec![0; strata],
            nonrelevant: vec![0; strata],
        }
    }

    fn push(&mut self, pool: &TopicPool, shot: &str) {
        if let Some(t) = pool.stratum_of(shot) {
            self.pooled[t] += 1;
            match pool.judgment(shot) {
                Some(Judgment::Relevant) => self.relevant[t] += 1,
                Some(Judgment::NonRelevant) => self.nonrelevant[t] += 1,
                _ => {}
            }
        }
    }

    /// Expected precision at rank `k` given that the shots pushed so far are
    /// exactly ranks `1..k`.
    fn precision(&self, k: usize, epsilon: f64) -> f64 {
        if k == 1 {
            return 1.0;
        }
        let above = (k - 1) as f64;
        let mut sum = 0.0;
        for t in 0..self.pooled.len() {
            if self.pooled[t] == 0 {
                continue;
            }
            let rel = self.relevant[t] as f64;
            let non = self.nonrelevant[t] as f64;
            sum += (self.pooled[t] as f64 / above) * (rel + epsilon) / (rel + non + 2.0 * epsilon);
        }
        1.0 / k as f64 + (above / k as f64) * sum
    }
}

fn topic_pool<'p>(run: &RankedList, pool: &'p JudgmentPool) -> Result<&'p TopicPool, EvalError> {
    pool.topic(&run.topic_id)
        .ok_or_else(|| EvalError::UnknownTopic(run.topic_id.clone()))
}

/// Estimated precision at rank `k` (1-based) of a run whose shot at rank
/// `k` is judged relevant.
pub fn expected_precision_at_k(
    run: &RankedList,
    pool: &JudgmentPool,
    k: usize,
    epsilon: f64,
) -> Result<f64, EvalError> {
    EvalConfig { epsilon }.validate()?;
    let topic = topic_pool(run, pool)?;
    if k == 0 || k > run.entries.len() {
        return Err(EvalError::RankOutOfRange {
            k,
            len: run.entries.len(),
        });
    }
    if topic.judgment(&run.entries[k - 1].0) != Some(Judgment::Relevant) {
        return Err(EvalError::NotRelevant {
            topic: run.topic_id.clone(),
            k,
        });
    }
    let mut above = Above::new(topic.strata().len());
    for (shot, _) in &run.entries[..k - 1] {
        above.push(topic, shot);
    }
    Ok(above.precision(k, epsilon))
}

/// Extended inferred average precision of one topic's run.
pub fn xinfap(run: &RankedList, pool: &JudgmentPool, epsilon: f64) -> Result<f64, EvalError> {
    EvalConfig { epsilon }.validate()?;
    let topic = topic_pool(run, pool)?;
    let r_hat = topic.estimated_relevant();
    if r_hat == 0.0 {
        return Err(EvalError::NoRelevant(run.topic_id.clone()));
    }
    let rates: Vec<f64> = topic.strata().iter().map(Stratum::rate).collect();
    let mut above = Above::new(rates.len());
    let mut total = 0.0;
    for (i, (shot, _)) in run.entries.iter().enumerate() {
        if topic.judgment(shot) == Some(Judgment::Relevant) {
            let t = topic.stratum_of(shot).expect("judged shots are pooled");
            total += above.precision(i + 1, epsilon) / rates[t];
        }
        above.push(topic, shot);
    }
    Ok((total / r_hat).clamp(0.0, 1.0))
}

pub fn mean_xinfap(scores: &[f64]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty("score set"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicScore {
    pub topic: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<TopicScore>,
    pub mean: f64,
}

/// Scores every run (one per topic), in run order.
pub fn evaluate_runs(
    runs: &[RankedList],
    pool: &JudgmentPool,
    config: EvalConfig,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if runs.is_empty() {
        return Err(EvalError::Empty("run"));
    }
    let scores = exec.map(runs, |run| xinfap(run, pool, config.epsilon));
    let mut rows = Vec::with_capacity(runs.len());
    for (run, score) in runs.iter().zip(scores) {
        rows.push(TopicScore {
            topic: run.topic_id.clone(),
            score: score?,
        });
    }
    let mean = mean_xinfap(&rows.iter().map(|r| r.score).collect::<Vec<_>>())?;
    Ok(EvalReport { rows, mean })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.topic.len())
            .chain(["Mean XinfAP".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<width$}  XinfAP\n", "Topic");
        for r in &self.rows {
            writeln!(out, "{:<width$}  {:.4}", r.topic, r.score).unwrap();
        }
        writeln!(out, "{:<width$}  {:.4}", "Mean XinfAP", self.mean).unwrap();
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("topic\txinfap\n");
        for r in &self.rows {
            writeln!(out, "{}\t{:.6}", r.topic, r.score).unwrap();
        }
        writeln!(out, "MEAN\t{:.6}", self.mean).unwrap();
        out
    }
}

/// Paired per-topic scores of two runs over the same topics.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub left_name: String,
    pub right_name: String,
    pub rows: Vec<(String, f64, f64)>,
    pub left_mean: f64,
    pub right_mean: f64,
}

pub fn compare(
    left_name: &str,
    left: &EvalReport,
    right_name: &str,
    right: &EvalReport,
) -> Result<Comparison, EvalError> {
    let right_by_topic: HashMap<&str, f64> = right
        .rows
        .iter()
        .map(|r| (r.topic.as_str(), r.score))
        .collect();
    let mut rows = Vec::with_capacity(left.rows.len());
    for r in &left.rows {
        let b = right_by_topic
            .get(r.topic.as_str())
            .ok_or_else(|| EvalError::UnknownTopic(r.topic.clone()))?;
        rows.push((r.topic.clone(), r.score, *b));
    }
    if rows.len() != right.rows.len() {
        let known: BTreeSet<&str> = left.rows.iter().map(|r| r.topic.as_str()).collect();
        let extra = right
            .rows
            .iter()
            .find(|r| !known.contains(r.topic.as_str()))
            .map(|r| r.topic.clone())
            .unwrap_or_default();
        return Err(EvalError::UnknownTopic(extra));
    }
    Ok(Comparison {
        left_name: left_name.into(),
        right_name: right_name.into(),
        rows,
        left_mean: left.mean,
        right_mean: right.mean,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.0.len())
            .chain(["Mean XinfAP".len()])
            .max()
            .unwrap_or(0);
        let (l, r) = (&self.left_name, &self.right_name);
        let (lw, rw) = (l.len().max(6), r.len().max(6));
        let mut out = format!("{:<width$}  {l:>lw$}  {r:>rw$}   delta\n", "Topic");
        for (topic, a, b) in &self.rows {
            writeln!(out, "{topic:<width$}  {a:>lw$.4}  {b:>rw$.4}  {:+.4}", b - a).unwrap();
        }
        let (a, b) = (self.left_mean, self.right_mean);
        writeln!(out, "{:<width$}  {a:>lw$.4}  {b:>rw$.4}  {:+.4}", "Mean XinfAP", b - a).unwrap();
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("topic\t{}\t{}\tdelta\n", self.left_name, self.right_name);
        for (topic, a, b) in &self.rows {
            writeln!(out, "{topic}\t{a:.6}\t{b:.6}\t{:.6}", b - a).unwrap();
        }
        let (a, b) = (self.left_mean, self.right_mean);
        writeln!(out, "MEAN\t{a:.6}\t{b:.6}\t{:.6}", b - a).unwrap();
        out
    }
}
