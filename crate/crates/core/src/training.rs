//! Hardest-negative ranking loss, Adam, and the mini-batch training loop.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::corpus::{write_atomic, CorpusError};
use crate::encoders::{
    bind, similarity, text_forward, video_forward, CommonSpaceVector, EncodeError, EncoderParams,
    FeatureSequence, Lexicon, Network, TokenSequence,
};
use crate::par::Execution;
use crate::retrieval::sort_entries;

pub use crate::corpus::CaptionPair;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("caption {index} refers to unknown shot {shot}")]
    UnknownShot { index: usize, shot: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("batch size mismatch: {videos} videos, {texts} texts")]
    BatchMismatch { videos: usize, texts: usize },
    #[error("ranking loss needs at least 2 pairs, got {0}")]
    TooSmall(usize),
    #[error("K must be at least 1")]
    BadK,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Weights rounded to f32 after every update, matching the checkpoint.
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (f32 | f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            precision: Precision::F32,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epoch count must be at least 1");
        }
        Ok(())
    }
}

/// `S[i][j] = similarity(videos[i], texts[j])`.
pub fn similarity_matrix(
    videos: &[CommonSpaceVector],
    texts: &[CommonSpaceVector],
) -> Result<Tensor, TrainError> {
    if videos.len() != texts.len() {
        return Err(TrainError::BatchMismatch {
            videos: videos.len(),
            texts: texts.len(),
        });
    }
    if videos.is_empty() {
        return Err(TrainError::Empty("batch"));
    }
    let b = videos.len();
    let mut data = Vec::with_capacity(b * b);
    for v in videos {
        for t in texts {
            data.push(similarity(v, t));
        }
    }
    Ok(Tensor::matrix(b, b, data)?)
}

/// Hardest negative per row and per column; ties go to the lowest index.
fn hardest_negatives(s: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let b = s.rows();
    let pick = |score: &dyn Fn(usize) -> f64, i: usize| {
        let mut best = None;
        for j in (0..b).filter(|&j| j != i) {
            match best {
                Some((_, v)) if score(j) <= v => {}
                _ => best = Some((j, score(j))),
            }
        }
        best.expect("b >= 2").0
    };
    let rows = (0..b).map(|i| pick(&|j| s.get(i, j), i)).collect();
    let cols = (0..b).map(|i| pick(&|j| s.get(j, i), i)).collect();
    (rows, cols)
}

fn check_square(s: &Tensor) -> Result<(), TrainError> {
    if !s.is_matrix() || s.rows() != s.cols() {
        return Err(TrainError::Config(format!(
            "similarity matrix must be square, got {:?}",
            s.shape()
        )));
    }
    if s.rows() < 2 {
        return Err(TrainError::TooSmall(s.rows()));
    }
    Ok(())
}

/// Sum over anchors of the hinge on the hardest negative caption and the
/// hardest negative video.
pub fn ranking_loss(s: &Tensor, margin: f64) -> Result<f64, TrainError> {
    check_square(s)?;
    let (rows, cols) = hardest_negatives(s);
    let mut loss = 0.0;
    for i in 0..s.rows() {
        let pos = s.get(i, i);
        loss += (margin + s.get(i, rows[i]) - pos).max(0.0);
        loss += (margin + s.get(cols[i], i) - pos).max(0.0);
    }
    Ok(loss)
}

/// Same loss recorded on a tape.
pub fn ranking_loss_var(tape: &mut Tape<'_>, s: Var, margin: f64) -> Result<Var, TrainError> {
    let value = tape.value(s).clone();
    check_square(&value)?;
    let b = value.rows();
    let (rows, cols) = hardest_negatives(&value);
    let diag = tape.gather(s, (0..b).map(|i| (i, i)).collect())?;
    let row_neg = tape.gather(s, (0..b).map(|i| (i, rows[i])).collect())?;
    let col_neg = tape.gather(s, (0..b).map(|i| (cols[i], i)).collect())?;
    let mut terms = Vec::with_capacity(2);
    for neg in [row_neg, col_neg] {
        let gap = tape.sub(neg, diag)?;
        let gap = tape.add_scalar(gap, margin)?;
        let hinge = tape.hinge(gap)?;
        terms.push(tape.sum(hinge)?);
    }
    Ok(tape.add(terms[0], terms[1])?)
}

/// Captions paired with shot indices and tokenized for one lexicon.
#[derive(Clone, Debug)]
pub struct Dataset<'s> {
    pub shots: &'s [FeatureSequence],
    pub items: Vec<(usize, TokenSequence)>,
}

impl<'s> Dataset<'s> {
    /// Resolves shot ids and tokenizes captions. Captions with no known
    /// words are skipped with a warning.
    pub fn new(
        pairs: &[CaptionPair],
        shots: &'s [FeatureSequence],
        lexicon: &Lexicon,
    ) -> Result<Self, TrainError> {
        let by_id: HashMap<&str, usize> = shots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.shot_id.as_str(), i))
            .collect();
        let mut items = Vec::with_capacity(pairs.len());
        let mut skipped = 0;
        for (index, pair) in pairs.iter().enumerate() {
            let shot = *by_id.get(pair.shot_id.as_str()).ok_or_else(|| TrainError::UnknownShot {
                index,
                shot: pair.shot_id.clone(),
            })?;
            match lexicon.tokenize(&pair.caption) {
                Ok(tokens) => items.push((shot, tokens)),
                Err(EncodeError::EmptySentence(_)) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} caption(s) with no in-vocabulary words");
        }
        Ok(Self { shots, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn branch_network(params: &EncoderParams, vars: &[Var]) -> Network<Var> {
    params.layout().map(&mut |&i| vars[i])
}

/// Ranking loss of one batch recorded entirely on `tape`, with the network
/// weights given as tape variables in flat parameter order.
pub fn batch_loss(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    vars: &[Var],
    batch: &[(&FeatureSequence, &TokenSequence)],
    lexicon: &Lexicon,
    margin: f64,
) -> Result<Var, TrainError> {
    let net = branch_network(params, vars);
    let mut videos = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    for (shot, sentence) in batch {
        videos.push(video_forward(tape, &net, params.config(), shot)?.common);
        texts.push(text_forward(tape, &net, params.config(), lexicon, sentence)?.common);
    }
    let v = tape.stack_rows(&videos)?;
    let t = tape.stack_rows(&texts)?;
    let s = tape.matmul_nt(v, t)?;
    ranking_loss_var(tape, s, margin)
}

/// Loss and parameter gradients of one batch. Each pair is encoded on its
/// own tape (in parallel when `exec` allows); gradients are summed in batch
/// order so the result does not depend on scheduling.
pub fn loss_and_gradients(
    params: &EncoderParams,
    batch: &[(&FeatureSequence, &TokenSequence)],
    lexicon: &Lexicon,
    margin: f64,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::TooSmall(batch.len()));
    }
    let forwards = exec.map(batch, |&(shot, sentence)| -> Result<_, TrainError> {
        let mut tape = Tape::new();
        let (net, flat) = bind(&mut tape, params);
        let v = video_forward(&mut tape, &net, params.config(), shot)?.common;
        let t = text_forward(&mut tape, &net, params.config(), lexicon, sentence)?.common;
        let joined = tape.concat(&[v, t])?;
        Ok((tape, flat, joined))
    });
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<_, _>>()?;
    let d = params.config().common_dim;

    let mut head = Tape::new();
    let mut v_rows = Vec::with_capacity(batch.len());
    let mut t_rows = Vec::with_capacity(batch.len());
    for (tape, _, joined) in &forwards {
        let data = tape.value(*joined).data();
        v_rows.push(data[..d].to_vec());
        t_rows.push(data[d..].to_vec());
    }
    let v = head.leaf(Tensor::from_rows(&v_rows)?);
    let t = head.leaf(Tensor::from_rows(&t_rows)?);
    let s = head.matmul_nt(v, t)?;
    let loss_var = ranking_loss_var(&mut head, s, margin)?;
    let loss = head.scalar(loss_var);
    let grads = head.backward(loss_var)?;
    let dv = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(batch.len(), d));
    let dt = grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(batch.len(), d));

    let per_item = exec.map_range(forwards.len(), |i| -> Result<Vec<Option<Tensor>>, TrainError> {
        let (tape, flat, joined) = &forwards[i];
        let mut seed = dv.row(i).to_vec();
        seed.extend_from_slice(dt.row(i));
        let mut g = tape.backward_with(*joined, Tensor::matrix(1, 2 * d, seed)?)?;
        Ok(flat.iter().map(|&var| g.take(var)).collect())
    });

    let mut total: Vec<Tensor> = params.tensors().map(Tensor::zeros_like).collect();
    for item in per_item {
        for (acc, g) in total.iter_mut().zip(item?) {
            if let Some(g) = g {
                acc.add_assign(&g);
            }
        }
    }
    Ok((loss, total))
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &EncoderParams, config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            step: 0,
            m: params.tensors().map(Tensor::zeros_like).collect(),
            v: params.tensors().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<'p>(&mut self, params: impl Iterator<Item = &'p mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Batches of dataset indices for one epoch, drawn from a shuffle seeded by
/// `seed` and `epoch`. A trailing batch of one pair is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Summed batch loss divided by the number of pairs seen.
    pub mean_loss: f64,
    pub batches: usize,
    pub pairs: usize,
}

pub fn train_epoch(
    data: &Dataset<'_>,
    lexicon: &Lexicon,
    params: &mut EncoderParams,
    optimizer: &mut Adam,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    config.validate()?;
    if data.len() < 2 {
        return Err(TrainError::Empty("training set"));
    }
    let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
    let mut loss_sum = 0.0;
    let mut pairs = 0;
    for (b, indices) in batches.iter().enumerate() {
        let batch: Vec<(&FeatureSequence, &TokenSequence)> = indices
            .iter()
            .map(|&i| {
                let (shot, tokens) = &data.items[i];
                (&data.shots[*shot], tokens)
            })
            .collect();
        let (loss, grads) = loss_and_gradients(params, &batch, lexicon, config.margin, config.execution)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { epoch, batch: b });
        }
        optimizer.update(params.tensors_mut(), &grads);
        if config.precision == Precision::F32 {
            params.quantize_f32();
        }
        loss_sum += loss;
        pairs += indices.len();
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / pairs as f64,
        batches: batches.len(),
        pairs,
    })
}

/// Rank (1-based) of the matching shot for every validation caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub ranks: Vec<usize>,
}

impl ValidationReport {
    pub fn recall_at(&self, k: usize) -> Result<f64, TrainError> {
        if k == 0 {
            return Err(TrainError::BadK);
        }
        let hits = self.ranks.iter().filter(|&&r| r <= k).count();
        Ok(hits as f64 / self.ranks.len() as f64)
    }

    pub fn median_rank(&self) -> f64 {
        let mut r = self.ranks.clone();
        r.sort_unstable();
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2] as f64
        } else {
            (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
        }
    }
}

/// Ranks every validation shot for each caption. The candidate set is the
/// shots referenced by `data`, ties broken by ascending shot id.
pub fn validation_ranks(
    data: &Dataset<'_>,
    lexicon: &Lexicon,
    params: &EncoderParams,
    exec: Execution,
) -> Result<ValidationReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("validation set"));
    }
    let mut candidates: Vec<usize> = data.items.iter().map(|(s, _)| *s).collect();
    candidates.sort_unstable();
    candidates.dedup();
    let videos = exec.map(&candidates, |&s| {
        crate::encoders::encode_video(&data.shots[s], params).map(|(_, v)| v)
    });
    let videos: Vec<CommonSpaceVector> = videos.into_iter().collect::<Result<_, _>>()?;
    let ranks = exec.map(&data.items, |(shot, tokens)| -> Result<usize, TrainError> {
        let (_, text) = crate::encoders::encode_text(tokens, lexicon, params)?;
        let mut scored: Vec<(String, f64)> = candidates
            .iter()
            .zip(&videos)
            .map(|(&s, v)| (data.shots[s].shot_id.clone(), similarity(v, &text)))
            .collect();
        sort_entries(&mut scored);
        let target = &data.shots[*shot].shot_id;
        Ok(scored.iter().position(|(id, _)| id == target).expect("target is a candidate") + 1)
    });
    Ok(ValidationReport {
        ranks: ranks.into_iter().collect::<Result<_, _>>()?,
    })
}

/// Recall@K and median rank of the matching shot per caption.
pub fn validation_recall(
    data: &Dataset<'_>,
    lexicon: &Lexicon,
    params: &EncoderParams,
    k: usize,
    exec: Execution,
) -> Result<(f64, f64), TrainError> {
    if k == 0 {
        return Err(TrainError::BadK);
    }
    let report = validation_ranks(data, lexicon, params, exec)?;
    Ok((report.recall_at(k)?, report.median_rank()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stats: EpochStats,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub median_rank: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        write!(
            f,
            "{} {:.6} {} {} {}",
            self.stats.epoch,
            self.stats.mean_loss,
            opt(self.recall_at_1),
            opt(self.recall_at_5),
            self.median_rank.map_or_else(|| "-".to_string(), |x| format!("{x}"))
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: EncoderParams,
    pub best: EncoderParams,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Runs `config.epochs` epochs. After each epoch the validation recall is
/// measured (when a validation set is given); the best recall@1 wins, with
/// the latest epoch kept on ties. When `out_dir` is set, `last.denc`,
/// `best.denc` and `train.log` are rewritten every epoch.
pub fn train(
    train_data: &Dataset<'_>,
    validation: Option<&Dataset<'_>>,
    lexicon: &Lexicon,
    mut params: EncoderParams,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_data.len() < 2 {
        return Err(TrainError::Empty("training set"));
    }
    if config.precision == Precision::F32 {
        params.quantize_f32();
    }
    let mut optimizer = Adam::new(&params, config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut log = String::new();
    for epoch in 1..=config.epochs {
        let stats = train_epoch(train_data, lexicon, &mut params, &mut optimizer, config, epoch)?;
        let (r1, r5, median) = match validation {
            Some(v) if !v.is_empty() => {
                let report = validation_ranks(v, lexicon, &params, config.execution)?;
                (
                    Some(report.recall_at(1)?),
                    Some(report.recall_at(5)?),
                    Some(report.median_rank()),
                )
            }
            _ => (None, None, None),
        };
        let score = r1.unwrap_or(f64::INFINITY);
        if score >= best_recall {
            best_recall = score;
            best = params.clone();
            best_epoch = epoch;
        }
        let entry = EpochLog {
            stats,
            recall_at_1: r1,
            recall_at_5: r5,
            median_rank: median,
        };
        log::info!("epoch {entry}");
        log.push_str(&format!("{entry}\n"));
        history.push(entry);
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("last.denc"), &checkpoint::encode(params.named()))?;
            if best_epoch == epoch {
                write_atomic(&dir.join("best.denc"), &checkpoint::encode(best.named()))?;
            }
            write_atomic(&dir.join("train.log"), log.as_bytes())?;
        }
    }
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        history,
    })
}
