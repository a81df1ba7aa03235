use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualenc::autodiff::{checkpoint, grad_check, Tape, DEFAULT_STEP};
use dualenc::corpus::{
    build_vocabulary, generate_synthetic_corpus, load_captions, load_embeddings, load_features, write_atomic,
    SyntheticCorpusSpec, Vocabulary, DEFAULT_MIN_FREQUENCY,
};
use dualenc::encoders::{EmbeddingTable, EncoderConfig, EncoderParams, FeatureSequence, Lexicon};
use dualenc::evaluation::{compare, evaluate_runs, parse_qrels, EvalConfig, DEFAULT_EPSILON};
use dualenc::par::Execution;
use dualenc::retrieval::{build_index, format_run, parse_run, rank_shots, Aggregation, ShotIndex};
use dualenc::taxonomy::{load_taxonomy, shipped_taxonomy, Category, ConceptTree};
use dualenc::training::{batch_loss, train, Dataset, Precision, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Settings;
use crate::error::CliError;

/// Record of one subcommand invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub configuration: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub fingerprint: Option<String>,
    pub duration_seconds: f64,
}

/// Shared state of one invocation.
pub struct Run {
    pub settings: Settings,
    pub exec: Execution,
    subcommand: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seed: Option<u64>,
    fingerprint: Option<String>,
}

impl Run {
    pub fn new(subcommand: &'static str, settings: Settings, exec: Execution) -> Self {
        Self {
            settings,
            exec,
            subcommand,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            fingerprint: None,
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    fn write(&mut self, name: &str, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        self.output(name, path);
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.display().to_string());
    }

    /// Writes the manifest to `path` after checking that every listed
    /// output exists.
    fn finish(self, path: &Path) -> Result<RunManifest, CliError> {
        self.settings.finish()?;
        for (name, out) in &self.outputs {
            if !Path::new(out).exists() {
                return Err(CliError::data(format!("output {name} missing at {out}")));
            }
        }
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            configuration: self.settings.resolved().clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            fingerprint: self.fingerprint,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(path, format!("{json}\n").as_bytes())?;
        Ok(manifest)
    }
}

/// Ranked list depth when neither `--k` nor a `k` key is given.
pub const DEFAULT_K: usize = 1000;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn load_tree(path: Option<&Path>) -> Result<ConceptTree, CliError> {
    match path {
        None => Ok(shipped_taxonomy()),
        Some(p) => Ok(load_taxonomy(&read_file(p)?)?),
    }
}

pub fn taxonomy_validate(taxonomy: Option<&Path>, extend: Option<&Path>) -> Result<String, CliError> {
    let mut tree = load_tree(taxonomy)?;
    if let Some(ext) = extend {
        tree = tree.extended(&read_file(ext)?)?;
    }
    let mut out = format!(
        "{} concepts: {} level-1, {} level-2, {} categories\n",
        tree.len(),
        tree.level_count(1),
        tree.level_count(2),
        tree.categories().count()
    );
    for category in Category::ALL {
        let roots = if tree.categories().any(|c| c == category) {
            tree.roots(category).len()
        } else {
            0
        };
        out.push_str(&format!("  {category}: {roots} level-1\n"));
    }
    Ok(out)
}

pub fn synth(mut run: Run, out: &Path) -> Result<RunManifest, CliError> {
    let d = SyntheticCorpusSpec::default();
    let s = &mut run.settings;
    let spec = SyntheticCorpusSpec {
        prototypes: s.get("prototypes", d.prototypes)?,
        shots_per_prototype: s.get("shots_per_prototype", d.shots_per_prototype)?,
        frames_per_shot: s.get("frames_per_shot", d.frames_per_shot)?,
        feature_dim: s.get("feature_dim", d.feature_dim)?,
        word_dim: s.get("word_dim", d.word_dim)?,
        captions_per_shot: s.get("captions_per_shot", d.captions_per_shot)?,
        validation_per_prototype: s.get("validation_per_prototype", d.validation_per_prototype)?,
        noise: s.get("noise", d.noise)?,
        attribute_scale: s.get("attribute_scale", d.attribute_scale)?,
        nuisance: s.get("nuisance", d.nuisance)?,
        label_rate: s.get("label_rate", d.label_rate)?,
        judged_rate: s.get("judged_rate", d.judged_rate)?,
        templates: d.templates,
        seed: s.get("seed", d.seed)?,
    };
    s.finish()?;
    run.seed = Some(spec.seed);
    let corpus = generate_synthetic_corpus(&spec)?;
    create_dir(out)?;
    let written = corpus.write_to(out)?;
    for (name, file) in &written.files {
        run.output(name, &out.join(file));
    }
    run.output("manifest", &out.join("manifest.json"));
    let train_conf = format!(
        "# Training settings for this synthetic corpus\n\
         features = features.feat\n\
         train_captions = captions.train.tsv\n\
         validation_captions = captions.val.tsv\n\
         embeddings = embeddings.txt\n\
         min_frequency = 1\n\
         learning_rate = 0.002\n\
         epochs = 40\n\
         seed = {}\n",
        spec.seed
    );
    run.write("train_config", &out.join("train.conf"), train_conf.as_bytes())?;
    run.finish(&out.join("run_manifest.json"))
}

fn load_lexicon(vocab: &Path, embeddings: &Path) -> Result<Lexicon, CliError> {
    let vocabulary = Vocabulary::parse(&read_file(vocab)?)?;
    let table = load_embeddings(embeddings)?;
    Ok(Lexicon::new(vocabulary, &table)?)
}

pub fn load_params(path: &Path) -> Result<EncoderParams, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let named = checkpoint::read(&bytes[..]).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(EncoderParams::from_named(&named)?)
}

fn default_vocab(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("vocab.tsv")
}

pub fn cmd_train(mut run: Run, out: &Path) -> Result<RunManifest, CliError> {
    let s = &mut run.settings;
    let features_path = s.required_path("features")?;
    let train_path = s.required_path("train_captions")?;
    let val_path = s.path("validation_captions")?;
    let embeddings_path = s.required_path("embeddings")?;
    let min_frequency: usize = s.get("min_frequency", DEFAULT_MIN_FREQUENCY)?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        margin: s.get("margin", d.margin)?,
        learning_rate: s.get("learning_rate", d.learning_rate)?,
        beta1: s.get("beta1", d.beta1)?,
        beta2: s.get("beta2", d.beta2)?,
        adam_epsilon: s.get("adam_epsilon", d.adam_epsilon)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        epochs: s.get("epochs", d.epochs)?,
        seed: s.get("seed", d.seed)?,
        precision: s.get("precision", Precision::default())?,
        execution: run.exec,
    };
    let e = EncoderConfig::default();
    let hidden = s.get("hidden", e.hidden)?;
    let attention_dim = s.get("attention_dim", e.attention_dim)?;
    let conv_widths = s.list("conv_widths", &e.conv_widths)?;
    let conv_filters = s.get("conv_filters", e.conv_filters)?;
    let common_dim = s.get("common_dim", e.common_dim)?;
    s.finish()?;
    config.validate()?;

    run.input("features", &features_path);
    run.input("train_captions", &train_path);
    run.input("embeddings", &embeddings_path);
    let features = load_features(&features_path)?;
    let train_pairs = load_captions(&train_path)?;
    let val_pairs = match &val_path {
        Some(p) => {
            run.input("validation_captions", p);
            Some(load_captions(p)?)
        }
        None => None,
    };
    let table = load_embeddings(&embeddings_path)?;
    let captions: Vec<&str> = train_pairs.iter().map(|p| p.caption.as_str()).collect();
    let vocabulary = build_vocabulary(&captions, min_frequency)?;
    let lexicon = Lexicon::new(vocabulary, &table)?;
    let feature_dim = features
        .first()
        .map(FeatureSequence::dim)
        .ok_or_else(|| CliError::data("feature file has no shots"))?;
    let encoder = EncoderConfig {
        feature_dim,
        word_dim: lexicon.word_dim(),
        vocab_size: lexicon.vocabulary().len(),
        hidden,
        attention_dim,
        conv_widths,
        conv_filters,
        common_dim,
    };
    let params = EncoderParams::init(encoder, config.seed)?;
    let train_set = Dataset::new(&train_pairs, &features, &lexicon)?;
    let val_set = match &val_pairs {
        Some(pairs) => Some(Dataset::new(pairs, &features, &lexicon)?),
        None => None,
    };

    create_dir(out)?;
    run.write("vocabulary", &out.join("vocab.tsv"), lexicon.vocabulary().serialize().as_bytes())?;
    let outcome = train(&train_set, val_set.as_ref(), &lexicon, params, &config, Some(out))?;
    for (name, file) in [("best_checkpoint", "best.denc"), ("last_checkpoint", "last.denc"), ("log", "train.log")] {
        run.output(name, &out.join(file));
    }
    run.seed = Some(config.seed);
    run.fingerprint = Some(outcome.best.fingerprint());
    log::info!("best epoch {} of {}", outcome.best_epoch, config.epochs);
    run.finish(&out.join("run_manifest.json"))
}

pub fn cmd_index(mut run: Run, checkpoint: &Path, features: &Path, out: &Path) -> Result<RunManifest, CliError> {
    run.settings.finish()?;
    run.input("checkpoint", checkpoint);
    run.input("features", features);
    let params = load_params(checkpoint)?;
    let shots = load_features(features)?;
    let index = build_index(&shots, &params, run.exec)?;
    run.write("index", out, &index.encode())?;
    run.fingerprint = Some(index.fingerprint);
    run.finish(&sibling(out, ".manifest.json"))
}

pub struct RetrieveArgs<'a> {
    pub checkpoint: &'a Path,
    pub vocab: Option<&'a Path>,
    pub embeddings: &'a Path,
    pub index: Option<&'a Path>,
    pub features: Option<&'a Path>,
    pub taxonomy: Option<&'a Path>,
    pub concepts: &'a [String],
    pub k: Option<usize>,
    pub aggregation: Option<Aggregation>,
    pub label_only: bool,
    pub tag: &'a str,
    pub out: &'a Path,
}

pub fn cmd_retrieve(mut run: Run, a: RetrieveArgs<'_>) -> Result<RunManifest, CliError> {
    let k = run.settings.flag_or("k", a.k, DEFAULT_K)?;
    let aggregation = run.settings.flag_or("aggregation", a.aggregation, Aggregation::default())?;
    run.settings.finish()?;
    let vocab = a.vocab.map_or_else(|| default_vocab(a.checkpoint), Path::to_path_buf);
    run.input("checkpoint", a.checkpoint);
    run.input("vocabulary", &vocab);
    run.input("embeddings", a.embeddings);
    let params = load_params(a.checkpoint)?;
    let lexicon = load_lexicon(&vocab, a.embeddings)?;
    let index = match (a.index, a.features) {
        (Some(p), None) => {
            run.input("index", p);
            let bytes = fs::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            ShotIndex::decode(&bytes)?
        }
        (None, Some(p)) => {
            run.input("features", p);
            build_index(&load_features(p)?, &params, run.exec)?
        }
        _ => return Err(CliError::config("give exactly one of --index or --features")),
    };
    if let Some(t) = a.taxonomy {
        run.input("taxonomy", t);
    }
    let tree = load_tree(a.taxonomy)?;
    let concepts: Vec<String> = if a.concepts.is_empty() {
        tree.concepts().map(|c| c.id.clone()).collect()
    } else {
        a.concepts.to_vec()
    };
    let mut lists = Vec::with_capacity(concepts.len());
    for id in &concepts {
        let mut query = tree.expand_query(id)?;
        if a.label_only {
            query = query.label_only();
        }
        lists.push(rank_shots(&query, &index, &lexicon, &params, k, aggregation, run.exec)?);
    }
    run.write("run", a.out, format_run(&lists, a.tag).as_bytes())?;
    run.fingerprint = Some(params.fingerprint());
    run.finish(&sibling(a.out, ".manifest.json"))
}

pub struct EvaluateArgs<'a> {
    pub run: &'a Path,
    pub qrels: &'a Path,
    pub epsilon: Option<f64>,
    pub compare: Option<&'a Path>,
    pub names: (&'a str, &'a str),
    pub out: Option<&'a Path>,
}

/// Returns the printed report; the manifest is written only with `--out`.
pub fn cmd_evaluate(mut run: Run, a: EvaluateArgs<'_>) -> Result<String, CliError> {
    let epsilon = run.settings.flag_or("epsilon", a.epsilon, DEFAULT_EPSILON)?;
    run.settings.finish()?;
    let config = EvalConfig { epsilon };
    run.input("run", a.run);
    run.input("qrels", a.qrels);
    let pool = parse_qrels(&read_file(a.qrels)?)?;
    let runs = parse_run(&read_file(a.run)?)?;
    let report = evaluate_runs(&runs, &pool, config, run.exec)?;
    let (text, tsv) = match a.compare {
        None => (report.to_text(), report.to_tsv()),
        Some(other) => {
            run.input("compare", other);
            let right = evaluate_runs(&parse_run(&read_file(other)?)?, &pool, config, run.exec)?;
            let c = compare(a.names.0, &report, a.names.1, &right)?;
            (c.to_text(), c.to_tsv())
        }
    };
    if let Some(out) = a.out {
        run.write("report", out, tsv.as_bytes())?;
        run.finish(&sibling(out, ".manifest.json"))?;
    } else {
        run.settings.finish()?;
    }
    Ok(text)
}

/// Gradient check of the full batch loss on random data with small
/// dimensions. Returns the printed summary.
pub fn cmd_gradcheck(mut run: Run, tolerance: f64) -> Result<String, CliError> {
    let s = &mut run.settings;
    let seed: u64 = s.get("seed", 0)?;
    let frames: usize = s.get("frames", 4)?;
    let words: usize = s.get("words", 5)?;
    let batch: usize = s.get("batch", 3)?;
    let step: f64 = s.get("step", DEFAULT_STEP)?;
    let feature_dim = s.get("feature_dim", 8)?;
    let word_dim = s.get("word_dim", 6)?;
    let hidden = s.get("hidden", 5)?;
    let attention_dim = s.get("attention_dim", 4)?;
    let conv_widths = s.list("conv_widths", &[2, 3, 4])?;
    let conv_filters = s.get("conv_filters", 3)?;
    let common_dim = s.get("common_dim", 7)?;
    s.finish()?;
    if frames == 0 || words == 0 || batch < 2 {
        return Err(CliError::config("gradcheck needs frames, words >= 1 and batch >= 2"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..2 * words * batch).map(|i| format!("w{i}")).collect();
    let captions: Vec<String> = (0..batch)
        .map(|_| {
            (0..words)
                .map(|_| pool[rng.random_range(0..pool.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let vocabulary = build_vocabulary(&captions, 1)?;
    let lexicon = Lexicon::new(
        vocabulary.clone(),
        &EmbeddingTable::random(vocabulary.words(), word_dim, rng.random()),
    )?;
    let config = EncoderConfig {
        feature_dim,
        word_dim,
        vocab_size: vocabulary.len(),
        hidden,
        attention_dim,
        conv_widths,
        conv_filters,
        common_dim,
    };
    let params = EncoderParams::init(config, rng.random())?;
    let shots: Vec<FeatureSequence> = (0..batch)
        .map(|i| {
            let values = (0..frames * feature_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            FeatureSequence::new(format!("g{i}"), feature_dim, values)
        })
        .collect::<Result<_, _>>()?;
    let sentences: Vec<_> = captions.iter().map(|c| lexicon.tokenize(c)).collect::<Result<_, _>>()?;
    let items: Vec<_> = shots.iter().zip(&sentences).collect();
    let tensors: Vec<_> = params.tensors().cloned().collect();
    let report = grad_check(&tensors, step, run.exec, |tape: &mut Tape<'_>, vars| {
        batch_loss(tape, &params, vars, &items, &lexicon, 0.2).map_err(|e| match e {
            dualenc::training::TrainError::Tensor(t) => t,
            other => dualenc::autodiff::TensorError::NonFinite(other.to_string()),
        })
    })?;
    let summary = format!(
        "loss {:.6}\ncoordinates {}\nmax relative error {:.3e}\n",
        report.value, report.coordinates, report.max_relative_error
    );
    if report.max_relative_error < tolerance {
        Ok(summary)
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {tolerance:.1e}",
            report.max_relative_error
        )))
    }
}
