use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualenc::autodiff::checkpoint;
use dualenc::corpus::{load_embeddings, load_features, Vocabulary};
use dualenc::encoders::{EncoderParams, Lexicon};
use dualenc::par::Execution;
use dualenc::retrieval::{build_index, format_run, rank_shots, Aggregation};
use dualenc::taxonomy::load_taxonomy;

fn dualenc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualenc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dualenc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic corpus plus a two-epoch model trained on it.
struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    model: PathBuf,
}

fn fixture(extra: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let model = dir.path().join("model");
    ok(&["synth", "--out", p(&corpus), "--seed", "3", "--set", "shots_per_prototype=12"]);
    let conf = corpus.join("train.conf");
    let mut args = vec!["train", "--config", p(&conf), "--out", p(&model), "--set", "epochs=2"];
    args.extend_from_slice(extra);
    ok(&args);
    Fixture {
        _dir: dir,
        corpus,
        model,
    }
}

#[test]
fn train_writes_checkpoint_and_manifest() {
    let f = fixture(&[]);
    for name in ["best.denc", "last.denc", "train.log", "vocab.tsv", "run_manifest.json"] {
        assert!(f.model.join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.model.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["configuration"]["epochs"], "2");
    assert_eq!(manifest["configuration"]["batch_size"], "32");
    for (_, path) in manifest["outputs"].as_object().unwrap() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }
    let log = fs::read_to_string(f.model.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn reruns_are_identical() {
    let a = fixture(&[]);
    let b = fixture(&["--strict-repro"]);
    let c = fixture(&["--threads", "2"]);
    for name in ["best.denc", "last.denc", "vocab.tsv", "train.log"] {
        let x = fs::read(a.model.join(name)).unwrap();
        assert_eq!(x, fs::read(b.model.join(name)).unwrap(), "{name}");
        assert_eq!(x, fs::read(c.model.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_caption_file_is_a_data_error() {
    let f = fixture(&[]);
    let out_dir = f.model.with_file_name("other");
    let out = dualenc(&[
        "train",
        "--config",
        p(&f.corpus.join("train.conf")),
        "--set",
        "train_captions=/no/such/captions.tsv",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/captions.tsv"));
    assert!(!out_dir.join("best.denc").exists());
}

#[test]
fn configuration_errors_exit_2() {
    let f = fixture(&[]);
    let conf = f.corpus.join("train.conf");
    for set in ["epochs=many", "unknown_key=1", "batch_size=1"] {
        let out = dualenc(&["train", "--config", p(&conf), "--set", set, "--out", p(&f.model.join("x"))]);
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
    let out = dualenc(&["train", "--out", p(&f.model.join("y"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn small_features(dir: &Path) -> PathBuf {
    let small = dir.join("small");
    ok(&[
        "synth",
        "--out",
        p(&small),
        "--seed",
        "8",
        "--set",
        "shots_per_prototype=2",
        "--set",
        "validation_per_prototype=1",
    ]);
    small.join("features.feat")
}

#[test]
fn retrieve_lengths_and_library_equivalence() {
    let f = fixture(&[]);
    let features = small_features(f.corpus.parent().unwrap());
    let checkpoint_path = f.model.join("best.denc");
    let embeddings = f.corpus.join("embeddings.txt");
    let taxonomy = f.corpus.join("taxonomy.tsv");
    let index = f.model.join("small.didx");
    ok(&["index", "--checkpoint", p(&checkpoint_path), "--features", p(&features), "--out", p(&index)]);
    assert!(index.with_file_name("small.didx.manifest.json").exists());

    let run = f.model.join("run.txt");
    let base = [
        "retrieve",
        "--checkpoint",
        p(&checkpoint_path),
        "--embeddings",
        p(&embeddings),
        "--taxonomy",
        p(&taxonomy),
        "--index",
        p(&index),
        "--out",
        p(&run),
    ];
    let mut args = base.to_vec();
    args.extend(["--concepts", "crowd,boat", "--k", "5"]);
    ok(&args);
    let text = fs::read_to_string(&run).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().next().unwrap().starts_with("crowd Q0 "));

    let mut args = base.to_vec();
    args.extend(["--concepts", "boat", "--k", "50"]);
    ok(&args);
    assert_eq!(fs::read_to_string(&run).unwrap().lines().count(), 10);

    let mut args = base.to_vec();
    args.extend(["--k", "7", "--tag", "lib"]);
    ok(&args);
    let cli_run = fs::read_to_string(&run).unwrap();

    let bytes = fs::read(&checkpoint_path).unwrap();
    let params = EncoderParams::from_named(&checkpoint::read(&bytes[..]).unwrap()).unwrap();
    let vocab = Vocabulary::parse(&fs::read_to_string(f.model.join("vocab.tsv")).unwrap()).unwrap();
    let lexicon = Lexicon::new(vocab, &load_embeddings(&embeddings).unwrap()).unwrap();
    let tree = load_taxonomy(&fs::read_to_string(&taxonomy).unwrap()).unwrap();
    let shots = load_features(&features).unwrap();
    let idx = build_index(&shots, &params, Execution::Sequential).unwrap();
    let lists: Vec<_> = tree
        .concepts()
        .map(|c| {
            let q = tree.expand_query(&c.id).unwrap();
            rank_shots(&q, &idx, &lexicon, &params, 7, Aggregation::MeanScore, Execution::Sequential).unwrap()
        })
        .collect();
    assert_eq!(cli_run, format_run(&lists, "lib"));

    let mut args = base.to_vec();
    args.extend(["--concepts", "no-such-concept"]);
    assert_eq!(dualenc(&args).status.code(), Some(3));
}

#[test]
fn evaluate_perfect_run_empty_run_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&["synth", "--out", p(&corpus), "--set", "shots_per_prototype=6"]);
    let qrels_path = corpus.join("qrels.txt");
    let qrels = fs::read_to_string(&qrels_path).unwrap();

    // Relevant shots first, then the rest, for every topic.
    let mut topics: Vec<String> = Vec::new();
    let mut by_topic: std::collections::BTreeMap<String, (Vec<String>, Vec<String>)> = Default::default();
    for line in qrels.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if !topics.iter().any(|t| t == f[0]) {
            topics.push(f[0].to_string());
        }
        let entry = by_topic.entry(f[0].to_string()).or_default();
        if f[3] == "1" {
            entry.0.push(f[2].to_string());
        } else {
            entry.1.push(f[2].to_string());
        }
    }
    let mut perfect = String::new();
    let mut worst = String::new();
    for t in &topics {
        let (rel, non) = &by_topic[t];
        for (i, s) in rel.iter().chain(non).enumerate() {
            perfect.push_str(&format!("{t} Q0 {s} {} {:.6} perfect\n", i + 1, 1.0 / (i + 1) as f64));
        }
        for (i, s) in non.iter().chain(rel).enumerate() {
            worst.push_str(&format!("{t} Q0 {s} {} {:.6} worst\n", i + 1, 1.0 / (i + 1) as f64));
        }
    }
    let perfect_path = dir.path().join("perfect.txt");
    let worst_path = dir.path().join("worst.txt");
    fs::write(&perfect_path, perfect).unwrap();
    fs::write(&worst_path, worst).unwrap();

    let report = dir.path().join("report.tsv");
    let text = ok(&["evaluate", "--run", p(&perfect_path), "--qrels", p(&qrels_path), "--out", p(&report)]);
    assert!(text.contains("Mean XinfAP"));
    let tsv = fs::read_to_string(&report).unwrap();
    let mean: f64 = tsv
        .lines()
        .find_map(|l| l.strip_prefix("MEAN\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - 1.0).abs() < 1e-3, "{mean}");

    let text = ok(&[
        "evaluate",
        "--run",
        p(&worst_path),
        "--qrels",
        p(&qrels_path),
        "--compare",
        p(&perfect_path),
        "--epsilon",
        "1e-5",
    ]);
    assert!(text.contains("Concept name + descriptions"));
    let improved = text
        .lines()
        .skip(1)
        .filter(|l| l.split_whitespace().last().is_some_and(|d| d.starts_with('+')))
        .count();
    assert_eq!(improved, topics.len() + 1);

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = dualenc(&["evaluate", "--run", p(&empty), "--qrels", p(&qrels_path)]);
    assert_eq!(out.status.code(), Some(3));
    let out = dualenc(&["evaluate", "--run", p(&perfect_path), "--qrels", p(&qrels_path), "--epsilon", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn taxonomy_validate_and_gradcheck() {
    let text = ok(&["taxonomy-validate"]);
    assert!(text.contains("20 level-1"));
    assert!(text.contains("5 categories"));

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.tsv");
    fs::write(&broken, "child\tChild\tSocial\t2\tmissing\tdef\t\n").unwrap();
    assert_eq!(dualenc(&["taxonomy-validate", "--taxonomy", p(&broken)]).status.code(), Some(3));

    let text = ok(&["gradcheck", "--seed", "4"]);
    assert!(text.contains("max relative error"));
    let out = dualenc(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(4));
}
