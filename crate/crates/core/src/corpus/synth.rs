//! Seeded synthetic video/caption corpus with known ground truth.
//!
//! Each prototype owns a unit-norm feature centroid and a small cluster of
//! words. Every shot also carries one value per attribute slot; attribute
//! values have their own feature direction and caption word, shared by all
//! prototypes, so shots of one prototype can be told apart.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::encoders::{EmbeddingTable, FeatureSequence};
use crate::evaluation::{format_qrels, Judgment, Qrel};
use crate::taxonomy::{load_taxonomy, slugify, Category, ConceptTree};

use super::files::{encode_features_binary, format_captions, format_embeddings, CaptionPair};
use super::{tokenize, write_atomic, CorpusError};

const WORD_CLUSTERS: [[&str; 4]; 20] = [
    ["boat", "ship", "vessel", "ferry"],
    ["crowd", "people", "gathering", "throng"],
    ["border", "fence", "checkpoint", "barrier"],
    ["camp", "tent", "shelter", "canvas"],
    ["train", "railway", "wagon", "locomotive"],
    ["truck", "lorry", "van", "trailer"],
    ["protest", "march", "rally", "demonstration"],
    ["farm", "field", "crop", "harvest"],
    ["street", "road", "avenue", "lane"],
    ["child", "kid", "youngster", "toddler"],
    ["office", "desk", "workplace", "bureau"],
    ["market", "stall", "bazaar", "vendor"],
    ["river", "stream", "water", "current"],
    ["airport", "plane", "runway", "terminal"],
    ["school", "classroom", "lecture", "student"],
    ["police", "officer", "guard", "patrol"],
    ["house", "home", "dwelling", "building"],
    ["forest", "tree", "woods", "jungle"],
    ["desert", "sand", "dune", "drought"],
    ["flood", "storm", "rain", "deluge"],
];

const ATTRIBUTE_WORDS: [[&str; 4]; 3] = [
    ["red", "blue", "green", "yellow"],
    ["small", "large", "narrow", "wide"],
    ["moving", "parked", "distant", "nearby"],
];

pub const DEFAULT_TEMPLATES: [&str; 4] = [
    "a {attrs} {p} is shown in the footage",
    "footage of a {attrs} {p}",
    "we see a {attrs} {p} on screen",
    "the camera shows a {attrs} {p}",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticCorpusSpec {
    pub prototypes: usize,
    pub shots_per_prototype: usize,
    pub frames_per_shot: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub captions_per_shot: usize,
    /// Shots per prototype whose captions go to the validation split.
    pub validation_per_prototype: usize,
    /// Standard deviation of per-frame, per-coordinate Gaussian noise.
    pub noise: f64,
    /// Norm of each attribute direction.
    pub attribute_scale: f64,
    /// Norm of a per-shot random component orthogonal to every centroid
    /// and attribute direction. Zero disables it.
    pub nuisance: f64,
    /// Share of each prototype's training captions that name it by its
    /// label word instead of a synonym. At least one always does.
    /// Validation captions use synonyms only.
    pub label_rate: f64,
    /// Fraction of pooled shots judged per topic; 1 gives complete qrels.
    pub judged_rate: f64,
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            prototypes: 5,
            shots_per_prototype: 40,
            frames_per_shot: 8,
            feature_dim: 32,
            word_dim: 16,
            captions_per_shot: 2,
            validation_per_prototype: 2,
            noise: 0.1,
            attribute_scale: 0.5,
            nuisance: 4.0,
            label_rate: 0.03,
            judged_rate: 1.0,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Invalid(m.to_string()));
        if self.prototypes == 0
            || self.shots_per_prototype == 0
            || self.frames_per_shot == 0
            || self.feature_dim == 0
            || self.word_dim == 0
            || self.captions_per_shot == 0
        {
            return bad("synthetic corpus counts must be at least 1");
        }
        if self.validation_per_prototype >= self.shots_per_prototype {
            return bad("validation shots must leave at least one training shot per prototype");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise scale must be non-negative");
        }
        if !(self.attribute_scale >= 0.0 && self.nuisance >= 0.0) {
            return bad("attribute and nuisance scales must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.label_rate) {
            return bad("label rate must be in [0, 1]");
        }
        if !(self.judged_rate > 0.0 && self.judged_rate <= 1.0) {
            return bad("judged rate must be in (0, 1]");
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{p}")) {
            return bad("every template needs a {p} slot");
        }
        let distinct = self.templates.iter().collect::<BTreeSet<_>>().len() * (WORD_CLUSTERS[0].len() - 1);
        if self.captions_per_shot > distinct {
            return bad("more captions per shot than distinct template and synonym pairs");
        }
        if self.nuisance > 0.0 && self.feature_dim <= self.prototypes + attribute_count() {
            return bad("feature dimension too small for a nuisance component");
        }
        Ok(())
    }
}

fn attribute_count() -> usize {
    ATTRIBUTE_WORDS.iter().map(|s| s.len()).sum()
}

/// Words naming prototype `p`; the first is the concept label.
pub fn prototype_words(p: usize) -> Vec<String> {
    match WORD_CLUSTERS.get(p) {
        Some(words) => words.iter().map(|w| w.to_string()).collect(),
        None => (0..4).map(|j| format!("proto{p}w{j}")).collect(),
    }
}

const MAX_CAPTION_DRAWS: usize = 1000;

fn fill(template: &str, word: &str, attrs: &str) -> String {
    let s = template.replace("{p}", word).replace("{attrs}", attrs);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub features: Vec<FeatureSequence>,
    /// Prototype index of each shot.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub train_captions: Vec<CaptionPair>,
    pub validation_captions: Vec<CaptionPair>,
    pub validation_shots: Vec<String>,
    pub qrels: Vec<Qrel>,
    pub taxonomy_source: String,
    pub taxonomy: ConceptTree,
    /// Concept id per prototype.
    pub concept_ids: Vec<String>,
    pub embeddings: EmbeddingTable,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of the span of `vectors` (modified Gram-Schmidt).
fn orthonormal(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        for b in &basis {
            let c = dot(&u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
        let norm = dot(&u, &u).sqrt();
        if norm > 1e-9 {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Builds the corpus; a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };
    let d = spec.feature_dim;

    let mut rng = stream(1);
    let centroids: Vec<Vec<f64>> = (0..spec.prototypes).map(|_| unit_gaussian(&mut rng, d)).collect();
    let attributes: Vec<Vec<Vec<f64>>> = ATTRIBUTE_WORDS
        .iter()
        .map(|slot| {
            slot.iter()
                .map(|_| {
                    unit_gaussian(&mut rng, d)
                        .into_iter()
                        .map(|x| x * spec.attribute_scale)
                        .collect()
                })
                .collect()
        })
        .collect();
    let structure: Vec<Vec<f64>> = centroids
        .iter()
        .chain(attributes.iter().flatten())
        .cloned()
        .collect();
    let structure_basis = if spec.nuisance > 0.0 {
        orthonormal(&structure)
    } else {
        Vec::new()
    };

    let mut combos: Vec<[usize; 3]> = Vec::new();
    for a in 0..ATTRIBUTE_WORDS[0].len() {
        for b in 0..ATTRIBUTE_WORDS[1].len() {
            for c in 0..ATTRIBUTE_WORDS[2].len() {
                combos.push([a, b, c]);
            }
        }
    }

    let mut frame_rng = stream(2);
    let mut caption_rng = stream(3);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| CorpusError::Invalid(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut train_captions = Vec::new();
    let mut validation_captions = Vec::new();
    let mut validation_shots = Vec::new();
    let width = (spec.prototypes * spec.shots_per_prototype).to_string().len().max(4);

    for p in 0..spec.prototypes {
        let words = prototype_words(p);
        let mut order = combos.clone();
        order.shuffle(&mut caption_rng);
        // The label names an exact share of the training captions, never fewer than one.
        let train_slots =
            (spec.shots_per_prototype - spec.validation_per_prototype) * spec.captions_per_shot;
        let label_count = ((spec.label_rate * train_slots as f64).round() as usize)
            .clamp(1, train_slots);
        let label_slots: HashSet<usize> =
            rand::seq::index::sample(&mut caption_rng, train_slots, label_count)
                .into_iter()
                .collect();
        let mut slot = 0usize;
        for i in 0..spec.shots_per_prototype {
            let id = format!("shot{:0width$}", p * spec.shots_per_prototype + i);
            let combo = order[i % order.len()];
            let mut base = centroids[p].clone();
            for (slot, &value) in combo.iter().enumerate() {
                for (x, a) in base.iter_mut().zip(&attributes[slot][value]) {
                    *x += a;
                }
            }
            if spec.nuisance > 0.0 {
                let mut r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut frame_rng)).collect();
                for b in &structure_basis {
                    let c = dot(&r, b);
                    for (x, y) in r.iter_mut().zip(b) {
                        *x -= c * y;
                    }
                }
                let norm = dot(&r, &r).sqrt();
                for (x, y) in base.iter_mut().zip(&r) {
                    *x += spec.nuisance * y / norm;
                }
            }
            let mut frames = Vec::with_capacity(spec.frames_per_shot * d);
            for _ in 0..spec.frames_per_shot {
                for &x in &base {
                    frames.push((x + noise.sample(&mut frame_rng)) as f32);
                }
            }
            features.push(FeatureSequence::new(id.clone(), d, frames).expect("valid shape"));
            labels.push(p);

            let attrs: Vec<&str> = combo
                .iter()
                .enumerate()
                .map(|(slot, &v)| ATTRIBUTE_WORDS[slot][v])
                .collect();
            let attrs = attrs.join(" ");
            let validation = i < spec.validation_per_prototype;
            if validation {
                validation_shots.push(id.clone());
            }
            let mut seen = HashSet::new();
            for _ in 0..spec.captions_per_shot {
                let labelled = !validation && label_slots.contains(&slot);
                if !validation {
                    slot += 1;
                }
                // Captions of one shot are distinct; redraw on a repeat.
                let mut caption = String::new();
                for _ in 0..MAX_CAPTION_DRAWS {
                    let word = if labelled {
                        &words[0]
                    } else {
                        &words[caption_rng.random_range(1..words.len())]
                    };
                    let template = &spec.templates[caption_rng.random_range(0..spec.templates.len())];
                    let candidate = fill(template, word, &attrs);
                    if seen.insert(candidate.clone()) {
                        caption = candidate;
                        break;
                    }
                }
                if caption.is_empty() {
                    return Err(CorpusError::Invalid(format!(
                        "cannot draw {} distinct captions for shot {id}",
                        spec.captions_per_shot
                    )));
                }
                let pair = CaptionPair {
                    shot_id: id.clone(),
                    caption,
                };
                if validation {
                    validation_captions.push(pair);
                } else {
                    train_captions.push(pair);
                }
            }
        }
    }

    let mut taxonomy_source =
        String::from("# Synthetic prototype concepts\n# id\tlabel\tcategory\tlevel\tparent\tdefinition\taugmentations\n");
    let mut concept_ids = Vec::new();
    for p in 0..spec.prototypes {
        let words = prototype_words(p);
        let label = words[0].clone();
        let id = slugify(&label);
        let augmentations: Vec<String> = (0..3)
            .map(|j| fill(&spec.templates[j % spec.templates.len()], &words[1 + j % 3], ""))
            .collect();
        let category = Category::ALL[p % Category::ALL.len()];
        taxonomy_source.push_str(&format!(
            "{id}\t{label}\t{category}\t1\t-\tsynthetic prototype {p}\t{}\n",
            augmentations.join("|")
        ));
        concept_ids.push(id);
    }
    let taxonomy =
        load_taxonomy(&taxonomy_source).map_err(|e| CorpusError::Invalid(format!("generated taxonomy: {e}")))?;

    let mut qrel_rng = stream(4);
    let mut qrels = Vec::new();
    for (p, topic) in concept_ids.iter().enumerate() {
        let n = features.len();
        let judged_count = ((spec.judged_rate * n as f64).round() as usize).clamp(1, n);
        let mut judged = vec![spec.judged_rate >= 1.0; n];
        if spec.judged_rate < 1.0 {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut qrel_rng);
            for &i in &idx[..judged_count] {
                judged[i] = true;
            }
        }
        for (i, shot) in features.iter().enumerate() {
            let judgment = match (judged[i], labels[i] == p) {
                (false, _) => Judgment::Unjudged,
                (true, true) => Judgment::Relevant,
                (true, false) => Judgment::NonRelevant,
            };
            qrels.push(Qrel {
                topic: topic.clone(),
                stratum: "all".into(),
                shot: shot.shot_id.clone(),
                judgment,
            });
        }
    }

    let mut vocabulary = BTreeSet::new();
    for pair in train_captions.iter().chain(&validation_captions) {
        vocabulary.extend(tokenize(&pair.caption));
    }
    for concept in taxonomy.concepts() {
        vocabulary.extend(tokenize(&concept.label));
        for a in &concept.augmentations {
            vocabulary.extend(tokenize(a));
        }
    }
    let words: Vec<String> = vocabulary.into_iter().collect();
    let mut rng = stream(5);
    let embeddings = EmbeddingTable::random(&words, spec.word_dim, rng.random());

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        features,
        labels,
        centroids,
        train_captions,
        validation_captions,
        validation_shots,
        qrels,
        taxonomy_source,
        taxonomy,
        concept_ids,
        embeddings,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SyntheticCorpusSpec,
    pub files: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

impl SyntheticCorpus {
    /// Writes every artifact into `dir` plus a `manifest.json` listing them.
    pub fn write_to(&self, dir: &Path) -> Result<SynthManifest, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let artifacts: [(&str, &str, Vec<u8>); 6] = [
            ("features", "features.feat", encode_features_binary(&self.features)),
            ("train_captions", "captions.train.tsv", format_captions(&self.train_captions).into_bytes()),
            (
                "validation_captions",
                "captions.val.tsv",
                format_captions(&self.validation_captions).into_bytes(),
            ),
            ("qrels", "qrels.txt", format_qrels(&self.qrels).into_bytes()),
            ("taxonomy", "taxonomy.tsv", self.taxonomy_source.clone().into_bytes()),
            ("embeddings", "embeddings.txt", format_embeddings(&self.embeddings).into_bytes()),
        ];
        let mut files = BTreeMap::new();
        for (key, name, bytes) in artifacts {
            let path = dir.join(name);
            write_atomic(&path, &bytes)?;
            files.insert(key.to_string(), name.to_string());
        }
        let counts = BTreeMap::from([
            ("shots".to_string(), self.features.len()),
            ("train_captions".to_string(), self.train_captions.len()),
            ("validation_captions".to_string(), self.validation_captions.len()),
            ("concepts".to_string(), self.concept_ids.len()),
            ("qrels".to_string(), self.qrels.len()),
            ("vocabulary".to_string(), self.embeddings.len()),
        ]);
        let manifest = SynthManifest {
            seed: self.spec.seed,
            spec: self.spec.clone(),
            files,
            counts,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticCorpusSpec {
            shots_per_prototype: 6,
            ..SyntheticCorpusSpec::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_noise_shots_share_frames_per_combo() {
        let spec = SyntheticCorpusSpec {
            shots_per_prototype: 3,
            noise: 0.0,
            attribute_scale: 0.0,
            nuisance: 0.0,
            ..SyntheticCorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for p in 0..spec.prototypes {
            let shots = &corpus.features[p * 3..(p + 1) * 3];
            assert!(shots.iter().all(|s| s.frames() == shots[0].frames()));
            assert_eq!(shots[0].frame(0), shots[0].frame(1));
        }
    }

    #[test]
    fn splits_qrels_and_taxonomy() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(corpus.features.len(), 200);
        assert_eq!(corpus.validation_shots.len(), 10);
        assert_eq!(corpus.train_captions.len(), 380);
        assert_eq!(corpus.validation_captions.len(), 20);
        assert_eq!(corpus.qrels.len(), 5 * 200);
        let relevant = corpus.qrels.iter().filter(|q| q.judgment == Judgment::Relevant).count();
        assert_eq!(relevant, 200);
        assert_eq!(corpus.taxonomy.level_count(1), 5);
        let q = corpus.taxonomy.expand_query("boat").unwrap();
        assert_eq!(q.sentences.len(), 4);
        assert_eq!(q.sentences[0], "boat");
        assert!(corpus
            .train_captions
            .iter()
            .all(|c| !corpus.validation_shots.contains(&c.shot_id)));
    }

    #[test]
    fn written_files_load_back() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
            captions_per_shot: 6,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = corpus.write_to(dir.path()).unwrap();
        let path = |key: &str| dir.path().join(&manifest.files[key]);
        assert_eq!(crate::corpus::load_captions(&path("train_captions")).unwrap(), corpus.train_captions);
        assert_eq!(crate::corpus::load_features(&path("features")).unwrap(), corpus.features);
        assert_eq!(crate::corpus::load_embeddings(&path("embeddings")).unwrap(), corpus.embeddings);
        assert!(SyntheticCorpusSpec {
            captions_per_shot: 13,
            ..SyntheticCorpusSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn label_word_count_is_exact() {
        for (rate, expected) in [(0.0, 1), (0.03, 2), (0.5, 38), (1.0, 76)] {
            let spec = SyntheticCorpusSpec {
                label_rate: rate,
                ..SyntheticCorpusSpec::default()
            };
            let corpus = generate_synthetic_corpus(&spec).unwrap();
            for p in 0..spec.prototypes {
                let label = &prototype_words(p)[0];
                let count = corpus
                    .train_captions
                    .iter()
                    .filter(|c| tokenize(&c.caption).iter().any(|w| w == label))
                    .count();
                assert_eq!(count, expected, "rate {rate} prototype {p}");
            }
            assert!(corpus
                .validation_captions
                .iter()
                .all(|c| (0..spec.prototypes).all(|p| !tokenize(&c.caption).contains(&prototype_words(p)[0]))));
        }
    }

    #[test]
    fn nuisance_is_orthogonal_to_structure() {
        let spec = SyntheticCorpusSpec {
            shots_per_prototype: 2,
            validation_per_prototype: 0,
            noise: 0.0,
            attribute_scale: 0.0,
            nuisance: 2.0,
            ..SyntheticCorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for (shot, &p) in corpus.features.iter().zip(&corpus.labels) {
            let frame: Vec<f64> = shot.frame(0).iter().map(|&x| f64::from(x)).collect();
            let offset: Vec<f64> = frame.iter().zip(&corpus.centroids[p]).map(|(a, b)| a - b).collect();
            assert!((dot(&offset, &offset).sqrt() - 2.0).abs() < 1e-5);
            for c in &corpus.centroids {
                assert!(dot(&offset, c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn subsampled_qrels() {
        let spec = SyntheticCorpusSpec {
            judged_rate: 0.5,
            ..SyntheticCorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let judged = corpus
            .qrels
            .iter()
            .filter(|q| q.topic == "boat" && q.judgment != Judgment::Unjudged)
            .count();
        assert_eq!(judged, 100);
    }

    #[test]
    fn invalid_specs() {
        let base = SyntheticCorpusSpec::default();
        for bad in [
            SyntheticCorpusSpec { prototypes: 0, ..base.clone() },
            SyntheticCorpusSpec { noise: -1.0, ..base.clone() },
            SyntheticCorpusSpec { judged_rate: 0.0, ..base.clone() },
            SyntheticCorpusSpec { validation_per_prototype: 40, ..base.clone() },
            SyntheticCorpusSpec { templates: vec!["no slot".into()], ..base.clone() },
        ] {
            assert!(generate_synthetic_corpus(&bad).is_err());
        }
    }
}
