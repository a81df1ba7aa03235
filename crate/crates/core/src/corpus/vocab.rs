//! Caption tokenization and the bag-of-words vocabulary.

use std::collections::HashMap;

use super::CorpusError;

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dense word index ordered by descending frequency, ties lexicographic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

pub const DEFAULT_MIN_FREQUENCY: usize = 5;

impl Vocabulary {
    fn from_counts(mut entries: Vec<(String, usize)>, min_frequency: usize) -> Self {
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i))
            .collect();
        let (words, counts) = entries.into_iter().unzip();
        Self {
            words,
            counts,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> &str {
        &self.words[index]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, index: usize) -> usize {
        self.counts[index]
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    /// `word<TAB>count` lines, preceded by a `#min_frequency` header.
    pub fn serialize(&self) -> String {
        let mut out = format!("#min_frequency\t{}\n", self.min_frequency);
        for (w, c) in self.words.iter().zip(&self.counts) {
            out.push_str(&format!("{w}\t{c}\n"));
        }
        out
    }

    pub fn parse(source: &str) -> Result<Self, CorpusError> {
        let mut min_frequency = 1;
        let mut entries: Vec<(String, usize)> = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| CorpusError::Malformed {
                line: line_no,
                reason: "expected word<TAB>count".into(),
            })?;
            let count: usize = count.trim().parse().map_err(|_| CorpusError::Malformed {
                line: line_no,
                reason: format!("bad count {count:?}"),
            })?;
            if word == "#min_frequency" {
                min_frequency = count;
                continue;
            }
            if seen.insert(word.to_string(), line_no).is_some() {
                return Err(CorpusError::DuplicateKey {
                    line: line_no,
                    key: word.to_string(),
                });
            }
            entries.push((word.to_string(), count));
        }
        if entries.is_empty() {
            return Err(CorpusError::Empty("vocabulary"));
        }
        Ok(Self::from_counts(entries, min_frequency))
    }
}

/// Counts tokens over all captions and keeps words seen at least
/// `min_frequency` times.
pub fn build_vocabulary<S: AsRef<str>>(
    captions: &[S],
    min_frequency: usize,
) -> Result<Vocabulary, CorpusError> {
    if min_frequency == 0 {
        return Err(CorpusError::Invalid("min_frequency must be at least 1".into()));
    }
    if captions.is_empty() {
        return Err(CorpusError::Empty("caption set"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in captions {
        for token in tokenize(caption.as_ref()) {
            *counts.entry(token).or_default() += 1;
        }
    }
    let kept = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_frequency)
        .collect();
    Ok(Vocabulary::from_counts(kept, min_frequency))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_strips_and_lowercases() {
        assert_eq!(tokenize("A man, riding  a BIKE!"), vec!["a", "man", "riding", "a", "bike"]);
        assert_eq!(tokenize(" -- "), Vec::<String>::new());
    }

    #[test]
    fn thresholds() {
        let v = build_vocabulary(&["a b", "a c"], 2).unwrap();
        assert_eq!(v.words(), &["a"]);
        let v = build_vocabulary(&["a b", "a c"], 1).unwrap();
        assert_eq!(v.words(), &["a", "b", "c"]);
        assert_eq!(v.count(0), 2);
        assert!(build_vocabulary::<&str>(&[], 1).is_err());
        assert!(build_vocabulary(&["a"], 0).is_err());
    }

    #[test]
    fn serialized_form_parses_back() {
        let v = build_vocabulary(&["the cat", "the dog", "a cat"], 1).unwrap();
        assert_eq!(Vocabulary::parse(&v.serialize()).unwrap(), v);
        assert!(matches!(
            Vocabulary::parse("a\t1\na\t2\n"),
            Err(CorpusError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            Vocabulary::parse("a 1\n"),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }
}
