//! Loaders for features, captions and embeddings, plus the synthetic corpus.

mod files;
mod synth;
mod vocab;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use files::{
    decode_features_binary, encode_features_binary, format_captions, format_embeddings,
    format_features_text, load_captions, load_embeddings, load_features, parse_captions,
    parse_embeddings, parse_features_text, CaptionPair,
};
pub use synth::{
    generate_synthetic_corpus, prototype_words, SynthManifest, SyntheticCorpus, SyntheticCorpusSpec,
    DEFAULT_TEMPLATES,
};
pub use vocab::{build_vocabulary, tokenize, Vocabulary, DEFAULT_MIN_FREQUENCY};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: expected dimension {expected}, got {got}")]
    Dimension {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CorpusError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CorpusError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CorpusError::io(path, e))?;
    tmp.persist(path).map_err(|e| CorpusError::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}
