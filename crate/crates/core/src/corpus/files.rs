//! Text and binary file formats for features, captions and embeddings.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::{EmbeddingTable, FeatureSequence};

use super::{read_text, CorpusError};

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

/// One training or validation caption for a shot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionPair {
    pub shot_id: String,
    pub caption: String,
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        reason: reason.into(),
    }
}

/// Checks shot ids are unique and dimensions agree. `lines[i]` is the
/// location reported for shot `i`.
fn check_shots(shots: &[FeatureSequence], lines: &[usize]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    let dim = shots.first().map_or(0, FeatureSequence::dim);
    for (shot, &line) in shots.iter().zip(lines) {
        if !seen.insert(shot.shot_id.as_str()) {
            return Err(CorpusError::DuplicateKey {
                line,
                key: shot.shot_id.clone(),
            });
        }
        if shot.dim() != dim {
            return Err(CorpusError::Dimension {
                line,
                expected: dim,
                got: shot.dim(),
            });
        }
    }
    Ok(())
}

/// Parses the text feature format: a `shot_id n D` header per shot followed
/// by `n` lines of `D` floats.
pub fn parse_features_text(source: &str) -> Result<Vec<FeatureSequence>, CorpusError> {
    let mut lines = source
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut shots = Vec::new();
    let mut header_lines = Vec::new();
    while let Some((line_no, header)) = lines.next() {
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [id, n, d] = fields[..] else {
            return Err(malformed(line_no, "expected header `shot_id n D`"));
        };
        let n: usize = n
            .parse()
            .map_err(|_| malformed(line_no, format!("bad frame count {n:?}")))?;
        let d: usize = d
            .parse()
            .map_err(|_| malformed(line_no, format!("bad dimension {d:?}")))?;
        if n == 0 || d == 0 {
            return Err(malformed(line_no, "frame count and dimension must be positive"));
        }
        let mut frames = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (row_no, row) = lines
                .next()
                .ok_or_else(|| malformed(line_no, format!("shot {id}: expected {n} frames")))?;
            let before = frames.len();
            for v in row.split_whitespace() {
                let x: f32 = v
                    .parse()
                    .map_err(|_| malformed(row_no, format!("bad value {v:?}")))?;
                frames.push(x);
            }
            let got = frames.len() - before;
            if got != d {
                return Err(CorpusError::Dimension {
                    line: row_no,
                    expected: d,
                    got,
                });
            }
        }
        let shot = FeatureSequence::new(id, d, frames).map_err(|e| malformed(line_no, e.to_string()))?;
        shots.push(shot);
        header_lines.push(line_no);
    }
    if shots.is_empty() {
        return Err(CorpusError::Empty("feature file"));
    }
    check_shots(&shots, &header_lines)?;
    Ok(shots)
}

pub fn format_features_text(shots: &[FeatureSequence]) -> String {
    let mut out = String::new();
    for shot in shots {
        writeln!(out, "{} {} {}", shot.shot_id, shot.len(), shot.dim()).unwrap();
        for i in 0..shot.len() {
            let row: Vec<String> = shot.frame(i).iter().map(f32::to_string).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn encode_features_binary(shots: &[FeatureSequence]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(shots.len() as u32).to_le_bytes());
    for shot in shots {
        out.extend_from_slice(&(shot.shot_id.len() as u32).to_le_bytes());
        out.extend_from_slice(shot.shot_id.as_bytes());
        out.extend_from_slice(&(shot.len() as u32).to_le_bytes());
        out.extend_from_slice(&(shot.dim() as u32).to_le_bytes());
        for x in shot.frames() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CorpusError::Invalid(format!("truncated feature file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, CorpusError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Decodes the binary container. Errors name the shot's ordinal as the
/// line.
pub fn decode_features_binary(bytes: &[u8]) -> Result<Vec<FeatureSequence>, CorpusError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEAT_MAGIC {
        return Err(CorpusError::Invalid("not a FEAT container".into()));
    }
    let version = r.u32()?;
    if version != FEAT_VERSION as usize {
        return Err(CorpusError::Invalid(format!("unsupported FEAT version {version}")));
    }
    let count = r.u32()?;
    let mut shots = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32()?;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed(i + 1, "shot id is not UTF-8"))?
            .to_string();
        let n = r.u32()?;
        let d = r.u32()?;
        let raw = r.take(n.saturating_mul(d).saturating_mul(4))?;
        let frames = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shot = FeatureSequence::new(id, d, frames).map_err(|e| malformed(i + 1, e.to_string()))?;
        shots.push(shot);
    }
    if r.pos != bytes.len() {
        return Err(CorpusError::Invalid("trailing bytes after FEAT container".into()));
    }
    if shots.is_empty() {
        return Err(CorpusError::Empty("feature file"));
    }
    let ordinals: Vec<usize> = (1..=shots.len()).collect();
    check_shots(&shots, &ordinals)?;
    Ok(shots)
}

/// Loads either feature format, detected from the leading magic bytes.
pub fn load_features(path: &Path) -> Result<Vec<FeatureSequence>, CorpusError> {
    let bytes = std::fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    if bytes.starts_with(FEAT_MAGIC) {
        return decode_features_binary(&bytes);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| CorpusError::Invalid(format!("{}: not UTF-8 text", path.display())))?;
    parse_features_text(&text)
}

/// `shot_id<TAB>caption` lines. A shot may have several captions but the
/// same caption twice for one shot is rejected.
pub fn parse_captions(source: &str) -> Result<Vec<CaptionPair>, CorpusError> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (shot, caption) = line
            .split_once('\t')
            .ok_or_else(|| malformed(line_no, "expected shot_id<TAB>caption"))?;
        let (shot, caption) = (shot.trim(), caption.trim());
        if shot.is_empty() {
            return Err(malformed(line_no, "empty shot id"));
        }
        if caption.is_empty() {
            return Err(malformed(line_no, "empty caption"));
        }
        if !seen.insert((shot.to_string(), caption.to_string())) {
            return Err(CorpusError::DuplicateKey {
                line: line_no,
                key: format!("{shot}\t{caption}"),
            });
        }
        pairs.push(CaptionPair {
            shot_id: shot.to_string(),
            caption: caption.to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(CorpusError::Empty("caption file"));
    }
    Ok(pairs)
}

pub fn format_captions(pairs: &[CaptionPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\n", p.shot_id, p.caption))
        .collect()
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionPair>, CorpusError> {
    parse_captions(&read_text(path)?)
}

/// `word v1 ... vE` lines with an optional leading `count dim` header.
pub fn parse_embeddings(source: &str) -> Result<EmbeddingTable, CorpusError> {
    let mut lines = source
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let mut declared = None;
    if let Some(&(line_no, first)) = lines.peek() {
        let fields: Vec<&str> = first.split_whitespace().collect();
        if let [count, dim] = fields[..] {
            if let (Ok(c), Ok(d)) = (count.parse::<usize>(), dim.parse::<usize>()) {
                if d == 0 {
                    return Err(malformed(line_no, "embedding dimension must be positive"));
                }
                declared = Some((c, d, line_no));
                lines.next();
            }
        }
    }
    let mut table: Option<EmbeddingTable> = declared.map(|(_, d, _)| EmbeddingTable::new(d));
    for (line_no, line) in lines {
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("line is nonempty");
        let vector = fields
            .map(|v| v.parse::<f64>().map_err(|_| malformed(line_no, format!("bad value {v:?}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if vector.is_empty() {
            return Err(malformed(line_no, format!("word {word:?} has no vector")));
        }
        let table = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
        if vector.len() != table.dim() {
            return Err(CorpusError::Dimension {
                line: line_no,
                expected: table.dim(),
                got: vector.len(),
            });
        }
        if !table.insert(word, &vector).expect("dimension checked") {
            return Err(CorpusError::DuplicateKey {
                line: line_no,
                key: word.to_string(),
            });
        }
    }
    let table = table.ok_or(CorpusError::Empty("embedding file"))?;
    if table.is_empty() {
        return Err(CorpusError::Empty("embedding file"));
    }
    if let Some((count, _, line)) = declared {
        if count != table.len() {
            return Err(malformed(
                line,
                format!("header declares {count} words, file has {}", table.len()),
            ));
        }
    }
    Ok(table)
}

pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = format!("{} {}\n", table.len(), table.dim());
    for w in table.words() {
        out.push_str(w);
        for v in table.lookup(w).expect("own word") {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, CorpusError> {
    parse_embeddings(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_features_with_line_numbers() {
        let src = "s1 2 3\n1 2 3\n4 5 6\ns2 1 3\n0.5 0.25 -1\n";
        let shots = parse_features_text(src).unwrap();
        assert_eq!(shots.len(), 2);
        assert_eq!(shots[0].frame(1), &[4.0, 5.0, 6.0]);

        let short = "s1 2 3\n1 2 3\n4 5\n";
        match parse_features_text(short) {
            Err(CorpusError::Dimension { line, expected, got }) => {
                assert_eq!((line, expected, got), (3, 3, 2))
            }
            other => panic!("{other:?}"),
        }
        let dup = "s1 1 2\n1 2\ns1 1 2\n3 4\n";
        assert!(matches!(
            parse_features_text(dup),
            Err(CorpusError::DuplicateKey { line: 3, .. })
        ));
        let mixed = "s1 1 2\n1 2\ns2 1 3\n3 4 5\n";
        assert!(matches!(
            parse_features_text(mixed),
            Err(CorpusError::Dimension { line: 3, .. })
        ));
        assert!(matches!(
            parse_features_text("s1 1 2\n1 x\n"),
            Err(CorpusError::Malformed { line: 2, .. })
        ));
        assert!(parse_features_text("").is_err());
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(decode_features_binary(b"NOPE").is_err());
        let shot = FeatureSequence::new("a", 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_features_binary(&[shot]);
        bytes.pop();
        assert!(decode_features_binary(&bytes).is_err());
    }

    #[test]
    fn captions_need_a_tab() {
        let pairs = parse_captions("s1\ta boat\ns1\ta ship\n").unwrap();
        assert_eq!(pairs.len(), 2);
        match parse_captions("s1\tok\ns2 no tab here\n") {
            Err(e @ CorpusError::Malformed { line: 2, .. }) => {
                assert!(e.to_string().contains("line 2"))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_captions("s1\ta\ns1\ta\n"),
            Err(CorpusError::DuplicateKey { line: 2, .. })
        ));
        assert!(parse_captions("s1\t  \n").is_err());
    }

    #[test]
    fn embeddings_with_header() {
        let src = "3 4\nx 1 2 3 4\ny 0 0 0 1\nz 1 1 1 1\n";
        let table = parse_embeddings(src).unwrap();
        assert_eq!((table.len(), table.dim()), (3, 4));
        assert_eq!(table.lookup("y").unwrap(), &[0.0, 0.0, 0.0, 1.0]);
        let back = parse_embeddings(&format_embeddings(&table)).unwrap();
        assert_eq!(back, table);

        let headerless = parse_embeddings("x 1 2\ny 3 4\n").unwrap();
        assert_eq!(headerless.dim(), 2);
        assert!(parse_embeddings("2 2\nx 1 2\n").is_err());
        assert!(matches!(
            parse_embeddings("x 1 2\nx 3 4\n"),
            Err(CorpusError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            parse_embeddings("x 1 2\ny 3\n"),
            Err(CorpusError::Dimension { line: 2, .. })
        ));
    }

    fn shots_strategy() -> impl Strategy<Value = Vec<FeatureSequence>> {
        (1usize..5, 1usize..6).prop_flat_map(|(count, dim)| {
            prop::collection::vec(
                (1usize..5).prop_flat_map(move |n| {
                    prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), n * dim)
                }),
                count,
            )
            .prop_map(move |frames| {
                frames
                    .into_iter()
                    .enumerate()
                    .map(|(i, f)| FeatureSequence::new(format!("shot{i}"), dim, f).unwrap())
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn text_and_binary_agree(shots in shots_strategy()) {
            let from_text = parse_features_text(&format_features_text(&shots)).unwrap();
            let from_bin = decode_features_binary(&encode_features_binary(&shots)).unwrap();
            prop_assert_eq!(&from_text, &shots);
            prop_assert_eq!(&from_bin, &shots);
        }
    }
}
