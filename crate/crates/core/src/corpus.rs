//! The retrieval database: image records, their captions, an inverted caption
//! index, and lazily read vision feature matrices.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{self, MatchOptions};

pub const XMRG_MAGIC: &[u8; 4] = b"XMRG";
pub const XMRG_VERSION: u32 = 1;
pub const XMRG_HEADER_LEN: usize = 16;

/// One image in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default)]
    pub caption: String,
    pub feature_ref: PathBuf,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// A row-major `rows x cols` matrix of finite 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidHeader(format!(
                "rows and cols must be >= 1 (got {rows}x{cols})"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Serialize to the XMRG byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(XMRG_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(XMRG_MAGIC);
        out.extend_from_slice(&XMRG_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse the XMRG byte layout. The buffer must hold exactly one matrix.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < XMRG_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != XMRG_MAGIC {
                return Err(Error::BadMagic);
            }
            return Err(Error::SizeMismatch {
                expected: XMRG_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != XMRG_MAGIC {
            return Err(Error::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != XMRG_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidHeader(format!(
                "rows and cols must be >= 1 (got {rows}x{cols})"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(XMRG_HEADER_LEN))
            .ok_or_else(|| Error::InvalidHeader(format!("{rows}x{cols} overflows")))?;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let values = bytes[XMRG_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, values)
    }
}

/// Read an XMRG matrix file.
pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}

/// Write an XMRG matrix file.
pub fn write_feature_matrix(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Where a corpus gets its vision features from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Read `feature_ref` (resolved against `base`) on every access.
    Files { base: PathBuf },
    /// Matrices held in memory, one per record. Used by generators and benches.
    Memory(Vec<Arc<FeatureMatrix>>),
}

/// An immutable, indexed retrieval database.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<ImageRecord>,
    caption_tokens: Vec<Vec<u32>>,
    vocab: HashMap<String, u32>,
    postings: Vec<Vec<usize>>,
    features: FeatureSource,
    options: MatchOptions,
}

impl Corpus {
    pub fn new(records: Vec<ImageRecord>, features: FeatureSource) -> Result<Self> {
        Self::with_options(records, features, MatchOptions::default())
    }

    pub fn with_options(
        records: Vec<ImageRecord>,
        features: FeatureSource,
        options: MatchOptions,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.id.is_empty() {
                return Err(Error::InvalidArgument("record id must be non-empty".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        if let FeatureSource::Memory(m) = &features {
            if m.len() != records.len() {
                return Err(Error::LengthMismatch(m.len(), records.len()));
            }
        }

        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<usize>> = Vec::new();
        let mut caption_tokens = Vec::with_capacity(records.len());
        for (idx, r) in records.iter().enumerate() {
            let ids: Vec<u32> = text::tokenize_with(&r.caption, options)
                .into_iter()
                .map(|tok| {
                    let next = vocab.len() as u32;
                    let id = *vocab.entry(tok).or_insert(next);
                    if id as usize == postings.len() {
                        postings.push(Vec::new());
                    }
                    let list = &mut postings[id as usize];
                    if list.last() != Some(&idx) {
                        list.push(idx);
                    }
                    id
                })
                .collect();
            caption_tokens.push(ids);
        }

        Ok(Self {
            records,
            caption_tokens,
            vocab,
            postings,
            features,
            options,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &ImageRecord {
        &self.records[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn options(&self) -> MatchOptions {
        self.options
    }

    /// Number of distinct normalized caption tokens.
    pub fn vocabulary_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn caption_tokens(&self, idx: usize) -> &[u32] {
        &self.caption_tokens[idx]
    }

    /// Record indices whose caption contains `token`, ascending.
    pub fn postings(&self, token: &str) -> &[usize] {
        self.token_id(token)
            .map_or(&[][..], |id| &self.postings[id as usize][..])
    }

    pub fn postings_by_id(&self, id: u32) -> &[usize] {
        &self.postings[id as usize]
    }

    /// Iterate the inverted index as (token, postings).
    pub fn index_entries(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.vocab
            .iter()
            .map(|(tok, &id)| (tok.as_str(), &self.postings[id as usize][..]))
    }

    /// Map a phrase to token ids; `None` if any token is absent from the corpus.
    pub fn phrase_ids(&self, phrase: &str) -> Option<Vec<u32>> {
        text::tokenize_with(phrase, self.options)
            .iter()
            .map(|t| self.token_id(t))
            .collect()
    }

    /// Directory relative paths in the manifest are resolved against.
    pub fn base_dir(&self) -> Option<&Path> {
        match &self.features {
            FeatureSource::Files { base } => Some(base),
            FeatureSource::Memory(_) => None,
        }
    }

    pub fn feature_path(&self, idx: usize) -> Option<PathBuf> {
        match &self.features {
            FeatureSource::Files { base } => Some(base.join(&self.records[idx].feature_ref)),
            FeatureSource::Memory(_) => None,
        }
    }

    /// Vision features for a record. File-backed corpora read on each call.
    pub fn features(&self, idx: usize) -> Result<Arc<FeatureMatrix>> {
        match &self.features {
            FeatureSource::Files { base } => {
                let path = base.join(&self.records[idx].feature_ref);
                read_feature_matrix(path).map(Arc::new)
            }
            FeatureSource::Memory(m) => Ok(Arc::clone(&m[idx])),
        }
    }
}

/// Load a JSON Lines manifest. Feature files are checked for existence only.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with(manifest_path, MatchOptions::default())
}

pub fn load_corpus_with(manifest_path: impl AsRef<Path>, options: MatchOptions) -> Result<Corpus> {
    let path = manifest_path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedManifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::MalformedManifest {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let feature_path = base.join(&record.feature_ref);
        if !feature_path.is_file() {
            return Err(Error::MissingFeatureFile {
                id: record.id,
                path: feature_path,
            });
        }
        records.push(record);
    }
    Corpus::with_options(records, FeatureSource::Files { base }, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    fn touch_features(dir: &Path, name: &str) {
        let m = FeatureMatrix::new(1, 2, vec![0.5, -0.5]).unwrap();
        write_feature_matrix(dir.join(name), &m).unwrap();
    }

    #[test]
    fn empty_manifest_loads_zero_records() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = load_corpus(write_manifest(dir.path(), &[])).unwrap();
        assert_eq!(corpus.len(), 0);
        assert_eq!(corpus.vocabulary_size(), 0);
    }

    #[test]
    fn two_lines_preserve_order() {
        let dir = tempfile::tempdir().unwrap();
        touch_features(dir.path(), "a.xmrg");
        touch_features(dir.path(), "b.xmrg");
        let manifest = write_manifest(
            dir.path(),
            &[
                r#"{"id":"img2","caption":"a red bird","feature_ref":"a.xmrg","meta":{}}"#,
                r#"{"id":"img1","caption":"","feature_ref":"b.xmrg","meta":{"k":"v"}}"#,
            ],
        );
        let corpus = load_corpus(manifest).unwrap();
        let ids: Vec<_> = corpus.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["img2", "img1"]);
        assert_eq!(corpus.record(1).meta["k"], "v");
        assert_eq!(corpus.postings("bird"), &[0]);
        assert_eq!(corpus.features(0).unwrap().values(), &[0.5, -0.5]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch_features(dir.path(), "a.xmrg");
        let line = r#"{"id":"img1","caption":"x","feature_ref":"a.xmrg"}"#;
        let err = load_corpus(write_manifest(dir.path(), &[line, line])).unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "img1"));
        assert!(err.to_string().contains("img1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        touch_features(dir.path(), "a.xmrg");
        let err = load_corpus(write_manifest(
            dir.path(),
            &[r#"{"id":"a","feature_ref":"a.xmrg"}"#, "{not json"],
        ))
        .unwrap_err();
        assert!(matches!(err, Error::MalformedManifest { line: 2, .. }));
    }

    #[test]
    fn missing_feature_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_corpus(write_manifest(
            dir.path(),
            &[r#"{"id":"a","caption":"","feature_ref":"nope.xmrg"}"#],
        ))
        .unwrap_err();
        assert!(matches!(err, Error::MissingFeatureFile { .. }));
    }

    #[test]
    fn round_trip_3x4() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xmrg");
        let m = FeatureMatrix::new(3, 4, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        assert_eq!(read_feature_matrix(&path).unwrap(), m);
    }

    #[test]
    fn one_by_one_file_size() {
        let m = FeatureMatrix::new(1, 1, vec![0.0]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), XMRG_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"XMRG");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let m = FeatureMatrix::new(2, 3, vec![1.0; 6]).unwrap();
        let bytes = m.to_bytes();
        let err = FeatureMatrix::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::SizeMismatch { .. }));
    }

    #[test]
    fn zero_rows_header_rejected() {
        let mut bytes = FeatureMatrix::new(1, 1, vec![1.0]).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(XMRG_HEADER_LEN);
        assert!(matches!(
            FeatureMatrix::from_bytes(&bytes).unwrap_err(),
            Error::InvalidHeader(_)
        ));
    }

    #[test]
    fn bad_magic_and_non_finite() {
        let mut bytes = FeatureMatrix::new(1, 1, vec![1.0]).unwrap().to_bytes();
        bytes[0] = b'Y';
        assert!(matches!(FeatureMatrix::from_bytes(&bytes), Err(Error::BadMagic)));

        let mut bytes = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap().to_bytes();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureMatrix::from_bytes(&bytes),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(FeatureMatrix::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn memory_source_length_checked() {
        let rec = ImageRecord {
            id: "a".into(),
            caption: String::new(),
            feature_ref: "a".into(),
            meta: BTreeMap::new(),
        };
        let err = Corpus::new(vec![rec], FeatureSource::Memory(vec![])).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch(0, 1)));
    }
}
