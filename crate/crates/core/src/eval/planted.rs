//! Corpora with a known best image per query.
//!
//! Every query gets its own made-up subquery words. Its truth record is the
//! only caption containing all of them, and its vision tokens are the
//! query's own subquery embeddings, so the pass-through adapter pulls each
//! adapter output towards the matching subquery. Distractors mention strict
//! subsets of some query's words and carry the embeddings of queries that
//! do not exist.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{save_params, AdapterParams};
use crate::corpus::{write_feature_matrix, Corpus, FeatureMatrix, FeatureSource, ImageRecord};
use crate::error::{Error, Result};
use crate::query::{Query, Subquery};

const FILLER: &[&str] = &[
    "a", "photo", "of", "the", "with", "on", "near", "small", "large", "scene", "street", "table", "sky",
    "tree", "water", "room", "light", "view",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub queries: usize,
    /// Subqueries per query.
    pub n: usize,
    /// Total records, truths included.
    pub records: usize,
    /// Embedding and vision-token width.
    pub dim: usize,
    /// Weight of the image term in the pass-through adapter.
    pub image_gain: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            queries: 100,
            n: 3,
            records: 1000,
            dim: 64,
            image_gain: 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedQuery {
    pub query: Query,
    pub truth: String,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub spec: PlantSpec,
    pub corpus: Corpus,
    pub queries: Vec<PlantedQuery>,
    pub params: AdapterParams<f32>,
}

/// Zero-mean unit vector, so layer-norm centering leaves it unchanged.
fn centered_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v = crate::adapter::random_unit(rng, d);
        let mean = v.iter().sum::<f64>() / d as f64;
        let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return c.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

fn subquery_word(q: usize, i: usize) -> String {
    format!("q{q}w{i}")
}

pub fn plant_corpus(spec: PlantSpec) -> Result<PlantedCorpus> {
    if spec.queries == 0 || spec.n == 0 || spec.dim < 2 {
        return Err(Error::InvalidArgument(
            "planted corpus needs queries >= 1, n >= 1, dim >= 2".into(),
        ));
    }
    if spec.records < spec.queries {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot hold {} truth records",
            spec.records, spec.queries
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let embeddings: Vec<Vec<Vec<f32>>> = (0..spec.queries)
        .map(|_| (0..spec.n).map(|_| centered_unit(&mut rng, spec.dim)).collect())
        .collect();

    // slot -> Some(query) for truth records, None for distractors
    let mut slots: Vec<Option<usize>> = (0..spec.queries).map(Some).collect();
    slots.resize(spec.records, None);
    slots.shuffle(&mut rng);

    let width = spec.records.to_string().len().max(5);
    let mut records = Vec::with_capacity(spec.records);
    let mut features = Vec::with_capacity(spec.records);
    let mut truth = vec![String::new(); spec.queries];
    for (pos, slot) in slots.iter().enumerate() {
        let id = format!("img{pos:0width$}");
        let (words, rows): (Vec<String>, Vec<Vec<f32>>) = match *slot {
            Some(q) => {
                truth[q] = id.clone();
                (
                    (0..spec.n).map(|i| subquery_word(q, i)).collect(),
                    embeddings[q].clone(),
                )
            }
            None => {
                let q = rng.random_range(0..spec.queries);
                let keep = rng.random_range(0..spec.n);
                let mut idx: Vec<usize> = (0..spec.n).collect();
                idx.shuffle(&mut rng);
                (
                    idx[..keep].iter().map(|&i| subquery_word(q, i)).collect(),
                    (0..spec.n).map(|_| centered_unit(&mut rng, spec.dim)).collect(),
                )
            }
        };
        let mut caption: Vec<String> = (0..rng.random_range(3..7))
            .map(|_| (*FILLER.choose(&mut rng).expect("filler")).to_string())
            .collect();
        for w in words {
            let at = rng.random_range(0..=caption.len());
            caption.insert(at, w);
        }
        records.push(ImageRecord {
            id: id.clone(),
            caption: caption.join(" "),
            feature_ref: format!("features/{id}.xmrg").into(),
            meta: Default::default(),
        });
        features.push(Arc::new(FeatureMatrix::from_rows(&rows)?));
    }

    let queries = embeddings
        .into_iter()
        .enumerate()
        .map(|(q, embs)| {
            let subqueries: Vec<Subquery> = embs
                .into_iter()
                .enumerate()
                .map(|(i, e)| Subquery {
                    text: subquery_word(q, i),
                    embedding: Some(e),
                })
                .collect();
            let raw = (0..spec.n)
                .map(|i| subquery_word(q, i))
                .collect::<Vec<_>>()
                .join(", ");
            Ok(PlantedQuery {
                query: Query::new(raw, subqueries)?,
                truth: truth[q].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PlantedCorpus {
        spec,
        corpus: Corpus::new(records, FeatureSource::Memory(features))?,
        queries,
        params: AdapterParams::passthrough(spec.dim, spec.image_gain)?,
    })
}

#[derive(Serialize)]
struct QueryLine<'a> {
    raw: &'a str,
    subqueries: Vec<&'a str>,
    truth: &'a str,
    embeddings: String,
}

/// Write the corpus as files: `manifest.jsonl`, `features/*.xmrg`,
/// `queries.jsonl` with per-query embedding files under `queries/`, and
/// `adapter.bin`.
pub fn write_planted(planted: &PlantedCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["features", "queries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, r) in planted.corpus.records().iter().enumerate() {
        manifest.push_str(&serde_json::to_string(r)?);
        manifest.push('\n');
        write_feature_matrix(dir.join(&r.feature_ref), planted.corpus.features(i)?.as_ref())?;
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    let mut lines = String::new();
    for (q, pq) in planted.queries.iter().enumerate() {
        let rel = format!("queries/q{q:03}.xmrg");
        let rows = (0..pq.query.len())
            .map(|i| pq.query.embedding(i).map(<[f32]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        write_feature_matrix(dir.join(&rel), &FeatureMatrix::from_rows(&rows)?)?;
        lines.push_str(&serde_json::to_string(&QueryLine {
            raw: &pq.query.raw,
            subqueries: pq.query.texts(),
            truth: &pq.truth,
            embeddings: rel,
        })?);
        lines.push('\n');
    }
    let path = dir.join("queries.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    save_params(dir.join("adapter.bin"), &planted.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse;

    fn small() -> PlantSpec {
        PlantSpec {
            queries: 5,
            records: 40,
            dim: 16,
            ..PlantSpec::default()
        }
    }

    #[test]
    fn truth_is_the_only_full_match() {
        let p = plant_corpus(small()).unwrap();
        for pq in &p.queries {
            let full: Vec<&str> = sparse::full_scan(&p.corpus, &pq.query.texts())
                .iter()
                .enumerate()
                .filter(|(_, s)| s.count_ones() == pq.query.len())
                .map(|(r, _)| p.corpus.record(r).id.as_str())
                .collect();
            assert_eq!(full, vec![pq.truth.as_str()]);
        }
    }

    #[test]
    fn seed_determinism() {
        let a = plant_corpus(small()).unwrap();
        let b = plant_corpus(small()).unwrap();
        assert_eq!(a.corpus.records(), b.corpus.records());
        for i in 0..a.corpus.len() {
            assert_eq!(a.corpus.features(i).unwrap(), b.corpus.features(i).unwrap());
        }
        let c = plant_corpus(PlantSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.corpus.records(), c.corpus.records());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(plant_corpus(PlantSpec {
            records: 2,
            ..small()
        })
        .is_err());
        assert!(plant_corpus(PlantSpec { n: 0, ..small() }).is_err());
    }
}
