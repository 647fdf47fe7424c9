//! Per-subquery adapter similarity, aggregate dense scores, and the
//! dense-only ranking used for Recall@K.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::corpus::{Corpus, FeatureMatrix};
use crate::error::{Error, Result};
use crate::query::Query;
use crate::tensor::Mat;

const UNIT_TOLERANCE: f64 = 1e-4;

/// Cosine of two unit vectors, clamped to `[0, 1]`.
pub fn subquery_similarity(v: &[f32], t: &[f32]) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::LengthMismatch(v.len(), t.len()));
    }
    for x in [v, t] {
        let norm = x.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnitNorm(norm));
        }
    }
    let dot: f64 = v.iter().zip(t).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok(dot.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseScore {
    pub per_subquery: Vec<f64>,
    pub aggregate: f64,
}

impl DenseScore {
    /// Aggregate is the left-to-right mean.
    pub fn from_similarities(per_subquery: Vec<f64>) -> Self {
        let mut sum = 0.0;
        for &s in &per_subquery {
            sum += s;
        }
        let aggregate = if per_subquery.is_empty() {
            0.0
        } else {
            sum / per_subquery.len() as f64
        };
        Self {
            per_subquery,
            aggregate,
        }
    }

    pub fn sum(&self) -> f64 {
        self.per_subquery.iter().sum()
    }
}

/// Something that can produce per-subquery similarities for a record.
///
/// `similarities` returns one value per subquery; each call is counted as
/// that many adapter forwards.
pub trait SubqueryScorer: Sync {
    fn subquery_count(&self) -> usize;
    fn similarities(&self, record: usize) -> Result<Vec<f64>>;
}

/// Scores records with the vision adapter.
pub struct AdapterScorer<'a> {
    corpus: &'a Corpus,
    params: &'a AdapterParams<f32>,
    embeddings: Vec<&'a [f32]>,
}

impl<'a> AdapterScorer<'a> {
    pub fn new(corpus: &'a Corpus, query: &'a Query, params: &'a AdapterParams<f32>) -> Result<Self> {
        let embeddings = (0..query.len())
            .map(|i| query.embedding(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            corpus,
            params,
            embeddings,
        })
    }
}

impl SubqueryScorer for AdapterScorer<'_> {
    fn subquery_count(&self) -> usize {
        self.embeddings.len()
    }

    fn similarities(&self, record: usize) -> Result<Vec<f64>> {
        let features = self.corpus.features(record)?;
        similarities_for(self.params, &features, &self.embeddings)
    }
}

fn similarities_for(
    params: &AdapterParams<f32>,
    features: &FeatureMatrix,
    embeddings: &[&[f32]],
) -> Result<Vec<f64>> {
    let f = Mat::from_features(features);
    embeddings
        .iter()
        .map(|t| subquery_similarity(&params.forward(&f, t)?, t))
        .collect()
}

/// Fixed similarity table, `table[record][subquery]`. Handy for tests and
/// for replaying precomputed scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub n: usize,
    pub table: Vec<Vec<f64>>,
}

impl SubqueryScorer for ScoreTable {
    fn subquery_count(&self) -> usize {
        self.n
    }

    fn similarities(&self, record: usize) -> Result<Vec<f64>> {
        self.table
            .get(record)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no scores for record {record}")))
    }
}

/// Memoizing wrapper that counts adapter forwards.
pub struct DenseScorer<'a> {
    inner: &'a dyn SubqueryScorer,
    memo: Mutex<HashMap<usize, DenseScore>>,
    forwards: AtomicUsize,
}

impl<'a> DenseScorer<'a> {
    pub fn new(inner: &'a dyn SubqueryScorer) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn forwards(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn score(&self, record: usize) -> Result<DenseScore> {
        if let Some(s) = self.memo.lock().expect("memo lock").get(&record) {
            return Ok(s.clone());
        }
        let sims = self.inner.similarities(record)?;
        self.forwards.fetch_add(sims.len(), Ordering::Relaxed);
        let score = DenseScore::from_similarities(sims);
        self.memo
            .lock()
            .expect("memo lock")
            .entry(record)
            .or_insert(score.clone());
        Ok(score)
    }

    /// Scores in the order of `records`, computed in parallel.
    pub fn score_all(&self, records: &[usize]) -> Result<Vec<DenseScore>> {
        // dedupe first so no record is scored twice by racing workers
        let mut unique = records.to_vec();
        unique.sort_unstable();
        unique.dedup();
        unique.par_iter().try_for_each(|&r| self.score(r).map(drop))?;
        records.iter().map(|&r| self.score(r)).collect()
    }
}

/// Dense score of one corpus record against every subquery.
pub fn dense_score(
    corpus: &Corpus,
    record: usize,
    query: &Query,
    params: &AdapterParams<f32>,
) -> Result<DenseScore> {
    let scorer = AdapterScorer::new(corpus, query, params)?;
    Ok(DenseScore::from_similarities(scorer.similarities(record)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub record: usize,
    pub id: String,
    pub score: DenseScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRanking {
    pub ranked: Vec<RankedRecord>,
    pub dense_forwards: usize,
}

impl DenseRanking {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.id.as_str()).collect()
    }
}

/// Top-`k` records by aggregate dense score over the whole corpus.
pub fn rank_dense(
    corpus: &Corpus,
    query: &Query,
    params: &AdapterParams<f32>,
    k: usize,
) -> Result<DenseRanking> {
    let scorer = AdapterScorer::new(corpus, query, params)?;
    rank_with(corpus, &scorer, k)
}

pub fn rank_with(corpus: &Corpus, scorer: &dyn SubqueryScorer, k: usize) -> Result<DenseRanking> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dense = DenseScorer::new(scorer);
    let all: Vec<usize> = (0..corpus.len()).collect();
    let scores = dense.score_all(&all)?;
    let mut ranked: Vec<RankedRecord> = scores
        .into_iter()
        .enumerate()
        .map(|(record, score)| RankedRecord {
            record,
            id: corpus.record(record).id.clone(),
            score,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .aggregate
            .total_cmp(&a.score.aggregate)
            .then_with(|| a.id.cmp(&b.id))
    });
    ranked.truncate(k);
    Ok(DenseRanking {
        ranked,
        dense_forwards: dense.forwards(),
    })
}
