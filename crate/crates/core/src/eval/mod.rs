//! Retrieval metrics, synthetic corpora and the latency/counter harness.

mod bench;
mod planted;
mod random;

pub use bench::{
    bench_fixture, bench_retrieval, BenchFixture, BenchMode, BenchReport, BenchRow, BenchSpec, BenchSummary,
};
pub use planted::{plant_corpus, write_planted, PlantSpec, PlantedCorpus, PlantedQuery};
pub use random::{random_instance, RandomInstance, RandomSpec};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::joint::ParetoResult;
use crate::query::Query;
use crate::sparse;
use crate::text;

/// Fraction of queries whose truth id is among the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>>(rankings: &[Vec<S>], truth: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if rankings.len() != truth.len() {
        return Err(Error::LengthMismatch(rankings.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("no queries".into()));
    }
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|id| id.as_ref() == t.as_ref()))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Share of subqueries satisfied by at least one retrieved entry.
pub fn coverage_rate(result: &ParetoResult, query: &Query) -> Result<f64> {
    let mut covered = vec![false; query.len()];
    for e in &result.entries {
        if e.satisfaction.len() != query.len() {
            return Err(Error::LengthMismatch(e.satisfaction.len(), query.len()));
        }
        for i in e.satisfaction.ones() {
            covered[i] = true;
        }
    }
    Ok(fraction(&covered))
}

/// Coverage of an arbitrary set of records (e.g. a baseline's top-k).
pub fn coverage_of_records(corpus: &Corpus, query: &Query, records: &[usize]) -> f64 {
    let texts = query.texts();
    let mut covered = vec![false; query.len()];
    for &r in records {
        let s = sparse::satisfaction_with(&corpus.record(r).caption, &texts, corpus.options());
        for i in s.ones() {
            covered[i] = true;
        }
    }
    fraction(&covered)
}

fn fraction(covered: &[bool]) -> f64 {
    if covered.is_empty() {
        return 0.0;
    }
    covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64
}

/// Lexical overlap ranking: records ordered by how many distinct query
/// tokens their caption contains, ties by ascending id. Returns record
/// indices.
pub fn lexical_topk_baseline(corpus: &Corpus, query: &Query, k: usize) -> Vec<usize> {
    let opts = corpus.options();
    let tokens: HashSet<u32> = query
        .texts()
        .iter()
        .flat_map(|q| text::tokenize_with(q, opts))
        .filter_map(|t| corpus.token_id(&t))
        .collect();
    let mut scored: Vec<(usize, usize)> = (0..corpus.len())
        .map(|r| {
            let present: HashSet<u32> = corpus
                .caption_tokens(r)
                .iter()
                .copied()
                .filter(|t| tokens.contains(t))
                .collect();
            (present.len(), r)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| corpus.record(a.1).id.cmp(&corpus.record(b.1).id))
    });
    scored.into_iter().take(k).map(|(_, r)| r).collect()
}

/// One metric over a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_query: Vec<f64>,
    pub mean: f64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub counters: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, per_query: Vec<f64>, config: serde_json::Value) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().sum::<f64>() / per_query.len() as f64
        };
        Self {
            metric: metric.into(),
            per_query,
            mean,
            config,
            counters: BTreeMap::new(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24}{:>12}\n", "metric", "mean");
        out.push_str(&format!("{:<24}{:>12.4}\n", self.metric, self.mean));
        for (k, v) in &self.counters {
            out.push_str(&format!("{k:<24}{v:>12}\n"));
        }
        out
    }
}
