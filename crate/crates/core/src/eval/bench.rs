//! Per-query latency and adapter-forward counts for sparse-only, dense-only
//! and hybrid retrieval on synthetic corpora.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{random_unit, AdapterConfig, AdapterParams};
use crate::corpus::{Corpus, FeatureMatrix, FeatureSource, ImageRecord};
use crate::dense::rank_dense;
use crate::error::{Error, Result};
use crate::joint::{joint_retrieve, JointOptions};
use crate::query::{Query, Subquery};
use crate::sparse;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Sparse,
    Dense,
    Hybrid,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Sparse, BenchMode::Dense, BenchMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Sparse => "sparse",
            BenchMode::Dense => "dense",
            BenchMode::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    pub modes: Vec<BenchMode>,
    pub queries: usize,
    /// Subqueries per query.
    pub n: usize,
    /// Expected share of records matching at least one subquery of a query.
    pub match_rate: f64,
    pub dim: usize,
    pub vision_tokens: usize,
    /// Run on one worker thread so timings are comparable.
    pub single_thread: bool,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000],
            modes: BenchMode::ALL.to_vec(),
            queries: 30,
            n: 3,
            match_rate: 0.04,
            dim: 8,
            vision_tokens: 2,
            single_thread: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub records: usize,
    pub query: usize,
    pub n_tilde: usize,
    pub dense_forwards: usize,
    pub micros: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub mode: BenchMode,
    pub records: usize,
    pub median_micros: f64,
    pub median_n_tilde: f64,
    pub mean_dense_forwards: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<BenchSummary>,
    /// Counter checks that failed; empty when all hold.
    pub violations: Vec<String>,
}

impl BenchReport {
    pub fn summary(&self, mode: BenchMode, records: usize) -> Option<&BenchSummary> {
        self.summaries
            .iter()
            .find(|s| s.mode == mode && s.records == records)
    }

    /// `guard * sparse <= hybrid` and `guard * hybrid <= dense` on medians.
    pub fn latency_ordering_holds(&self, records: usize, guard: f64) -> Option<bool> {
        let s = self.summary(BenchMode::Sparse, records)?.median_micros;
        let d = self.summary(BenchMode::Dense, records)?.median_micros;
        let h = self.summary(BenchMode::Hybrid, records)?.median_micros;
        Some(guard * s <= h && guard * h <= d)
    }

    /// CSV for one (mode, size) pair.
    pub fn to_csv(&self, mode: BenchMode, records: usize) -> String {
        let mut out = String::from("mode,records,query,n_tilde,dense_forwards,micros\n");
        for r in self
            .rows
            .iter()
            .filter(|r| r.mode == mode && r.records == records)
        {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.mode.name(),
                r.records,
                r.query,
                r.n_tilde,
                r.dense_forwards,
                r.micros
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8}{:>10}{:>14}{:>12}{:>16}\n",
            "mode", "N", "median_us", "N_tilde", "dense_forwards"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>14.1}{:>12.1}{:>16.1}",
                s.mode.name(),
                s.records,
                s.median_micros,
                s.median_n_tilde,
                s.mean_dense_forwards
            );
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Synthetic corpus, queries and a small random adapter for timing runs.
pub struct BenchFixture {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub params: AdapterParams<f32>,
}

/// Fixture with `records` records, built the same way as in [`bench_retrieval`].
pub fn bench_fixture(spec: &BenchSpec, records: usize) -> Result<BenchFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (corpus, queries) = bench_corpus(spec, records, &mut rng)?;
    Ok(BenchFixture {
        corpus,
        queries,
        params: bench_params(spec)?,
    })
}

fn bench_params(spec: &BenchSpec) -> Result<AdapterParams<f32>> {
    let config = AdapterConfig {
        d_vision: spec.dim,
        d_text: spec.dim,
        d_model: spec.dim,
        heads: 1,
        query_tokens: 1,
        hidden: spec.dim,
        d_out: spec.dim,
    };
    AdapterParams::init(config, spec.seed)
}

fn bench_corpus(spec: &BenchSpec, records: usize, rng: &mut ChaCha8Rng) -> Result<(Corpus, Vec<Query>)> {
    let pool = 3 * spec.n;
    let words: Vec<String> = (0..pool).map(|i| format!("term{i}")).collect();
    let embeddings: Vec<Vec<f32>> = (0..pool)
        .map(|_| random_unit(rng, spec.dim).into_iter().map(|x| x as f32).collect())
        .collect();
    // per-word rate so that P(any of n words) = match_rate
    let p = 1.0 - (1.0 - spec.match_rate).powf(1.0 / spec.n as f64);

    let mut recs = Vec::with_capacity(records);
    let mut feats = Vec::with_capacity(records);
    for r in 0..records {
        let mut caption = String::from("a photo of something");
        for w in &words {
            if rng.random_bool(p) {
                caption.push(' ');
                caption.push_str(w);
            }
        }
        recs.push(ImageRecord {
            id: format!("b{r:07}"),
            caption,
            feature_ref: format!("features/b{r:07}.xmrg").into(),
            meta: Default::default(),
        });
        let m: Mat<f32> = Mat::random_normal(spec.vision_tokens, spec.dim, 1.0, rng);
        feats.push(Arc::new(FeatureMatrix::new(m.rows, m.cols, m.data)?));
    }

    let mut idx: Vec<usize> = (0..pool).collect();
    let queries = (0..spec.queries)
        .map(|_| {
            idx.shuffle(rng);
            let subs: Vec<Subquery> = idx[..spec.n]
                .iter()
                .map(|&i| Subquery {
                    text: words[i].clone(),
                    embedding: Some(embeddings[i].clone()),
                })
                .collect();
            let raw = subs
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Query::new(raw, subs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Corpus::new(recs, FeatureSource::Memory(feats))?, queries))
}

/// Run every mode on every corpus size and check the forward counters.
pub fn bench_retrieval(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.sizes.is_empty() || spec.queries == 0 || spec.n == 0 || spec.modes.is_empty() {
        return Err(Error::InvalidArgument(
            "bench needs sizes, modes, queries and n".into(),
        ));
    }
    if !(spec.match_rate > 0.0 && spec.match_rate < 1.0) {
        return Err(Error::InvalidArgument("match_rate must be in (0, 1)".into()));
    }
    let threads = if spec.single_thread { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| run(spec))
}

fn run(spec: &BenchSpec) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = bench_params(spec)?;
    let mut rows = Vec::new();
    let mut violations = Vec::new();

    for &size in &spec.sizes {
        let (corpus, queries) = bench_corpus(spec, size, &mut rng)?;
        for (qi, query) in queries.iter().enumerate() {
            let n = query.len();
            let mut hybrid_forwards = None;
            for &mode in &spec.modes {
                let start = Instant::now();
                let (n_tilde, forwards) = match mode {
                    BenchMode::Sparse => {
                        let dtilde = sparse::nonzero_filter(&corpus, &query.texts());
                        let front = sparse::nondominated_filter(&dtilde)?;
                        std::hint::black_box(front);
                        (dtilde.len(), 0)
                    }
                    BenchMode::Dense => {
                        let ranking = rank_dense(&corpus, query, &params, 10)?;
                        (size, ranking.dense_forwards)
                    }
                    BenchMode::Hybrid => {
                        let r = joint_retrieve(&corpus, query, &params, JointOptions::default())?;
                        hybrid_forwards = Some((r.counters.n_tilde, r.counters.dense_forwards));
                        (r.counters.n_tilde, r.counters.dense_forwards)
                    }
                };
                let micros = start.elapsed().as_micros();
                let tag = format!("{} N={size} query {qi}", mode.name());
                match mode {
                    BenchMode::Sparse if forwards != 0 => {
                        violations.push(format!("{tag}: {forwards} forwards, expected 0"));
                    }
                    BenchMode::Dense if forwards != size * n => {
                        violations.push(format!("{tag}: {forwards} forwards, expected {}", size * n));
                    }
                    BenchMode::Hybrid if forwards > n_tilde * n => {
                        violations.push(format!("{tag}: {forwards} forwards exceed {}", n_tilde * n));
                    }
                    _ => {}
                }
                rows.push(BenchRow {
                    mode,
                    records: size,
                    query: qi,
                    n_tilde,
                    dense_forwards: forwards,
                    micros,
                });
            }
            if let Some((n_tilde, h)) = hybrid_forwards {
                if n_tilde < size && h >= size * n {
                    violations.push(format!(
                        "hybrid N={size} query {qi}: {h} forwards not below dense {}",
                        size * n
                    ));
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for &size in &spec.sizes {
        for &mode in &spec.modes {
            let sel: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.mode == mode && r.records == size)
                .collect();
            summaries.push(BenchSummary {
                mode,
                records: size,
                median_micros: median(sel.iter().map(|r| r.micros as f64).collect()),
                median_n_tilde: median(sel.iter().map(|r| r.n_tilde as f64).collect()),
                mean_dense_forwards: sel.iter().map(|r| r.dense_forwards as f64).sum::<f64>()
                    / sel.len().max(1) as f64,
            });
        }
    }
    Ok(BenchReport {
        spec: spec.clone(),
        rows,
        summaries,
        violations,
    })
}
