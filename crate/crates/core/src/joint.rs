//! Multi-objective joint retrieval.
//!
//! The sparse pass builds satisfaction vectors for every record and keeps
//! the ones matching at least one subquery. Only those survivors are scored
//! by the adapter. Each weight vector of a simplex grid then picks the
//! record maximizing `Σ α_i s_i + β·n·S`, and the union of the picks,
//! collapsed to one record per satisfaction vector, is the Pareto set.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::corpus::Corpus;
use crate::dense::{AdapterScorer, DenseScore, DenseScorer, SubqueryScorer};
use crate::error::{Error, Result};
use crate::query::Query;
use crate::sparse::{self, SatisfactionVector};

pub const DEFAULT_GRID_RESOLUTION: usize = 10;
/// Default β as a fraction of the loose bound.
pub const DEFAULT_BETA_FRACTION: f64 = 0.9;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
const DEDUP_TOLERANCE: f64 = 1e-12;

/// Strictly positive weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    alpha: Vec<f64>,
}

impl WeightVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("weight vector is empty".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0)) {
            return Err(Error::InvalidArgument(format!("weight {a} is not > 0")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}")));
        }
        Ok(Self { alpha })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.alpha.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Grid of weight vectors over the n-simplex.
///
/// Contains every `c/m` with positive integer `c` summing to `m`, plus one
/// vector per non-empty proper subset `T` of subqueries that puts most of
/// the mass on `T`. The off-support weight is
/// `min(1/m, 1/((|T|+1)(n-|T|) + |T|))`, which keeps the smallest grid weight
/// at `1/m` while guaranteeing that a record covering exactly `T` beats any
/// record missing part of `T` by at least that weight.
pub fn simplex_grid(n: usize, m: usize) -> Result<Vec<WeightVector>> {
    if n == 0 {
        return Err(Error::InvalidArgument("grid needs at least one subquery".into()));
    }
    if m < n {
        return Err(Error::InvalidArgument(format!(
            "grid resolution {m} is below subquery count {n}"
        )));
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut parts = vec![1usize; n];
    compositions(m, 0, &mut parts, &mut |c| {
        out.push(c.iter().map(|&x| x as f64 / m as f64).collect());
    });

    for mask in 1u64..(1u64 << n) - 1 {
        let k = mask.count_ones() as usize;
        let r = n - k;
        let w = (1.0 / m as f64).min(1.0 / ((k + 1) * r + k) as f64);
        let on = (1.0 - r as f64 * w) / k as f64;
        let alpha: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { on } else { w }).collect();
        let dup = out.iter().any(|a| {
            a.iter()
                .zip(&alpha)
                .all(|(x, y)| (x - y).abs() <= DEDUP_TOLERANCE)
        });
        if !dup {
            out.push(alpha);
        }
    }
    out.into_iter().map(WeightVector::new).collect()
}

/// Positive integer compositions of the remaining mass, lexicographic.
fn compositions(m: usize, i: usize, parts: &mut [usize], emit: &mut dyn FnMut(&[usize])) {
    let n = parts.len();
    let used: usize = parts[..i].iter().sum();
    if i == n - 1 {
        parts[i] = m - used;
        emit(parts);
        return;
    }
    let remaining_slots = n - i - 1;
    for c in 1..=(m - used - remaining_slots) {
        parts[i] = c;
        compositions(m, i + 1, parts, emit);
    }
}

/// Largest safe dense weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaBound {
    /// Smallest weight anywhere in the grid.
    pub delta_min: f64,
    /// Largest summed similarity over the candidates, if known.
    pub c_max: Option<f64>,
    /// `delta_min / c_max`, or the loose bound when `c_max` is unknown or 0.
    pub beta_max: f64,
    /// `delta_min / n`; valid for any similarities in `[0, 1]`.
    pub loose: f64,
}

pub fn beta_bound(grid: &[WeightVector], dense_sums: Option<&[f64]>) -> Result<BetaBound> {
    let first = grid
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty weight grid".into()))?;
    let n = first.len();
    let delta_min = grid.iter().map(WeightVector::min).fold(f64::INFINITY, f64::min);
    let loose = delta_min / n as f64;
    let c_max = dense_sums.map(|s| s.iter().copied().fold(0.0, f64::max));
    let beta_max = match c_max {
        Some(c) if c > 0.0 => delta_min / c,
        _ => loose,
    };
    Ok(BetaBound {
        delta_min,
        c_max,
        beta_max,
        loose,
    })
}

/// A member of the lexical candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub record: usize,
    pub id: String,
    pub satisfaction: SatisfactionVector,
    pub dense: DenseScore,
}

/// `Σ α_i s_i + β·n·S`
pub fn scalarized_value(c: &Candidate, alpha: &WeightVector, beta: f64) -> f64 {
    let mut sparse = 0.0;
    for (i, &a) in alpha.as_slice().iter().enumerate() {
        if c.satisfaction.get(i) {
            sparse += a;
        }
    }
    sparse + beta * alpha.len() as f64 * c.dense.aggregate
}

/// Index of the candidate maximizing the scalarized objective. Ties go to
/// the higher dense aggregate, then the smaller id.
pub fn scalarized_argmax(candidates: &[Candidate], alpha: &WeightVector, beta: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidate set".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if let Some(c) = candidates.iter().find(|c| c.satisfaction.len() != alpha.len()) {
        return Err(Error::LengthMismatch(alpha.len(), c.satisfaction.len()));
    }
    let mut best = 0;
    let mut best_f = scalarized_value(&candidates[0], alpha, beta);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let f = scalarized_value(c, alpha, beta);
        let b = &candidates[best];
        let better = f > best_f
            || (f == best_f
                && (c.dense.aggregate > b.dense.aggregate
                    || (c.dense.aggregate == b.dense.aggregate && c.id < b.id)));
        if better {
            best = i;
            best_f = f;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub record: usize,
    pub id: String,
    pub satisfaction: SatisfactionVector,
    pub dense: DenseScore,
    /// Objective value under the weight vector that selected this entry.
    pub f: Option<f64>,
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub n: usize,
    pub n_tilde: usize,
    pub k: usize,
    pub dense_forwards: usize,
    pub sparse_micros: u128,
    pub dense_micros: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub entries: Vec<ParetoEntry>,
    /// β used, `None` for the oracle.
    pub beta: Option<f64>,
    pub bound: Option<BetaBound>,
    pub grid_size: usize,
    pub counters: Counters,
}

impl ParetoResult {
    /// No caption matched any subquery.
    pub fn is_no_match(&self) -> bool {
        self.counters.n_tilde == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    /// (satisfaction vector, id) pairs, sorted; used to compare result sets.
    pub fn signature(&self) -> Vec<(Vec<u8>, String)> {
        let mut sig: Vec<(Vec<u8>, String)> = self
            .entries
            .iter()
            .map(|e| (e.satisfaction.to_u8(), e.id.clone()))
            .collect();
        sig.sort();
        sig
    }

    pub fn report(&self, query: &Query, include_timings: bool) -> RetrievalReport {
        RetrievalReport {
            query: query.raw.clone(),
            subqueries: query.texts().into_iter().map(str::to_owned).collect(),
            beta: self.beta,
            beta_max: self.bound.map(|b| b.beta_max),
            grid_size: self.grid_size,
            notice: self.is_no_match().then(|| NO_MATCH_NOTICE.to_string()),
            entries: self
                .entries
                .iter()
                .map(|e| ReportEntry {
                    id: e.id.clone(),
                    s: e.satisfaction.to_u8(),
                    per_subquery_sims: e.dense.per_subquery.clone(),
                    aggregate: e.dense.aggregate,
                    f: e.f,
                    alpha: e.alpha.clone(),
                })
                .collect(),
            counters: ReportCounters {
                n: self.counters.n,
                n_tilde: self.counters.n_tilde,
                k: self.counters.k,
                dense_forwards: self.counters.dense_forwards,
                sparse_micros: include_timings.then_some(self.counters.sparse_micros),
                dense_micros: include_timings.then_some(self.counters.dense_micros),
            },
        }
    }
}

pub const NO_MATCH_NOTICE: &str = "no lexical match";

/// JSON shape of a retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub query: String,
    pub subqueries: Vec<String>,
    pub beta: Option<f64>,
    pub beta_max: Option<f64>,
    pub grid_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub notice: Option<String>,
    pub entries: Vec<ReportEntry>,
    pub counters: ReportCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: String,
    pub s: Vec<u8>,
    pub per_subquery_sims: Vec<f64>,
    pub aggregate: f64,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounters {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_tilde")]
    pub n_tilde: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub dense_forwards: usize,
    pub sparse_micros: Option<u128>,
    pub dense_micros: Option<u128>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOptions {
    /// Dense weight; defaults to a fraction of the loose bound.
    pub beta: Option<f64>,
    pub resolution: usize,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            beta: None,
            resolution: DEFAULT_GRID_RESOLUTION,
        }
    }
}

/// Joint retrieval with the vision adapter as dense scorer.
pub fn joint_retrieve(
    corpus: &Corpus,
    query: &Query,
    params: &AdapterParams<f32>,
    options: JointOptions,
) -> Result<ParetoResult> {
    let scorer = AdapterScorer::new(corpus, query, params)?;
    joint_retrieve_with(corpus, query, &scorer, options)
}

pub fn joint_retrieve_with(
    corpus: &Corpus,
    query: &Query,
    scorer: &dyn SubqueryScorer,
    options: JointOptions,
) -> Result<ParetoResult> {
    let n = query.len();
    if scorer.subquery_count() != n {
        return Err(Error::LengthMismatch(n, scorer.subquery_count()));
    }
    if let Some(b) = options.beta {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {b}")));
        }
    }
    let grid = simplex_grid(n, options.resolution)?;

    let t_sparse = Instant::now();
    let dtilde = sparse::nonzero_filter(corpus, &query.texts());
    let sparse_micros = t_sparse.elapsed().as_micros();

    let mut counters = Counters {
        n: corpus.len(),
        n_tilde: dtilde.len(),
        k: grid.len(),
        sparse_micros,
        ..Counters::default()
    };
    if dtilde.is_empty() {
        let bound = beta_bound(&grid, None)?;
        return Ok(ParetoResult {
            entries: Vec::new(),
            beta: Some(options.beta.unwrap_or(DEFAULT_BETA_FRACTION * bound.loose)),
            bound: Some(bound),
            grid_size: grid.len(),
            counters,
        });
    }

    let t_dense = Instant::now();
    let dense = DenseScorer::new(scorer);
    let records: Vec<usize> = dtilde.iter().map(|(r, _)| *r).collect();
    let scores = dense.score_all(&records)?;
    let candidates: Vec<Candidate> = dtilde
        .into_iter()
        .zip(scores)
        .map(|((record, satisfaction), dense)| Candidate {
            record,
            id: corpus.record(record).id.clone(),
            satisfaction,
            dense,
        })
        .collect();
    let sums: Vec<f64> = candidates.iter().map(|c| c.dense.sum()).collect();
    let bound = beta_bound(&grid, Some(&sums))?;
    let beta = options.beta.unwrap_or(DEFAULT_BETA_FRACTION * bound.loose);

    // first grid point to select each candidate
    let mut selected: BTreeMap<usize, usize> = BTreeMap::new();
    for (g, alpha) in grid.iter().enumerate() {
        let best = scalarized_argmax(&candidates, alpha, beta)?;
        selected.entry(best).or_insert(g);
    }
    counters.dense_micros = t_dense.elapsed().as_micros();
    counters.dense_forwards = dense.forwards();

    let mut by_vector: HashMap<&SatisfactionVector, (usize, usize)> = HashMap::new();
    for (&c, &g) in &selected {
        let cand = &candidates[c];
        by_vector
            .entry(&cand.satisfaction)
            .and_modify(|slot| {
                if denser(cand, &candidates[slot.0]) {
                    *slot = (c, g);
                }
            })
            .or_insert((c, g));
    }
    let mut entries: Vec<ParetoEntry> = by_vector
        .into_values()
        .map(|(c, g)| {
            let cand = &candidates[c];
            ParetoEntry {
                record: cand.record,
                id: cand.id.clone(),
                satisfaction: cand.satisfaction.clone(),
                dense: cand.dense.clone(),
                f: Some(scalarized_value(cand, &grid[g], beta)),
                alpha: Some(grid[g].as_slice().to_vec()),
            }
        })
        .collect();
    sort_entries(&mut entries);
    Ok(ParetoResult {
        entries,
        beta: Some(beta),
        bound: Some(bound),
        grid_size: grid.len(),
        counters,
    })
}

fn denser(a: &Candidate, b: &Candidate) -> bool {
    a.dense.aggregate > b.dense.aggregate || (a.dense.aggregate == b.dense.aggregate && a.id < b.id)
}

/// More satisfied subqueries first, then higher dense aggregate, then id.
fn sort_entries(entries: &mut [ParetoEntry]) {
    entries.sort_by(|a, b| {
        b.satisfaction
            .count_ones()
            .cmp(&a.satisfaction.count_ones())
            .then_with(|| b.dense.aggregate.total_cmp(&a.dense.aggregate))
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Pareto set straight from the definition: full caption scan, pairwise
/// dominance over all matching records, dense maximum per surviving vector.
pub fn pareto_oracle(corpus: &Corpus, query: &Query, scorer: &dyn SubqueryScorer) -> Result<ParetoResult> {
    let n = query.len();
    if scorer.subquery_count() != n {
        return Err(Error::LengthMismatch(n, scorer.subquery_count()));
    }
    let vectors = sparse::full_scan(corpus, &query.texts());
    let matching: Vec<usize> = (0..corpus.len()).filter(|&r| !vectors[r].is_zero()).collect();
    let mut front: Vec<usize> = Vec::new();
    for &r in &matching {
        let mut dominated = false;
        for &o in &matching {
            if sparse::dominates(&vectors[o], &vectors[r])? {
                dominated = true;
                break;
            }
        }
        if !dominated {
            front.push(r);
        }
    }

    let dense = DenseScorer::new(scorer);
    let mut best: HashMap<&SatisfactionVector, Candidate> = HashMap::new();
    for &r in &front {
        let cand = Candidate {
            record: r,
            id: corpus.record(r).id.clone(),
            satisfaction: vectors[r].clone(),
            dense: dense.score(r)?,
        };
        match best.get(&vectors[r]) {
            Some(cur) if !denser(&cand, cur) => {}
            _ => {
                best.insert(&vectors[r], cand);
            }
        }
    }
    let mut entries: Vec<ParetoEntry> = best
        .into_values()
        .map(|c| ParetoEntry {
            record: c.record,
            id: c.id,
            satisfaction: c.satisfaction,
            dense: c.dense,
            f: None,
            alpha: None,
        })
        .collect();
    sort_entries(&mut entries);
    Ok(ParetoResult {
        entries,
        beta: None,
        bound: None,
        grid_size: 0,
        counters: Counters {
            n: corpus.len(),
            n_tilde: matching.len(),
            k: 0,
            dense_forwards: dense.forwards(),
            ..Counters::default()
        },
    })
}
