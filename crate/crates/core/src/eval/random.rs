//! Random lexical instances with skewed subquery frequencies.

use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureMatrix, FeatureSource, ImageRecord};
use crate::dense::ScoreTable;
use crate::error::{Error, Result};
use crate::query::Query;

const WORDS: &[&str] = &[
    "red", "car", "blue", "bird", "old", "house", "green", "tree", "dog", "ball", "yellow", "hat", "wooden",
    "chair", "black", "cat", "river", "bridge", "snowy", "mountain",
];
const FILLER: &[&str] = &[
    "a", "the", "of", "in", "with", "photo", "next", "to", "scene", "and",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub n: usize,
    pub records: usize,
    /// Probability that a caption contains the first subquery.
    pub base_rate: f64,
    /// Each later subquery is `skew` times as frequent as the previous one.
    pub skew: f64,
    /// Probability that a two-word subquery's words are scattered through a
    /// caption without forming the phrase.
    pub scatter_rate: f64,
    pub seed: u64,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            n: 4,
            records: 100,
            base_rate: 0.35,
            skew: 0.5,
            scatter_rate: 0.3,
            seed: 0,
        }
    }
}

/// Corpus, query, and a random similarity table for each record.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub corpus: Corpus,
    pub query: Query,
    pub scores: ScoreTable,
}

pub fn random_instance(spec: RandomSpec) -> Result<RandomInstance> {
    if spec.n == 0 || spec.n * 2 > WORDS.len() || spec.records == 0 {
        return Err(Error::InvalidArgument(format!(
            "random instance needs 1 <= n <= {} and records >= 1",
            WORDS.len() / 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<&str> = WORDS.to_vec();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let phrases: Vec<Vec<&str>> = (0..spec.n)
        .map(|_| {
            let len = if rng.random_bool(0.5) { 2 } else { 1 };
            (0..len)
                .map(|_| pool.next().expect("pool has 2n words"))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(spec.records);
    for r in 0..spec.records {
        let mut chunks: Vec<String> = (0..rng.random_range(2..6))
            .map(|_| (*FILLER.choose(&mut rng).expect("filler")).to_string())
            .collect();
        let mut rate = spec.base_rate;
        for phrase in &phrases {
            if rng.random_bool(rate.clamp(0.0, 1.0)) {
                chunks.push(phrase.join(" "));
            } else if phrase.len() > 1 && rng.random_bool(spec.scatter_rate) {
                chunks.extend(phrase.iter().rev().map(|w| (*w).to_string()));
            }
            rate *= spec.skew;
        }
        chunks.shuffle(&mut rng);
        records.push(ImageRecord {
            id: format!("r{r:04}"),
            caption: chunks.join(" "),
            feature_ref: format!("features/r{r:04}.xmrg").into(),
            meta: Default::default(),
        });
    }
    let texts: Vec<String> = phrases.iter().map(|p| p.join(" ")).collect();
    let query = Query::from_texts(texts.join(", "), &texts)?;
    let table = (0..spec.records)
        .map(|_| (0..spec.n).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let placeholder = Arc::new(FeatureMatrix::new(1, 1, vec![0.0])?);
    Ok(RandomInstance {
        corpus: Corpus::new(records, FeatureSource::Memory(vec![placeholder; spec.records]))?,
        query,
        scores: ScoreTable { n: spec.n, table },
    })
}
