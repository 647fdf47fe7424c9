//! Sub-dimensional sparse retrieval: binary subquery satisfaction from
//! captions, dominance between satisfaction vectors, and the corpus filters
//! built on them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::text::{self, MatchOptions};

/// Which subqueries a caption lexically contains.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SatisfactionVector {
    bits: Vec<bool>,
}

impl SatisfactionVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn from_u8(bits: &[u8]) -> Self {
        Self::new(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize) {
        self.bits[i] = true;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Indices of set bits, ascending.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    /// `self` ≻ `other`: never worse, strictly better somewhere.
    pub fn dominates(&self, other: &Self) -> Result<bool> {
        dominates(self, other)
    }
}

impl fmt::Debug for SatisfactionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", u8::from(*b))?;
        }
        write!(f, "]")
    }
}

impl Serialize for SatisfactionVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_u8().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SatisfactionVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<u8>::deserialize(d).map(|v| Self::from_u8(&v))
    }
}

/// Satisfaction of each subquery by one caption (default matching options).
pub fn satisfaction<S: AsRef<str>>(caption: &str, subqueries: &[S]) -> SatisfactionVector {
    satisfaction_with(caption, subqueries, MatchOptions::default())
}

pub fn satisfaction_with<S: AsRef<str>>(
    caption: &str,
    subqueries: &[S],
    opts: MatchOptions,
) -> SatisfactionVector {
    let caption = text::tokenize_with(caption, opts);
    SatisfactionVector::new(
        subqueries
            .iter()
            .map(|q| text::contains_phrase(&caption, &text::tokenize_with(q.as_ref(), opts)))
            .collect(),
    )
}

pub fn dominates(a: &SatisfactionVector, b: &SatisfactionVector) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let mut strict = false;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        if y && !x {
            return Ok(false);
        }
        strict |= x && !y;
    }
    Ok(strict)
}

/// Records satisfying at least one subquery (D̃), found through the inverted
/// index. Feature files are never touched. Sorted by record index.
pub fn nonzero_filter<S: AsRef<str>>(corpus: &Corpus, subqueries: &[S]) -> Vec<(usize, SatisfactionVector)> {
    let n = subqueries.len();
    let mut hits: BTreeMap<usize, SatisfactionVector> = BTreeMap::new();
    for (i, q) in subqueries.iter().enumerate() {
        let Some(phrase) = corpus.phrase_ids(q.as_ref()) else {
            continue;
        };
        if phrase.is_empty() {
            continue;
        }
        // scan the shortest posting list among the phrase's tokens
        let Some(rarest) = phrase
            .iter()
            .map(|&id| corpus.postings_by_id(id))
            .min_by_key(|p| p.len())
        else {
            continue;
        };
        for &rec in rarest {
            if text::contains_phrase(corpus.caption_tokens(rec), &phrase) {
                hits.entry(rec)
                    .or_insert_with(|| SatisfactionVector::zeros(n))
                    .set(i);
            }
        }
    }
    hits.into_iter().collect()
}

/// Satisfaction vectors for every record, by direct caption scan.
pub fn full_scan<S: AsRef<str>>(corpus: &Corpus, subqueries: &[S]) -> Vec<SatisfactionVector> {
    let phrases: Vec<Option<Vec<u32>>> = subqueries.iter().map(|q| corpus.phrase_ids(q.as_ref())).collect();
    (0..corpus.len())
        .map(|rec| {
            let caption = corpus.caption_tokens(rec);
            SatisfactionVector::new(
                phrases
                    .iter()
                    .map(|p| p.as_ref().is_some_and(|p| text::contains_phrase(caption, p)))
                    .collect(),
            )
        })
        .collect()
}

/// Keep entries whose vector no other entry dominates. Ties all survive.
pub fn nondominated_filter(
    entries: &[(usize, SatisfactionVector)],
) -> Result<Vec<(usize, SatisfactionVector)>> {
    let Some(first) = entries.first() else {
        return Ok(Vec::new());
    };
    let n = first.1.len();
    if let Some(bad) = entries.iter().find(|e| e.1.len() != n) {
        return Err(Error::LengthMismatch(n, bad.1.len()));
    }

    // dominance only depends on the vector, so compare distinct vectors once
    let mut distinct: HashMap<&SatisfactionVector, bool> = HashMap::new();
    for (_, v) in entries {
        distinct.insert(v, true);
    }
    let keys: Vec<&SatisfactionVector> = distinct.keys().copied().collect();
    for &v in &keys {
        let dominated = keys.iter().any(|&w| dominates(w, v).unwrap_or(false));
        distinct.insert(v, !dominated);
    }
    Ok(entries.iter().filter(|(_, v)| distinct[v]).cloned().collect())
}
