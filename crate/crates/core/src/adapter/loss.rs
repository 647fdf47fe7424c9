//! InfoNCE over adapter outputs and its gradient.

use serde::{Deserialize, Serialize};

use super::AdapterParams;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat, Real};

/// `-log( Σ_pos exp(s/τ) / (Σ_pos exp(s/τ) + Σ_neg exp(s/τ)) )`, stabilized by
/// subtracting the maximum logit.
pub fn infonce_loss(pos_sims: &[f64], neg_sims: &[f64], tau: f64) -> Result<f64> {
    if pos_sims.is_empty() {
        return Err(Error::InvalidArgument("no positive pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let all = pos_sims.iter().chain(neg_sims);
    let max = all.clone().fold(f64::NEG_INFINITY, |a, &s| a.max(s / tau));
    let sum_pos: f64 = pos_sims.iter().map(|&s| (s / tau - max).exp()).sum();
    let sum_all: f64 = all.map(|&s| (s / tau - max).exp()).sum();
    Ok((sum_all.ln() - sum_pos.ln()).max(0.0))
}

/// How positives and negatives inside a batch are pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceVariant {
    /// One term per batch: all positive pairs share a single numerator.
    #[default]
    Pooled,
    /// One term per subquery embedding, images of the batch as candidates.
    PerPair,
}

/// One aligned (image, subquery) pair. Pairs sharing a label are positives
/// for each other; every other in-batch pairing is a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub features: Mat<T>,
    pub embedding: Vec<T>,
    pub label: usize,
}

/// Loss of one batch: `sum` over `terms` loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub sum: f64,
    pub terms: usize,
}

impl BatchLoss {
    pub fn mean(&self) -> f64 {
        self.sum / self.terms as f64
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Batch InfoNCE and the gradient of its mean with respect to every
/// adapter tensor. Image `i` is scored against subquery `j` as
/// `<f(image_i, t_j), t_j>`.
pub fn adapter_grad<T: Real>(
    params: &AdapterParams<T>,
    batch: &[TrainExample<T>],
    tau: f64,
    variant: InfoNceVariant,
) -> Result<(BatchLoss, AdapterParams<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let b = batch.len();
    let mut caches = Vec::with_capacity(b * b);
    let mut logits = vec![0.0f64; b * b];
    for (i, img) in batch.iter().enumerate() {
        for (j, txt) in batch.iter().enumerate() {
            let cache = params.forward_cached(&img.features, &txt.embedding)?;
            logits[i * b + j] = dot(&cache.output, &txt.embedding).to_f64() / tau;
            caches.push(cache);
        }
    }
    let positive = |i: usize, j: usize| batch[i].label == batch[j].label;

    // d loss / d logit
    let mut d_logits = vec![0.0f64; b * b];
    let loss = match variant {
        InfoNceVariant::Pooled => {
            let all = log_sum_exp(logits.iter().copied());
            let pos_idx: Vec<usize> = (0..b * b).filter(|&k| positive(k / b, k % b)).collect();
            let pos = log_sum_exp(pos_idx.iter().map(|&k| logits[k]));
            for (k, d) in d_logits.iter_mut().enumerate() {
                *d = (logits[k] - all).exp();
            }
            for &k in &pos_idx {
                d_logits[k] -= (logits[k] - pos).exp();
            }
            BatchLoss {
                sum: all - pos,
                terms: 1,
            }
        }
        InfoNceVariant::PerPair => {
            let mut sum = 0.0;
            for j in 0..b {
                let column = (0..b).map(|i| logits[i * b + j]);
                let all = log_sum_exp(column);
                let pos = log_sum_exp((0..b).filter(|&i| positive(i, j)).map(|i| logits[i * b + j]));
                sum += all - pos;
                for i in 0..b {
                    let k = i * b + j;
                    d_logits[k] += (logits[k] - all).exp() / b as f64;
                    if positive(i, j) {
                        d_logits[k] -= (logits[k] - pos).exp() / b as f64;
                    }
                }
            }
            BatchLoss { sum, terms: b }
        }
    };

    let mut grads = params.zeros_like();
    for (k, cache) in caches.iter().enumerate() {
        if d_logits[k] == 0.0 {
            continue;
        }
        let scale = T::from_f64(d_logits[k] / tau);
        let d_out: Vec<T> = batch[k % b].embedding.iter().map(|&t| t * scale).collect();
        params.backward(cache, &d_out, &mut grads);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_only_is_zero() {
        assert_eq!(infonce_loss(&[1.0], &[], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn one_positive_one_negative() {
        // -ln(e^{0.9/0.07} / (e^{0.9/0.07} + e^{0.1/0.07})), evaluated in Python
        const EXPECTED: f64 = 1.0880081033660834e-05;
        let got = infonce_loss(&[0.9], &[0.1], 0.07).unwrap();
        assert!((got - EXPECTED).abs() < 1e-15, "{got}");
    }

    #[test]
    fn shift_invariance() {
        let pos = [0.3, 0.8];
        let neg = [0.1, -0.4, 0.5];
        let base = infonce_loss(&pos, &neg, 0.07).unwrap();
        let shifted = infonce_loss(&pos.map(|s| s + 2.5), &neg.map(|s| s + 2.5), 0.07).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        assert!(infonce_loss(&[], &[0.1], 0.07).is_err());
        assert!(infonce_loss(&[0.1], &[], 0.0).is_err());
        assert!(infonce_loss(&[0.1], &[], -1.0).is_err());
    }

    #[test]
    fn large_similarities_do_not_overflow() {
        let l = infonce_loss(&[100.0], &[99.0], 0.01).unwrap();
        assert!(l.is_finite());
    }
}
