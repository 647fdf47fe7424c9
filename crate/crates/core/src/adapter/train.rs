//! Adam with a step learning-rate schedule, and a synthetic pair generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{adapter_grad, AdapterParams, InfoNceVariant, TrainExample};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Multiply the learning rate by `decay` every `step_size` epochs.
    pub step_size: usize,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub variant: InfoNceVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            learning_rate: 5e-5,
            epochs: 10,
            step_size: 3,
            decay: 0.6,
            batch_size: 8,
            seed: 0,
            variant: InfoNceVariant::Pooled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument("decay must be in (0, 1]".into()));
        }
        if self.learning_rate < 0.0 || self.step_size == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "learning_rate >= 0, step_size >= 1 and batch_size >= 1 required".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi((epoch / self.step_size) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: AdapterParams<T>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam<T> {
    m: AdapterParams<T>,
    v: AdapterParams<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(params: &AdapterParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut AdapterParams<T>, grads: &AdapterParams<T>, lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.step));
        let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.step));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(ADAM_EPS);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (T::one() - b1) * gk;
                v.data[k] = b2 * v.data[k] + (T::one() - b2) * gk * gk;
                let m_hat = m.data[k] / c1;
                let v_hat = v.data[k] / c2;
                p.data[k] = p.data[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Train the adapter on aligned pairs with in-batch negatives.
///
/// Batches are drawn once from the seed and visited in a reshuffled order
/// each epoch; epoch losses are summed in batch order so a zero learning
/// rate gives a bit-identical trace.
pub fn train_adapter<T: Real>(
    init: AdapterParams<T>,
    dataset: &[TrainExample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let batches: Vec<Vec<TrainExample<T>>> = order
        .chunks(config.batch_size)
        .map(|c| c.iter().map(|&i| dataset[i].clone()).collect())
        .collect();

    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut visit: Vec<usize> = (0..batches.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        visit.shuffle(&mut rng);
        let mut losses = vec![0.0; batches.len()];
        for &bi in &visit {
            let (loss, grads) = adapter_grad(&params, &batches[bi], config.tau, config.variant)?;
            losses[bi] = loss.mean();
            if lr > 0.0 {
                adam.update(&mut params, &grads, lr);
            }
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::debug!("epoch {epoch}: lr={lr:.3e} loss={mean:.6}");
        epoch_losses.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::NonFiniteStage("training"));
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Shape of a synthetic training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub vision_tokens: usize,
    pub d_vision: usize,
    pub d_text: usize,
    /// Std of the noise added to each vision token.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 200,
            vision_tokens: 8,
            d_vision: 16,
            d_text: 16,
            noise: 0.3,
            seed: 0,
        }
    }
}

/// Pairs whose vision tokens are a fixed random linear image of the paired
/// unit text embedding plus Gaussian noise. Every pair gets its own label.
pub fn synthetic_pairs<T: Real>(spec: SyntheticSpec) -> Vec<TrainExample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mixing: Mat<f64> = Mat::random_normal(
        spec.d_text,
        spec.d_vision,
        1.0 / (spec.d_text as f64).sqrt(),
        &mut rng,
    );
    (0..spec.pairs)
        .map(|label| {
            let t = random_unit(&mut rng, spec.d_text);
            let base = Mat::from_vec(1, spec.d_text, t.clone()).matmul(&mixing);
            let mut feats = Mat::<f64>::zeros(spec.vision_tokens, spec.d_vision);
            for r in 0..spec.vision_tokens {
                let gain: f64 = rng.random_range(0.5..1.5);
                for (c, x) in feats.row_mut(r).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = gain * base.data[c] + spec.noise * z;
                }
            }
            TrainExample {
                features: feats.cast(),
                embedding: t.into_iter().map(T::from_f64).collect(),
                label,
            }
        })
        .collect()
}

pub(crate) fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;

    fn tiny() -> (AdapterParams<f32>, Vec<TrainExample<f32>>) {
        let spec = SyntheticSpec {
            pairs: 24,
            ..SyntheticSpec::default()
        };
        let cfg = AdapterConfig {
            d_vision: spec.d_vision,
            d_text: spec.d_text,
            d_model: 16,
            heads: 2,
            query_tokens: 2,
            hidden: 16,
            d_out: spec.d_text,
        };
        (AdapterParams::init(cfg, 9).unwrap(), synthetic_pairs(spec))
    }

    #[test]
    fn schedule_steps_every_three_epochs() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 5e-5);
        assert_eq!(c.learning_rate_at(2), 5e-5);
        assert!((c.learning_rate_at(3) - 3e-5).abs() < 1e-18);
        assert!((c.learning_rate_at(6) - 1.8e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_trace() {
        let (init, data) = tiny();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let out = train_adapter(init.clone(), &data, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert!(out
            .epoch_losses
            .windows(2)
            .all(|w| w[0].to_bits() == w[1].to_bits()));
    }

    #[test]
    fn same_seed_same_trace() {
        let (init, data) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_adapter(init.clone(), &data, &cfg).unwrap();
        let b = train_adapter(init, &data, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.epoch_losses), bits(&b.epoch_losses));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let (init, _) = tiny();
        assert!(train_adapter(init.clone(), &[], &TrainConfig::default()).is_err());
        let (_, data) = tiny();
        let bad = TrainConfig {
            decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(train_adapter(init, &data, &bad).is_err());
    }
}
