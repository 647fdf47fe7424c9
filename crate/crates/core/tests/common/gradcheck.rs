use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmrag_core::adapter::{adapter_grad, AdapterConfig, AdapterParams, InfoNceVariant, TrainExample};
use xmrag_core::tensor::Mat;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-8;

pub fn shapes() -> [AdapterConfig; 3] {
    [
        AdapterConfig {
            d_vision: 6,
            d_text: 5,
            d_model: 8,
            heads: 2,
            query_tokens: 3,
            hidden: 7,
            d_out: 5,
        },
        AdapterConfig {
            d_vision: 4,
            d_text: 4,
            d_model: 4,
            heads: 1,
            query_tokens: 1,
            hidden: 6,
            d_out: 4,
        },
        AdapterConfig {
            d_vision: 5,
            d_text: 6,
            d_model: 12,
            heads: 3,
            query_tokens: 2,
            hidden: 9,
            d_out: 6,
        },
    ]
}

pub fn batch(cfg: &AdapterConfig, rng: &mut ChaCha8Rng, labels: &[usize]) -> Vec<TrainExample<f64>> {
    labels
        .iter()
        .map(|&label| {
            let tokens = rng.random_range(2..5);
            let t: Vec<f64> = (0..cfg.d_text).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            TrainExample {
                features: Mat::random_normal(tokens, cfg.d_vision, 1.0, rng),
                embedding: t.into_iter().map(|x| x / n).collect(),
                label,
            }
        })
        .collect()
}

/// Returns (checked entries, worst relative error).
pub fn check(
    params: &AdapterParams<f64>,
    data: &[TrainExample<f64>],
    variant: InfoNceVariant,
) -> (usize, f64) {
    let tau = 0.5;
    let (_, grads) = adapter_grad(params, data, tau, variant).unwrap();
    let loss = |p: &AdapterParams<f64>| adapter_grad(p, data, tau, variant).unwrap().0.mean();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = params.clone();
    for (ti, g) in grads.tensors().iter().enumerate() {
        for k in 0..g.data.len() {
            let orig = probe.tensors()[ti].data[k];
            probe.tensors_mut()[ti].data[k] = orig + STEP;
            let up = loss(&probe);
            probe.tensors_mut()[ti].data[k] = orig - STEP;
            let down = loss(&probe);
            probe.tensors_mut()[ti].data[k] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = g.data[k];
            if a.abs() > FLOOR {
                checked += 1;
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
            }
        }
    }
    (checked, worst)
}

/// Every shape, seed and variant. Returns (checked entries, worst relative error).
pub fn sweep(mut log: impl FnMut(&str)) -> (usize, f64) {
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for (si, cfg) in shapes().iter().enumerate() {
        for seed in 0..5u64 {
            let params = AdapterParams::<f64>::init(*cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let data = batch(cfg, &mut rng, &[0, 1, 2, 1]);
            for variant in [InfoNceVariant::Pooled, InfoNceVariant::PerPair] {
                let (checked, w) = check(&params, &data, variant);
                log(&format!(
                    "shape {si} seed {seed} {variant:?}: {checked} entries, worst {w:.2e}"
                ));
                total += checked;
                worst = worst.max(w);
            }
        }
    }
    (total, worst)
}
