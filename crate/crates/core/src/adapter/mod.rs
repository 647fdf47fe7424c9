//! Vision adapter: learnable query tokens cross-attend to frozen vision
//! tokens, the result cross-attends to the subquery embedding, and an MLP
//! head with layer norm maps the pooled tokens to a unit vector comparable
//! with the subquery embedding.
//!
//! Everything is generic over [`Real`] so the same code runs in f32 for
//! retrieval and in f64 for gradient checks.

mod io;
mod loss;
mod train;

pub use io::{load_params, read_params, save_params, write_params};
pub use loss::{adapter_grad, infonce_loss, BatchLoss, InfoNceVariant, TrainExample};
pub(crate) use train::random_unit;
pub use train::{synthetic_pairs, train_adapter, SyntheticSpec, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat, Real};

const LN_EPS: f64 = 1e-5;

/// Adapter dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Vision token width.
    pub d_vision: usize,
    /// Subquery embedding width.
    pub d_text: usize,
    /// Attention width.
    pub d_model: usize,
    pub heads: usize,
    /// Number of learnable query tokens.
    pub query_tokens: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// Output width; must equal `d_text` for cosine scoring.
    pub d_out: usize,
}

impl AdapterConfig {
    /// Defaults for the given input widths: 4 query tokens, 4 heads,
    /// width 256, hidden 512, output width = text width.
    pub fn with_inputs(d_vision: usize, d_text: usize) -> Self {
        Self {
            d_vision,
            d_text,
            d_model: 256,
            heads: 4,
            query_tokens: 4,
            hidden: 512,
            d_out: d_text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_vision", self.d_vision),
            ("d_text", self.d_text),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("query_tokens", self.query_tokens),
            ("hidden", self.hidden),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Projections of one multi-head cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
}

impl<T: Real> AttentionWeights<T> {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
        }
    }
}

/// All learnable adapter tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub config: AdapterConfig,
    pub query_tokens: Mat<T>,
    pub proj_vision: Mat<T>,
    pub proj_text: Mat<T>,
    pub vision_attn: AttentionWeights<T>,
    pub text_attn: AttentionWeights<T>,
    pub mlp_w1: Mat<T>,
    pub mlp_b1: Mat<T>,
    pub mlp_w2: Mat<T>,
    pub mlp_b2: Mat<T>,
    pub ln_gamma: Mat<T>,
    pub ln_beta: Mat<T>,
}

pub const TENSOR_NAMES: [&str; 17] = [
    "query_tokens",
    "proj_vision",
    "proj_text",
    "vision_attn.wq",
    "vision_attn.wk",
    "vision_attn.wv",
    "vision_attn.wo",
    "text_attn.wq",
    "text_attn.wk",
    "text_attn.wv",
    "text_attn.wo",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "ln.gamma",
    "ln.beta",
];

impl<T: Real> AdapterParams<T> {
    /// All-zero tensors of the right shapes.
    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Self {
            config,
            query_tokens: Mat::zeros(c.query_tokens, c.d_model),
            proj_vision: Mat::zeros(c.d_vision, c.d_model),
            proj_text: Mat::zeros(c.d_text, c.d_model),
            vision_attn: AttentionWeights::zeros(c.d_model),
            text_attn: AttentionWeights::zeros(c.d_model),
            mlp_w1: Mat::zeros(c.d_model, c.hidden),
            mlp_b1: Mat::zeros(1, c.hidden),
            mlp_w2: Mat::zeros(c.hidden, c.d_out),
            mlp_b2: Mat::zeros(1, c.d_out),
            ln_gamma: Mat::zeros(1, c.d_out),
            ln_beta: Mat::zeros(1, c.d_out),
        })
    }

    /// Random init: weights ~ N(0, 1/fan_in), biases 0, layer-norm gain 1.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        p.query_tokens = Mat::random_normal(c.query_tokens, c.d_model, 1.0, &mut rng);
        p.proj_vision = Mat::random_normal(c.d_vision, c.d_model, std(c.d_vision), &mut rng);
        p.proj_text = Mat::random_normal(c.d_text, c.d_model, std(c.d_text), &mut rng);
        for attn in [&mut p.vision_attn, &mut p.text_attn] {
            for w in [&mut attn.wq, &mut attn.wk, &mut attn.wv, &mut attn.wo] {
                *w = Mat::random_normal(c.d_model, c.d_model, std(c.d_model), &mut rng);
            }
        }
        p.mlp_w1 = Mat::random_normal(c.d_model, c.hidden, std(c.d_model), &mut rng);
        p.mlp_w2 = Mat::random_normal(c.hidden, c.d_out, std(c.hidden), &mut rng);
        p.ln_gamma.fill(T::one());
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&Mat<T>; 17] {
        [
            &self.query_tokens,
            &self.proj_vision,
            &self.proj_text,
            &self.vision_attn.wq,
            &self.vision_attn.wk,
            &self.vision_attn.wv,
            &self.vision_attn.wo,
            &self.text_attn.wq,
            &self.text_attn.wk,
            &self.text_attn.wv,
            &self.text_attn.wo,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat<T>; 17] {
        [
            &mut self.query_tokens,
            &mut self.proj_vision,
            &mut self.proj_text,
            &mut self.vision_attn.wq,
            &mut self.vision_attn.wk,
            &mut self.vision_attn.wv,
            &mut self.vision_attn.wo,
            &mut self.text_attn.wq,
            &mut self.text_attn.wk,
            &mut self.text_attn.wv,
            &mut self.text_attn.wo,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> AdapterParams<U> {
        let mut out = AdapterParams::<U>::zeros(self.config).expect("validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Hand-built parameters that pass the subquery embedding straight
    /// through and add `image_gain` times the mean vision token.
    ///
    /// Requires `d_vision == d_text`; uses one query token, one head,
    /// `d_model = d_out = d_text` and an MLP that computes the identity
    /// exactly (`gelu(x) - gelu(-x) = x`). The output is
    /// `normalize(center(t + image_gain * mean_rows(features)))`, so a
    /// zero-mean unit `t` comes back unchanged when the features are zero.
    pub fn passthrough(d: usize, image_gain: f64) -> Result<Self> {
        let config = AdapterConfig {
            d_vision: d,
            d_text: d,
            d_model: d,
            heads: 1,
            query_tokens: 1,
            hidden: 2 * d,
            d_out: d,
        };
        let mut p = Self::zeros(config)?;
        p.proj_vision = Mat::identity(d);
        p.proj_text = Mat::identity(d);
        for attn in [&mut p.vision_attn, &mut p.text_attn] {
            attn.wq = Mat::identity(d);
            attn.wk = Mat::identity(d);
            attn.wv = Mat::identity(d);
            attn.wo = Mat::identity(d);
        }
        // zero query token: uniform attention over vision tokens
        p.vision_attn.wo.scale(T::from_f64(image_gain));
        for i in 0..d {
            p.mlp_w1.data[i * 2 * d + i] = T::one();
            p.mlp_w1.data[i * 2 * d + d + i] = -T::one();
            p.mlp_w2.data[i * d + i] = T::one();
            p.mlp_w2.data[(d + i) * d + i] = -T::one();
        }
        p.ln_gamma.fill(T::one());
        Ok(p)
    }
}

impl<T: Real> Mat<T> {
    pub fn from_features(f: &FeatureMatrix) -> Self {
        Mat::from_vec(
            f.rows(),
            f.cols(),
            f.values().iter().map(|&v| T::from_f64(f64::from(v))).collect(),
        )
    }
}

/// Intermediate values of one multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Per head, `queries x keys` softmax weights.
    pub probs: Vec<Mat<T>>,
    concat: Mat<T>,
}

fn attention_forward<T: Real>(
    w: &AttentionWeights<T>,
    heads: usize,
    queries_in: &Mat<T>,
    keys_in: &Mat<T>,
) -> (Mat<T>, AttentionCache<T>) {
    let q = queries_in.matmul(&w.wq);
    let k = keys_in.matmul(&w.wk);
    let v = keys_in.matmul(&w.wv);
    let d = q.cols;
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut concat = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut a = Mat::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &q.row(i)[cols.clone()];
            let row = a.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
        }
        for i in 0..q.rows {
            let out = &mut concat.row_mut(i)[cols.clone()];
            for j in 0..k.rows {
                let p = a.at(i, j);
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
        probs.push(a);
    }
    let out = concat.matmul(&w.wo);
    (
        out,
        AttentionCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Returns (d queries_in, d keys_in); accumulates weight gradients into `g`.
fn attention_backward<T: Real>(
    w: &AttentionWeights<T>,
    cache: &AttentionCache<T>,
    queries_in: &Mat<T>,
    keys_in: &Mat<T>,
    d_out: &Mat<T>,
    g: &mut AttentionWeights<T>,
) -> (Mat<T>, Mat<T>) {
    let heads = cache.probs.len();
    let d = cache.q.cols;
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    Mat::add_tn_matmul(&mut g.wo, &cache.concat, d_out);
    let d_concat = d_out.matmul_nt(&w.wo);

    let (nq, nk) = (cache.q.rows, cache.k.rows);
    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dv = Mat::zeros(nk, d);
    for (h, a) in cache.probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..nq {
            let d_oi = &d_concat.row(i)[cols.clone()];
            let mut d_a: Vec<T> = (0..nk)
                .map(|j| dot(d_oi, &cache.v.row(j)[cols.clone()]))
                .collect();
            for j in 0..nk {
                let p = a.at(i, j);
                for (dvv, &g_o) in dv.row_mut(j)[cols.clone()].iter_mut().zip(d_oi) {
                    *dvv += p * g_o;
                }
            }
            let inner = (0..nk).fold(T::zero(), |acc, j| acc + a.at(i, j) * d_a[j]);
            for (j, da) in d_a.iter_mut().enumerate() {
                *da = a.at(i, j) * (*da - inner) * scale;
            }
            for j in 0..nk {
                let ds = d_a[j];
                let qi = &cache.q.row(i)[cols.clone()];
                let kj = &cache.k.row(j)[cols.clone()];
                for (dqq, &kk) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *dqq += ds * kk;
                }
                for (dkk, &qq) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *dkk += ds * qq;
                }
            }
        }
    }

    Mat::add_tn_matmul(&mut g.wq, queries_in, &dq);
    Mat::add_tn_matmul(&mut g.wk, keys_in, &dk);
    Mat::add_tn_matmul(&mut g.wv, keys_in, &dv);
    let d_queries = dq.matmul_nt(&w.wq);
    let mut d_keys = dk.matmul_nt(&w.wk);
    d_keys.add_assign(&dv.matmul_nt(&w.wv));
    (d_queries, d_keys)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    features: Mat<T>,
    embedding: Mat<T>,
    vision: Mat<T>,
    pub vision_attn: AttentionCache<T>,
    stage1: Mat<T>,
    text: Mat<T>,
    pub text_attn: AttentionCache<T>,
    pooled: Mat<T>,
    hidden_pre: Mat<T>,
    hidden: Mat<T>,
    xhat: Vec<T>,
    rstd: T,
    norm: T,
    pub output: Vec<T>,
}

fn check<T: Real>(m: &Mat<T>, stage: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteStage(stage))
    }
}

impl<T: Real> AdapterParams<T> {
    fn check_inputs(&self, features: &Mat<T>, embedding: &[T]) -> Result<()> {
        let c = &self.config;
        if features.rows == 0 || features.cols != c.d_vision {
            return Err(Error::Shape(format!(
                "vision features are {}x{}, adapter expects Lx{}",
                features.rows, features.cols, c.d_vision
            )));
        }
        if embedding.len() != c.d_text {
            return Err(Error::Shape(format!(
                "subquery embedding has {} dims, adapter expects {}",
                embedding.len(),
                c.d_text
            )));
        }
        Ok(())
    }

    /// Sub-dimensional vision embedding for one (image, subquery) pair.
    pub fn forward(&self, features: &Mat<T>, embedding: &[T]) -> Result<Vec<T>> {
        self.forward_cached(features, embedding).map(|c| c.output)
    }

    pub fn forward_cached(&self, features: &Mat<T>, embedding: &[T]) -> Result<ForwardCache<T>> {
        self.check_inputs(features, embedding)?;
        let c = &self.config;

        let vision = features.matmul(&self.proj_vision);
        let (stage1, vision_attn) =
            attention_forward(&self.vision_attn, c.heads, &self.query_tokens, &vision);
        check(&stage1, "vision cross-attention")?;

        let emb = Mat::from_vec(1, c.d_text, embedding.to_vec());
        let text = emb.matmul(&self.proj_text);
        let (text_out, text_attn) = attention_forward(&self.text_attn, c.heads, &stage1, &text);
        let mut stage2 = stage1.clone();
        stage2.add_assign(&text_out);
        check(&stage2, "text cross-attention")?;

        let mut pooled = Mat::zeros(1, c.d_model);
        let inv_m = T::from_f64(1.0 / c.query_tokens as f64);
        for r in 0..stage2.rows {
            for (p, &x) in pooled.data.iter_mut().zip(stage2.row(r)) {
                *p += x * inv_m;
            }
        }

        let mut hidden_pre = pooled.matmul(&self.mlp_w1);
        hidden_pre.add_assign(&self.mlp_b1);
        let hidden = Mat::from_vec(1, c.hidden, hidden_pre.data.iter().map(|&x| gelu(x)).collect());
        let mut mlp_out = hidden.matmul(&self.mlp_w2);
        mlp_out.add_assign(&self.mlp_b2);
        check(&mlp_out, "mlp head")?;

        let n = T::from_f64(c.d_out as f64);
        let mean = mlp_out.data.iter().fold(T::zero(), |a, &x| a + x) / n;
        let var = mlp_out
            .data
            .iter()
            .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
            / n;
        let rstd = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
        let xhat: Vec<T> = mlp_out.data.iter().map(|&x| (x - mean) * rstd).collect();
        let ln_out: Vec<T> = xhat
            .iter()
            .zip(&self.ln_gamma.data)
            .zip(&self.ln_beta.data)
            .map(|((&x, &g), &b)| g * x + b)
            .collect();

        let norm = dot(&ln_out, &ln_out).sqrt();
        if !(norm.is_finite() && norm > T::zero()) {
            return Err(Error::NonFiniteStage("l2 normalization"));
        }
        let output: Vec<T> = ln_out.iter().map(|&x| x / norm).collect();

        Ok(ForwardCache {
            features: features.clone(),
            embedding: emb,
            vision,
            vision_attn,
            stage1,
            text,
            text_attn,
            pooled,
            hidden_pre,
            hidden,
            xhat,
            rstd,
            norm,
            output,
        })
    }

    /// Accumulate parameter gradients for upstream gradient `d_output`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: &[T], grads: &mut Self) {
        let c = &self.config;

        // y / ||y||
        let proj = dot(&cache.output, d_output);
        let d_ln: Vec<T> = d_output
            .iter()
            .zip(&cache.output)
            .map(|(&g, &o)| (g - o * proj) / cache.norm)
            .collect();

        // layer norm
        let n = T::from_f64(c.d_out as f64);
        let mut d_xhat = vec![T::zero(); c.d_out];
        for i in 0..c.d_out {
            grads.ln_gamma.data[i] += d_ln[i] * cache.xhat[i];
            grads.ln_beta.data[i] += d_ln[i];
            d_xhat[i] = d_ln[i] * self.ln_gamma.data[i];
        }
        let mean_dx = d_xhat.iter().fold(T::zero(), |a, &x| a + x) / n;
        let mean_dxx = d_xhat
            .iter()
            .zip(&cache.xhat)
            .fold(T::zero(), |a, (&d, &x)| a + d * x)
            / n;
        let d_mlp_out = Mat::from_vec(
            1,
            c.d_out,
            d_xhat
                .iter()
                .zip(&cache.xhat)
                .map(|(&d, &x)| cache.rstd * (d - mean_dx - x * mean_dxx))
                .collect(),
        );

        // MLP
        Mat::add_tn_matmul(&mut grads.mlp_w2, &cache.hidden, &d_mlp_out);
        grads.mlp_b2.add_assign(&d_mlp_out);
        let d_hidden = d_mlp_out.matmul_nt(&self.mlp_w2);
        let d_hidden_pre = Mat::from_vec(
            1,
            c.hidden,
            d_hidden
                .data
                .iter()
                .zip(&cache.hidden_pre.data)
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect(),
        );
        Mat::add_tn_matmul(&mut grads.mlp_w1, &cache.pooled, &d_hidden_pre);
        grads.mlp_b1.add_assign(&d_hidden_pre);
        let d_pooled = d_hidden_pre.matmul_nt(&self.mlp_w1);

        // mean pool over query tokens, residual around text attention
        let inv_m = T::from_f64(1.0 / c.query_tokens as f64);
        let mut d_stage2 = Mat::zeros(c.query_tokens, c.d_model);
        for r in 0..c.query_tokens {
            for (d, &p) in d_stage2.row_mut(r).iter_mut().zip(&d_pooled.data) {
                *d = p * inv_m;
            }
        }
        let (d_stage1_q, d_text) = attention_backward(
            &self.text_attn,
            &cache.text_attn,
            &cache.stage1,
            &cache.text,
            &d_stage2,
            &mut grads.text_attn,
        );
        let mut d_stage1 = d_stage2;
        d_stage1.add_assign(&d_stage1_q);
        Mat::add_tn_matmul(&mut grads.proj_text, &cache.embedding, &d_text);

        let (d_tokens, d_vision) = attention_backward(
            &self.vision_attn,
            &cache.vision_attn,
            &self.query_tokens,
            &cache.vision,
            &d_stage1,
            &mut grads.vision_attn,
        );
        grads.query_tokens.add_assign(&d_tokens);
        Mat::add_tn_matmul(&mut grads.proj_vision, &cache.features, &d_vision);
    }
}

/// f32 forward on stored features and a subquery embedding.
pub fn adapter_forward(
    params: &AdapterParams<f32>,
    features: &FeatureMatrix,
    embedding: &[f32],
) -> Result<Vec<f32>> {
    params.forward(&Mat::from_features(features), embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> AdapterConfig {
        AdapterConfig {
            d_vision: 32,
            d_text: 24,
            d_model: 32,
            heads: 2,
            query_tokens: 4,
            hidden: 48,
            d_out: 24,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::random_normal(rows, cols, 1.0, rng)
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn output_shape_and_norm() {
        let p = AdapterParams::<f64>::init(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let f = random_input(&mut rng, 16, 32);
            let t = unit(&mut rng, 24);
            let out = p.forward(&f, &t).unwrap();
            assert_eq!(out.len(), 24);
            assert!((dot(&out, &out).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn f32_output_is_unit_norm() {
        let p = AdapterParams::<f32>::init(small_config(), 3).unwrap();
        let f = FeatureMatrix::new(16, 32, (0..512).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let t: Vec<f32> = (0..24).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let out = adapter_forward(&p, &f, &t).unwrap();
        let norm: f32 = out.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn permuting_vision_tokens_leaves_output_unchanged() {
        let p = AdapterParams::<f64>::init(small_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_input(&mut rng, 16, 32);
        let t = unit(&mut rng, 24);
        let mut rows: Vec<usize> = (0..16).collect();
        rows.reverse();
        rows.swap(3, 9);
        let permuted = Mat::from_vec(16, 32, rows.iter().flat_map(|&r| f.row(r).to_vec()).collect());
        let a = p.forward(&f, &t).unwrap();
        let b = p.forward(&permuted, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = AdapterParams::<f64>::init(small_config(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cache = p
            .forward_cached(&random_input(&mut rng, 9, 32), &unit(&mut rng, 24))
            .unwrap();
        for attn in [&cache.vision_attn, &cache.text_attn] {
            for head in &attn.probs {
                for r in 0..head.rows {
                    let s: f64 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = AdapterParams::<f64>::init(small_config(), 1).unwrap();
        let t = vec![0.0; 24];
        assert!(matches!(p.forward(&Mat::zeros(4, 31), &t), Err(Error::Shape(_))));
        assert!(matches!(
            p.forward(&Mat::zeros(4, 32), &t[..20]),
            Err(Error::Shape(_))
        ));
        let mut bad = small_config();
        bad.heads = 5;
        assert!(AdapterParams::<f64>::init(bad, 0).is_err());
    }

    #[test]
    fn non_finite_reported_with_stage() {
        let mut p = AdapterParams::<f64>::init(small_config(), 1).unwrap();
        p.mlp_w2.data[0] = f64::INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = p
            .forward(&random_input(&mut rng, 4, 32), &unit(&mut rng, 24))
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteStage("mlp head")));
    }

    #[test]
    fn passthrough_returns_zero_mean_embedding() {
        let d = 8;
        let p = AdapterParams::<f64>::passthrough(d, 1.0).unwrap();
        let mut t: Vec<f64> = (0..d).map(|i| (i as f64 * 1.3).cos()).collect();
        let mean = t.iter().sum::<f64>() / d as f64;
        t.iter_mut().for_each(|x| *x -= mean);
        let n = dot(&t, &t).sqrt();
        t.iter_mut().for_each(|x| *x /= n);
        let out = p.forward(&Mat::zeros(3, d), &t).unwrap();
        for (a, b) in out.iter().zip(&t) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
