//! Latent-variable machinery: the discrete flow prior, Gumbel sampling,
//! Gaussian priors/posteriors and reparameterized sampling.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, CausalTransformer, UtteranceVectors};
use crate::config::ModelConfig;
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, softmax_last, tensor_from, Mlp, ParamStore};

/// Bound on |log σ²| applied through a scaled tanh.
pub const LOGVAR_BOUND: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub num_states: usize,
    pub state_embed_dim: usize,
    pub flow_layers: usize,
    pub flow_heads: usize,
}

impl FlowConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        FlowConfig {
            num_states: cfg.num_states,
            state_embed_dim: cfg.d,
            flow_layers: cfg.flow_layers,
            flow_heads: cfg.flow_heads,
        }
    }
}

/// A categorical distribution over N states, batched on leading dims.
#[derive(Debug, Clone)]
pub struct CategoricalParams {
    pub logits: Tensor,
    pub probs: Tensor,
    pub log_probs: Tensor,
}

impl CategoricalParams {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probs = softmax_last(&logits)?;
        let log_probs = log_softmax_last(&logits)?;
        Ok(CategoricalParams {
            logits,
            probs,
            log_probs,
        })
    }

    /// Builds from host probabilities; zeros give `-inf` log-probabilities.
    pub fn from_probs(probs: &[f64], shape: &[usize], dtype: DType) -> Result<Self> {
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let log_probs = tensor_from(logs, shape, dtype)?;
        let probs = tensor_from(probs.to_vec(), shape, dtype)?;
        Ok(CategoricalParams {
            logits: log_probs.clone(),
            probs,
            log_probs,
        })
    }
}

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, logvar: Tensor) -> Self {
        GaussianParams { mu, logvar }
    }

    /// Splits a `[..., 2 d_z]` head output into mean and bounded log-variance.
    pub fn from_head(raw: &Tensor) -> Result<Self> {
        let dz = raw.dim(D::Minus1)? / 2;
        let mu = raw.narrow(D::Minus1, 0, dz)?;
        let lv = raw.narrow(D::Minus1, dz, dz)?;
        let logvar = ((lv / LOGVAR_BOUND)?.tanh()? * LOGVAR_BOUND)?;
        Ok(GaussianParams { mu, logvar })
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    pub fn standard(shape: &[usize], dtype: DType) -> Result<Self> {
        Ok(GaussianParams {
            mu: Tensor::zeros(shape, dtype, &Device::Cpu)?,
            logvar: Tensor::zeros(shape, dtype, &Device::Cpu)?,
        })
    }
}

/// A point on the probability simplex (possibly hardened to a one-hot in the
/// forward pass) and the temperature that produced it.
#[derive(Debug, Clone)]
pub struct SoftOneHot {
    pub values: Tensor,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_init: f64,
    pub tau_min: f64,
    pub rate: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau_init: 1.0,
            tau_min: 0.5,
            rate: 4e-5,
        }
    }
}

/// τ(step) = max(τ_min, τ_init · exp(−rate · step)).
pub fn anneal_temperature(step: usize, schedule: &TemperatureSchedule) -> f64 {
    (schedule.tau_init * (-schedule.rate * step as f64).exp()).max(schedule.tau_min)
}

/// i.i.d. Gumbel(0, 1) noise.
pub fn gumbel_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// softmax((logits + g) / τ) with explicit noise. With `hard`, the forward
/// value is the argmax one-hot while gradients follow the soft sample.
pub fn gumbel_softmax_with_noise(logits: &Tensor, noise: &Tensor, tau: f64, hard: bool) -> Result<SoftOneHot> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let soft = softmax_last(&(logits.broadcast_add(noise)? / tau)?)?;
    let values = if hard {
        let hard = one_hot_argmax(&soft)?;
        (hard - soft.detach())?.add(&soft)?
    } else {
        soft
    };
    Ok(SoftOneHot { values, tau })
}

pub fn gumbel_sample(logits: &Tensor, tau: f64, hard: bool, rng: &mut ChaCha8Rng) -> Result<SoftOneHot> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let noise = tensor_from(gumbel_noise(logits.elem_count(), rng), logits.dims(), logits.dtype())?;
    gumbel_softmax_with_noise(logits, &noise, tau, hard)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One-hot of the last-dim argmax (lowest index on ties), no gradient.
pub fn one_hot_argmax(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(D::Minus1)?;
    let host = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = vec![0.0; host.len()];
    for (row, chunk) in host.chunks(n).enumerate() {
        out[row * n + argmax(chunk)] = 1.0;
    }
    tensor_from(out, x.dims(), x.dtype())
}

pub fn one_hot(indices: &[usize], n: usize, dtype: DType) -> Result<Tensor> {
    let mut out = vec![0.0; indices.len() * n];
    for (row, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(Error::StateRange {
                index: i,
                num_states: n,
            });
        }
        out[row * n + i] = 1.0;
    }
    tensor_from(out, &[indices.len(), n], dtype)
}

/// z = μ + σ ⊙ ε with caller-supplied ε.
pub fn reparameterize_with(params: &GaussianParams, eps: &Tensor) -> Result<Tensor> {
    Ok(params.mu.add(&params.sigma()?.mul(eps)?)?)
}

pub fn standard_normal(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    tensor_from(values, shape, dtype)
}

pub fn reparameterize(params: &GaussianParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = standard_normal(params.mu.dims(), params.mu.dtype(), rng)?;
    reparameterize_with(params, &eps)
}

/// p(z^S) = N(0, I).
pub fn prior_z_s(batch: usize, d_z: usize, dtype: DType) -> Result<GaussianParams> {
    GaussianParams::standard(&[batch, d_z], dtype)
}

/// e(c) as a soft mixture of embedding rows: `c_soft @ table`.
pub fn state_embedding(c_soft: &Tensor, table: &Tensor) -> Result<Tensor> {
    Ok(c_soft.broadcast_matmul(table)?)
}

/// Context-free prior over the next state given previous states.
#[derive(Debug, Clone)]
pub struct FlowPrior {
    pub cfg: FlowConfig,
    /// Input embedding of states for the flow transformer.
    pub input_embed: Tensor,
    /// Learned representation standing in for the empty prefix.
    pub start: Tensor,
    pub trans: CausalTransformer,
    pub mlp: Mlp,
}

impl FlowPrior {
    pub fn new(ps: &mut ParamStore, cfg: &FlowConfig, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.state_embed_dim;
        Ok(FlowPrior {
            cfg: cfg.clone(),
            input_embed: ps.normal("flow.trans.state_embed", &[cfg.num_states, d], 0.02, rng)?,
            start: ps.normal("flow.trans.start", &[d], 0.02, rng)?,
            trans: CausalTransformer::new(
                ps,
                "flow.trans",
                cfg.flow_layers,
                cfg.flow_heads,
                d,
                4 * d,
                max_len,
                0.0,
                rng,
            )?,
            mlp: Mlp::new(ps, "flow.mlp", [d, cfg.num_states, cfg.num_states], rng)?,
        })
    }

    /// `prev: [batch, t-1, N]` states for c_1..c_{t-1}; returns p(c_τ | c_<τ)
    /// for τ = 1..t as `[batch, t, N]`.
    pub fn forward(&self, prev: &Tensor) -> Result<CategoricalParams> {
        let (b, tm1, n) = prev.dims3()?;
        if n != self.cfg.num_states {
            return Err(Error::Shape(format!("expected {} states, got {n}", self.cfg.num_states)));
        }
        let d = self.cfg.state_embed_dim;
        let start = self.start.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let x = if tm1 == 0 {
            start.contiguous()?
        } else {
            Tensor::cat(&[&start, &state_embedding(prev, &self.input_embed)?], 1)?
        };
        let h = self.trans.forward(&x, None)?;
        CategoricalParams::from_logits(self.mlp.forward(&h)?)
    }

    /// Prior for every position given hard state sequences.
    pub fn forward_indices(&self, prev: &[Vec<usize>]) -> Result<CategoricalParams> {
        let n = self.cfg.num_states;
        let tm1 = prev.first().map(Vec::len).unwrap_or(0);
        if prev.iter().any(|p| p.len() != tm1) {
            return Err(Error::Shape("state prefixes must share a length".into()));
        }
        let flat: Vec<usize> = prev.iter().flatten().copied().collect();
        let dtype = self.start.dtype();
        let oh = if flat.is_empty() {
            Tensor::zeros((prev.len(), 0, n), dtype, &Device::Cpu)?
        } else {
            one_hot(&flat, n, dtype)?.reshape((prev.len(), tm1, n))?
        };
        self.forward(&oh)
    }
}

/// f_I-mlp over [h_{t-1}; e(c_t)].
#[derive(Debug, Clone)]
pub struct PriorZi {
    mlp: Mlp,
}

impl PriorZi {
    pub fn new(ps: &mut ParamStore, d: usize, d_z: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(PriorZi {
            mlp: Mlp::new(ps, "prior_zi", [2 * d, d, 2 * d_z], rng)?,
        })
    }

    pub fn forward(&self, h_prev: &Tensor, e_c: &Tensor) -> Result<GaussianParams> {
        let x = Tensor::cat(&[h_prev, e_c], D::Minus1)?;
        GaussianParams::from_head(&self.mlp.forward(&x)?)
    }
}

/// Independently parameterized half-depth token encoder producing h^φ_t.
#[derive(Debug, Clone)]
pub struct InferenceEncoder {
    pub encoder: Backbone,
}

impl InferenceEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(InferenceEncoder {
            encoder: Backbone::new(ps, "infer", cfg, rng)?,
        })
    }

    pub fn encode(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<UtteranceVectors> {
        let hidden = self.encoder.encode(batch, rng)?;
        self.encoder.pool(&hidden, batch)
    }
}

/// Posterior heads f'_S, f'_I and f'_c.
#[derive(Debug, Clone)]
pub struct PosteriorHeads {
    zs: Mlp,
    zi: Mlp,
    c: Mlp,
}

impl PosteriorHeads {
    pub fn new(ps: &mut ParamStore, d: usize, d_z: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(PosteriorHeads {
            zs: Mlp::new(ps, "post.zs", [d, d, 2 * d_z], rng)?,
            zi: Mlp::new(ps, "post.zi", [d, d, 2 * d_z], rng)?,
            c: Mlp::new(ps, "post.c", [d, n, n], rng)?,
        })
    }

    /// q(z^S|X) from the mean of the real utterance vectors.
    /// `h_phi: [batch, n, d]`, `umask: [batch, n]` with 1 for real utterances.
    pub fn z_s(&self, h_phi: &Tensor, umask: &Tensor) -> Result<GaussianParams> {
        let mean = masked_mean(h_phi, umask)?;
        self.z_s_from_mean(&mean)
    }

    pub fn z_s_from_mean(&self, mean: &Tensor) -> Result<GaussianParams> {
        GaussianParams::from_head(&self.zs.forward(mean)?)
    }

    pub fn z_i(&self, h_phi: &Tensor) -> Result<GaussianParams> {
        GaussianParams::from_head(&self.zi.forward(h_phi)?)
    }

    pub fn c(&self, h_phi: &Tensor) -> Result<CategoricalParams> {
        CategoricalParams::from_logits(self.c.forward(h_phi)?)
    }
}

/// Mean over dim 1 restricted to `mask == 1`: `[b, n, d], [b, n] -> [b, d]`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(D::Minus1)?;
    let total = x.broadcast_mul(&m)?.sum(1)?;
    let count = m.sum(1)?;
    Ok(total.broadcast_div(&count)?)
}
