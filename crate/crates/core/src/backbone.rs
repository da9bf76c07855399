//! Causal transformer encoder, attentive pooling and the vocabulary head.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::nn::{dropout, softmax_last, tensor_from, LayerNorm, Linear, ParamStore, MASK_NEG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        BackboneConfig {
            layers: cfg.layers,
            heads: cfg.heads,
            d: cfg.d,
            ffn: cfg.ffn,
            vocab_size: cfg.vocab_size,
            max_positions: cfg.max_positions,
            dropout: cfg.dropout,
        }
    }

    /// Same widths, half the depth (at least one layer).
    pub fn half(&self) -> Self {
        BackboneConfig {
            layers: (self.layers / 2).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(mask)?;
        let att = softmax_last(&scores)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc: Linear,
    proj: Linear,
}

/// Pre-norm stack of causal self-attention blocks with learned absolute
/// positions. Takes input embeddings, not token ids.
#[derive(Debug, Clone)]
pub struct CausalTransformer {
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    max_positions: usize,
    dropout: f64,
}

impl CausalTransformer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        layers: usize,
        heads: usize,
        d: usize,
        ffn: usize,
        max_positions: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pos = ps.normal(&format!("{name}.pos"), &[max_positions, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{name}.blocks.{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(ps, &format!("{p}.ln1"), d)?,
                attn: Attention {
                    qkv: Linear::new(ps, &format!("{p}.attn.qkv"), d, 3 * d, true, rng)?,
                    out: Linear::new(ps, &format!("{p}.attn.out"), d, d, true, rng)?,
                    heads,
                },
                ln2: LayerNorm::new(ps, &format!("{p}.ln2"), d)?,
                fc: Linear::new(ps, &format!("{p}.mlp.fc"), d, ffn, true, rng)?,
                proj: Linear::new(ps, &format!("{p}.mlp.proj"), ffn, d, true, rng)?,
            });
        }
        Ok(CausalTransformer {
            pos,
            blocks,
            ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), d)?,
            max_positions,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        if l > self.max_positions {
            return Err(Error::Length {
                len: l,
                max: self.max_positions,
            });
        }
        let mask = causal_mask(l, x.dtype())?;
        let mut h = x.broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        h = dropout(&h, self.dropout, rng.as_deref_mut())?;
        for block in &self.blocks {
            let a = block.attn.forward(&block.ln1.forward(&h)?, &mask)?;
            h = (h + dropout(&a, self.dropout, rng.as_deref_mut())?)?;
            let m = block.proj.forward(&block.fc.forward(&block.ln2.forward(&h)?)?.gelu()?)?;
            h = (h + dropout(&m, self.dropout, rng.as_deref_mut())?)?;
        }
        self.ln_f.forward(&h)
    }
}

/// `[l, l]` additive mask: 0 on and below the diagonal, large negative above.
pub fn causal_mask(l: usize, dtype: DType) -> Result<Tensor> {
    let values = (0..l * l)
        .map(|k| if k % l > k / l { MASK_NEG } else { 0.0 })
        .collect();
    tensor_from(values, &[l, l], dtype)
}

/// Utterance vectors plus the pooling weights that produced them.
#[derive(Debug, Clone)]
pub struct UtteranceVectors {
    /// `[batch, n_max, d]`; rows past a session's utterance count are filler.
    pub vectors: Tensor,
    /// `[batch, n_max, len]`, zero outside each span.
    pub weights: Tensor,
}

/// h_t = Σ_i α_{t,i} h_{t,i}, α = softmax of q·h_{t,i} restricted to span t.
/// Padded utterance slots pool position 0 so every row stays finite.
pub fn attentive_pool(hidden: &Tensor, spans: &[Vec<(usize, usize)>], query: &Tensor) -> Result<UtteranceVectors> {
    let (b, l, d) = hidden.dims3()?;
    if spans.len() != b {
        return Err(Error::Span(format!("{} span lists for batch of {b}", spans.len())));
    }
    let n_max = spans.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut mask = vec![MASK_NEG; b * n_max * l];
    for (row, row_spans) in spans.iter().enumerate() {
        for t in 0..n_max {
            let base = (row * n_max + t) * l;
            match row_spans.get(t) {
                Some(&(start, end)) => {
                    if start >= end {
                        return Err(Error::Span(format!("empty span ({start}, {end}) in row {row}")));
                    }
                    if end > l {
                        return Err(Error::Span(format!("span ({start}, {end}) exceeds length {l}")));
                    }
                    mask[base + start..base + end].fill(0.0);
                }
                None => mask[base] = 0.0,
            }
        }
    }
    let mask = tensor_from(mask, &[b, n_max, l], hidden.dtype())?;
    let scores = hidden.broadcast_matmul(&query.reshape((d, 1))?)?.reshape((b, 1, l))?;
    let weights = softmax_last(&scores.broadcast_add(&mask)?)?;
    let vectors = weights.matmul(hidden)?;
    Ok(UtteranceVectors { vectors, weights })
}

/// p_{t,i} = W_v h_{t,i}, no bias. `w_v: [V, d]`.
pub fn lm_logits(hidden: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    Ok(hidden.broadcast_matmul(&w_v.t()?)?)
}

/// Token-level encoder: embeddings, causal transformer and an attentive
/// pooling query. Used for the generation-side backbone and, at half depth,
/// for the inference encoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    /// `[V, d]`, shared with the output head.
    pub embed: Tensor,
    pub body: CausalTransformer,
    pub query: Tensor,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = ps.normal(&format!("{name}.embed"), &[cfg.vocab_size, cfg.d], 0.02, rng)?;
        let body = CausalTransformer::new(
            ps,
            &format!("{name}.body"),
            cfg.layers,
            cfg.heads,
            cfg.d,
            cfg.ffn,
            cfg.max_positions,
            cfg.dropout,
            rng,
        )?;
        let query = ps.normal(&format!("{name}.query"), &[cfg.d], 0.02, rng)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            embed,
            body,
            query,
        })
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if batch.max_len > self.cfg.max_positions {
            return Err(Error::Length {
                len: batch.max_len,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::Vocab {
                id: bad,
                size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    pub fn ids_tensor(batch: &Batch) -> Result<Tensor> {
        Ok(Tensor::from_vec(batch.ids.clone(), (batch.batch, batch.max_len), &Device::Cpu)?)
    }

    /// Hidden states `[batch, len, d]`. `rng` enables dropout (training mode).
    pub fn encode(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.check(batch)?;
        let ids = Self::ids_tensor(batch)?;
        self.encode_ids(&ids, rng)
    }

    pub fn encode_ids(&self, ids: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let x = self
            .embed
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, self.cfg.d))?;
        self.body.forward(&x, rng)
    }

    pub fn pool(&self, hidden: &Tensor, batch: &Batch) -> Result<UtteranceVectors> {
        attentive_pool(hidden, &batch.spans, &self.query)
    }

    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        lm_logits(hidden, &self.embed)
    }
}

/// Gathers `[batch, len, d]` rows into `[batch, len', d]` at the last
/// dimension index; convenience for decoding.
pub fn last_position(hidden: &Tensor) -> Result<Tensor> {
    let l = hidden.dim(1)?;
    Ok(hidden.narrow(1, l - 1, 1)?.squeeze(1)?)
}

pub fn sum_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?)
}
