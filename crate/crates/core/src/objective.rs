//! The variational objective and the three disentanglement terms.
//!
//! Sign convention, used everywhere in this crate: every term is stored as the
//! quantity that is *maximized*. `reconstruction`, `l_hid`, `l_dir` and
//! `l_mim` enter the objective with a plus sign, the KL terms with a minus
//! sign:
//!
//! ```text
//! L = (reconstruction - kl_c - kl_zI - kl_zS) + α (l_hid + l_dir + l_mim)
//! ```
//!
//! The optimizer minimizes `-L`, which is what [`LossBreakdown::total`] holds.

use std::f64::consts::PI;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{CategoricalParams, GaussianParams};
use crate::nn::{log_softmax_last, logsumexp_last, to_vec};

/// Per-batch means of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_c: f64,
    #[serde(rename = "kl_zI")]
    pub kl_zi: f64,
    #[serde(rename = "kl_zS")]
    pub kl_zs: f64,
    pub l_hid: f64,
    pub l_dir: f64,
    pub l_mim: f64,
    /// `-L`, the minimized quantity.
    pub total: f64,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        elbo(self.reconstruction, self.kl_c, self.kl_zi, self.kl_zs)
    }

    /// Fills `total` from the other fields.
    pub fn finish(mut self, alpha: f64) -> Self {
        self.total = -total_loss(&self, alpha);
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.reconstruction,
            self.kl_c,
            self.kl_zi,
            self.kl_zs,
            self.l_hid,
            self.l_dir,
            self.l_mim,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// ELBO = recon − KL_c − KL_zI − KL_zS.
pub fn elbo(recon: f64, kl_c: f64, kl_zi: f64, kl_zs: f64) -> f64 {
    recon - kl_c - kl_zi - kl_zs
}

/// L = ELBO + α (L_HID + L_DIR + L_MIM), the maximized objective.
pub fn total_loss(b: &LossBreakdown, alpha: f64) -> f64 {
    b.elbo() + alpha * (b.l_hid + b.l_dir + b.l_mim)
}

/// Closed-form KL between diagonal Gaussians, summed over the last dim.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    let var_q = q.logvar.exp()?;
    let var_p = p.logvar.exp()?;
    let diff = q.mu.broadcast_sub(&p.mu)?.sqr()?;
    let ratio = var_q.broadcast_add(&diff)?.broadcast_div(&var_p)?;
    let terms = ((p.logvar.broadcast_sub(&q.logvar)? + ratio)? - 1.0)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?)
}

/// KL(q‖p) between categoricals over the last dim, with 0·log(0/·) = 0.
/// A zero in `p` where `q > 0` yields +∞.
pub fn kl_categorical(q: &CategoricalParams, p: &CategoricalParams) -> Result<Tensor> {
    let support = q.probs.gt(0.0)?;
    let terms = q.probs.mul(&(q.log_probs.sub(&p.log_probs))?)?;
    let zeros = terms.zeros_like()?;
    Ok(support.where_cond(&terms, &zeros)?.sum(D::Minus1)?)
}

/// Host version of [`kl_categorical`].
pub fn kl_categorical_values(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| {
            if qi == 0.0 {
                0.0
            } else if pi == 0.0 {
                f64::INFINITY
            } else {
                qi * (qi.ln() - pi.ln())
            }
        })
        .sum()
}

/// Summed next-token log-likelihood per session: `logits [b, len, V]`,
/// `targets [b, len]` (u32), `mask [b, len]` with 1 where a target exists.
pub fn reconstruction_term(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, l, _) = logits.dims3()?;
    if targets.dims() != [b, l] || mask.dims() != [b, l] {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?} / mask {:?}",
            logits.dims(),
            targets.dims(),
            mask.dims()
        )));
    }
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    Ok(picked.mul(mask)?.sum(D::Minus1)?)
}

/// Cosine similarity over the last dim; errors if any vector has zero norm.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    if to_vec(&na)?.iter().chain(to_vec(&nb)?.iter()).any(|&n| n == 0.0) {
        return Err(Error::UndefinedCosine);
    }
    Ok(a.mul(b)?.sum(D::Minus1)?.div(&na.mul(&nb)?)?)
}

/// L_HID per row: log e^{s⁺} / (e^{s⁺} + e^{s⁻}) with cosine similarities.
pub fn loss_hid(z: &Tensor, z_shuf: &Tensor, z_neg: &Tensor) -> Result<Tensor> {
    let pos = cosine(z, z_shuf)?;
    let neg = cosine(z, z_neg)?;
    let both = Tensor::stack(&[&pos, &neg], D::Minus1)?;
    Ok(pos.sub(&logsumexp_last(&both)?)?)
}

/// L_DIR per session: Σ_t Σ_i δ_{t,i} log softmax(W_verb z^I_t)[w_{t,i}].
/// `z_i: [b, n, d_z]`, `counts: [b, n, V_verb]` holds how often each verb
/// class occurs in utterance t, `w_verb: [V_verb, d_z]`.
pub fn loss_dir(z_i: &Tensor, counts: &Tensor, w_verb: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(&z_i.broadcast_matmul(&w_verb.t()?)?)?;
    Ok(logp.mul(counts)?.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// `[B, B]` matrix of log q(z_i | u_j) for diagonal Gaussians:
/// row i is the sample, column j the conditioning data point.
pub fn log_density_matrix(z: &Tensor, q: &GaussianParams) -> Result<Tensor> {
    let (b, dz) = z.dims2()?;
    let zi = z.reshape((b, 1, dz))?;
    let mu = q.mu.reshape((1, b, dz))?;
    let lv = q.logvar.reshape((1, b, dz))?;
    let sq = zi.broadcast_sub(&mu)?.sqr()?.broadcast_div(&lv.exp()?)?;
    let terms = (sq.broadcast_add(&lv)? + (2.0 * PI).ln())?;
    Ok((terms.sum(D::Minus1)? * -0.5)?)
}

/// Pairwise log-densities for one minibatch.
#[derive(Debug, Clone)]
pub struct MimBatchStats {
    pub log_q_s: Tensor,
    pub log_q_i: Tensor,
    pub log_q_joint: Tensor,
    pub data_size: usize,
}

impl MimBatchStats {
    /// Joint densities factorize under the mean-field posterior.
    pub fn new(log_q_s: Tensor, log_q_i: Tensor, data_size: usize) -> Result<Self> {
        let log_q_joint = log_q_s.add(&log_q_i)?;
        Ok(MimBatchStats {
            log_q_s,
            log_q_i,
            log_q_joint,
            data_size,
        })
    }
}

/// Minibatch-weighted sampling estimate
/// H ≈ −(1/B) Σ_i [ log (1/(M B)) Σ_j q(z(u_i) | u_j) ] from `log_q [B, B]`.
pub fn entropy_estimate(log_q: &Tensor, data_size: usize) -> Result<Tensor> {
    let (b, b2) = log_q.dims2()?;
    if b == 0 || b != b2 {
        return Err(Error::Shape(format!("log-density matrix must be square and non-empty, got {:?}", log_q.dims())));
    }
    if data_size < b {
        return Err(Error::Domain(format!("data size {data_size} smaller than batch {b}")));
    }
    if to_vec(log_q)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite log-density in entropy estimate".into()));
    }
    let log_norm = ((data_size * b) as f64).ln();
    let lse = logsumexp_last(log_q)?;
    Ok(((lse - log_norm)?.mean_all()? * -1.0)?)
}

/// Estimated I(z^S; z^I_t) = H(z^S) + H(z^I_t) − H(z^S, z^I_t).
pub fn mutual_information(stats: &MimBatchStats) -> Result<Tensor> {
    let hs = entropy_estimate(&stats.log_q_s, stats.data_size)?;
    let hi = entropy_estimate(&stats.log_q_i, stats.data_size)?;
    let hj = entropy_estimate(&stats.log_q_joint, stats.data_size)?;
    Ok(hs.add(&hi)?.sub(&hj)?)
}

/// L_MIM = −Σ_t I(z^S; z^I_t), one stats entry per utterance position.
pub fn loss_mim(per_turn: &[MimBatchStats], dtype: DType) -> Result<Tensor> {
    let mut acc = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
    for stats in per_turn {
        acc = acc.sub(&mutual_information(stats)?)?;
    }
    Ok(acc)
}
