//! The full latent-structure dialogue model: wiring of backbone, inference
//! encoder, flow prior, Gaussian latents and every objective term.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{ModelConfig, Variant};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::latent::{
    argmax, gumbel_sample, prior_z_s, reparameterize, state_embedding, CategoricalParams, FlowConfig,
    FlowPrior, GaussianParams, InferenceEncoder, PosteriorHeads, PriorZi, SoftOneHot,
};
use crate::nn::{tensor_from, to_scalar, to_vec, ParamStore};
use crate::objective::{
    kl_categorical, kl_gaussian, log_density_matrix, loss_dir, loss_hid, loss_mim, reconstruction_term,
    LossBreakdown, MimBatchStats,
};

/// Top-level parameter groups.
pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_INFER: &str = "infer";
pub const GROUP_POSTERIOR: &str = "post";
pub const GROUP_FLOW_TRANS: &str = "flow.trans";
pub const GROUP_FLOW_MLP: &str = "flow.mlp";
pub const GROUP_PRIOR_ZI: &str = "prior_zi";
pub const GROUP_STATE_EMBED: &str = "latent.state_embed";
pub const GROUP_H0: &str = "latent.h0";
pub const GROUP_W_I: &str = "dec.w_i";
pub const GROUP_W_S: &str = "dec.w_s";
pub const GROUP_W_VERB: &str = "dir.w_verb";

pub const PARAM_GROUPS: [&str; 11] = [
    GROUP_BACKBONE,
    GROUP_INFER,
    GROUP_POSTERIOR,
    GROUP_FLOW_TRANS,
    GROUP_FLOW_MLP,
    GROUP_PRIOR_ZI,
    GROUP_STATE_EMBED,
    GROUP_H0,
    GROUP_W_I,
    GROUP_W_S,
    GROUP_W_VERB,
];

/// The groups frozen by the transfer protocol.
pub const FLOW_GROUPS: [&str; 2] = [GROUP_FLOW_TRANS, GROUP_FLOW_MLP];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub variant: Variant,
    pub tau: f64,
    /// Multiplier on the three KL terms in the trained loss (warm-up).
    pub kl_weight: f64,
    pub alpha: f64,
    /// Training-set size M for the entropy estimator.
    pub data_size: usize,
    /// Enables dropout.
    pub train: bool,
}

impl ForwardOptions {
    pub fn eval(variant: Variant, data_size: usize, alpha: f64) -> Self {
        ForwardOptions {
            variant,
            tau: 1.0,
            kl_weight: 1.0,
            alpha,
            data_size,
            train: false,
        }
    }
}

/// A batch plus the shuffled and negative companions used by L_HID.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Batch,
    pub shuf: Option<Batch>,
    pub neg: Option<Batch>,
}

/// Every latent quantity of a forward pass, shaped `[batch, n_max, ...]`.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub prior_c: Option<CategoricalParams>,
    pub post_c: Option<CategoricalParams>,
    pub c_sample: Option<SoftOneHot>,
    pub prior_zi: Option<GaussianParams>,
    pub post_zi: Option<GaussianParams>,
    pub zi_sample: Option<Tensor>,
    pub post_zs: Option<GaussianParams>,
    pub zs_sample: Option<Tensor>,
    pub num_utterances: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// The minimized training loss, KL terms weighted by `kl_weight`.
    pub loss: Tensor,
    /// The maximized objective L with unit KL weights.
    pub objective: Tensor,
    pub breakdown: LossBreakdown,
    pub bundle: LatentBundle,
}

/// Host-side index tensors derived from a batch.
struct Layout {
    umask: Tensor,
    targets: Tensor,
    target_mask: Tensor,
    /// `[b, len, n_max]`: position p predicts a token of utterance t.
    pos_to_utt: Tensor,
    n_max: usize,
}

impl Layout {
    fn new(batch: &Batch, dtype: DType) -> Result<Self> {
        let (b, l) = (batch.batch, batch.max_len);
        let n_max = batch.max_utterances().max(1);
        let mut umask = vec![0.0; b * n_max];
        let mut targets = vec![0u32; b * l];
        let mut tmask = vec![0.0; b * l];
        let mut p2u = vec![0.0; b * l * n_max];
        for row in 0..b {
            for t in 0..batch.num_utterances(row) {
                umask[row * n_max + t] = 1.0;
                let (start, end) = batch.spans[row][t];
                for pos in start..end {
                    let p = pos - 1;
                    targets[row * l + p] = batch.ids[row * l + pos];
                    tmask[row * l + p] = 1.0;
                    p2u[(row * l + p) * n_max + t] = 1.0;
                }
            }
        }
        Ok(Layout {
            umask: tensor_from(umask, &[b, n_max], dtype)?,
            targets: Tensor::from_vec(targets, (b, l), &Device::Cpu)?,
            target_mask: tensor_from(tmask, &[b, l], dtype)?,
            pos_to_utt: tensor_from(p2u, &[b, l, n_max], dtype)?,
            n_max,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DialogueModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub verb_classes: usize,
    pub backbone: Backbone,
    pub infer: InferenceEncoder,
    pub post: PosteriorHeads,
    pub flow: FlowPrior,
    pub prior_zi: PriorZi,
    /// e(·) feeding the z^I prior, `[N, d]`.
    pub state_embed: Tensor,
    /// Stand-in for h_{t-1} at t = 1.
    pub h0: Tensor,
    /// `[d, d_z]` projections of z^I and z^S into hidden space.
    pub w_i: Tensor,
    pub w_s: Tensor,
    /// `[V_verb, d_z]`.
    pub w_verb: Tensor,
}

impl DialogueModel {
    pub fn new(cfg: &ModelConfig, verb_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size <= crate::corpus::NUM_RESERVED {
            return Err(Error::Config("model.vocab_size must be set from the vocabulary".into()));
        }
        if verb_classes == 0 {
            return Err(Error::Config("verb vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(cfg.precision.dtype());
        let d = cfg.d;
        let dz = cfg.latent_dim();
        let n = cfg.num_states;
        let bcfg = BackboneConfig::from_model(cfg);
        let icfg = BackboneConfig {
            layers: cfg.inference_layers(),
            ..bcfg.clone()
        };
        let backbone = Backbone::new(&mut ps, GROUP_BACKBONE, &bcfg, &mut rng)?;
        let infer = InferenceEncoder::new(&mut ps, &icfg, &mut rng)?;
        let post = PosteriorHeads::new(&mut ps, d, dz, n, &mut rng)?;
        let flow = FlowPrior::new(&mut ps, &FlowConfig::from_model(cfg), cfg.max_utterances().max(2) + 1, &mut rng)?;
        let prior_zi = PriorZi::new(&mut ps, d, dz, &mut rng)?;
        let state_embed = ps.normal(GROUP_STATE_EMBED, &[n, d], 1.0, &mut rng)?;
        let h0 = ps.normal(GROUP_H0, &[d], 0.02, &mut rng)?;
        let w_i = ps.normal(GROUP_W_I, &[d, dz], 1.0 / (dz as f64).sqrt(), &mut rng)?;
        let w_s = ps.normal(GROUP_W_S, &[d, dz], 1.0 / (dz as f64).sqrt(), &mut rng)?;
        let w_verb = ps.normal(GROUP_W_VERB, &[verb_classes, dz], 1.0 / (dz as f64).sqrt(), &mut rng)?;
        Ok(DialogueModel {
            cfg: cfg.clone(),
            params: ps,
            verb_classes,
            backbone,
            infer,
            post,
            flow,
            prior_zi,
            state_embed,
            h0,
            w_i,
            w_s,
            w_verb,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn check_turns(&self, batch: &Batch) -> Result<()> {
        let max = self.cfg.max_utterances().max(2);
        if batch.max_utterances() > max {
            return Err(Error::Shape(format!(
                "batch has {} utterances per session, window allows {max}",
                batch.max_utterances()
            )));
        }
        Ok(())
    }

    /// `[b, n, d]` sequence of h_{t-1}: h0 followed by the first n-1 pooled
    /// utterance vectors.
    fn previous_vectors(&self, h: &Tensor) -> Result<Tensor> {
        let (b, n, d) = h.dims3()?;
        let h0 = self.h0.reshape((1, 1, d))?.broadcast_as((b, 1, d))?.contiguous()?;
        if n == 1 {
            return Ok(h0);
        }
        Ok(Tensor::cat(&[&h0, &h.narrow(1, 0, n - 1)?], 1)?)
    }

    /// Verb-class counts per utterance, `[b, n_max, V_verb]`.
    fn verb_counts(&self, batch: &Batch, n_max: usize) -> Result<Tensor> {
        let vv = self.verb_classes;
        let mut counts = vec![0.0; batch.batch * n_max * vv];
        for row in 0..batch.batch {
            for (t, &(start, end)) in batch.spans[row].iter().enumerate() {
                for pos in start..end {
                    let idx = row * batch.max_len + pos;
                    if batch.verb_mask[idx] == 1 {
                        let class = batch.verb_class[idx] as usize;
                        if class >= vv {
                            return Err(Error::Shape(format!("verb class {class} >= {vv}")));
                        }
                        counts[(row * n_max + t) * vv + class] += 1.0;
                    }
                }
            }
        }
        tensor_from(counts, &[batch.batch, n_max, vv], self.dtype())
    }

    /// Posterior q(z^S | X) for a batch through the inference encoder.
    pub fn posterior_zs(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<GaussianParams> {
        let hphi = self.infer.encode(batch, rng)?;
        let layout = Layout::new(batch, self.dtype())?;
        self.post.z_s(&hphi.vectors, &layout.umask)
    }

    /// Posterior state probabilities per real utterance.
    pub fn posterior_states(&self, batch: &Batch) -> Result<Vec<Vec<Vec<f64>>>> {
        let hphi = self.infer.encode(batch, None)?;
        let q = self.post.c(&hphi.vectors)?;
        let n_max = hphi.vectors.dim(1)?;
        let n = self.cfg.num_states;
        let probs = to_vec(&q.probs)?;
        Ok((0..batch.batch)
            .map(|row| {
                (0..batch.num_utterances(row))
                    .map(|t| probs[(row * n_max + t) * n..(row * n_max + t + 1) * n].to_vec())
                    .collect()
            })
            .collect())
    }

    /// Runs the full objective on a training batch.
    pub fn forward(&self, tb: &TrainBatch, opts: &ForwardOptions, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        let batch = &tb.x;
        self.check_turns(batch)?;
        let v = opts.variant;
        let dtype = self.dtype();
        let layout = Layout::new(batch, dtype)?;
        let (b, n_max) = (batch.batch, layout.n_max);
        let dz = self.cfg.latent_dim();
        let d = self.cfg.d;
        let zero_b = Tensor::zeros(b, dtype, &Device::Cpu)?;
        let mut dropout_rng = if opts.train {
            Some(ChaCha8Rng::seed_from_u64(rand::Rng::random(rng)))
        } else {
            None
        };

        let hidden = self.backbone.encode(batch, dropout_rng.as_mut())?;
        let pooled = self.backbone.pool(&hidden, batch)?;
        let hphi = self.infer.encode(batch, dropout_rng.as_mut())?.vectors;

        // Discrete flow: posterior, relaxed sample, context-free prior.
        let (prior_c, post_c, c_sample, kl_c) = if v.uses_c() {
            let q = self.post.c(&hphi)?;
            let sample = gumbel_sample(&q.logits, opts.tau, self.cfg.straight_through, rng)?;
            let prev = if n_max > 1 {
                sample.values.narrow(1, 0, n_max - 1)?
            } else {
                Tensor::zeros((b, 0, self.cfg.num_states), dtype, &Device::Cpu)?
            };
            let p = self.flow.forward(&prev)?;
            let kl = kl_categorical(&q, &p)?.mul(&layout.umask)?.sum(D::Minus1)?;
            (Some(p), Some(q), Some(sample), kl)
        } else {
            (None, None, None, zero_b.clone())
        };

        // z^I: prior from (h_{t-1}, e(c_t)), mean-field posterior per turn.
        let (prior_zi, post_zi, zi_sample, kl_zi) = if v.uses_zi() {
            let h_prev = self.previous_vectors(&pooled.vectors)?;
            let q = self.post.z_i(&hphi)?;
            let z = reparameterize(&q, rng)?;
            let (p, kl) = match (&c_sample, &post_c) {
                (Some(cs), Some(qc)) if self.cfg.exact_zi_kl => {
                    let p = self.prior_zi.forward(&h_prev, &state_embedding(&cs.values, &self.state_embed)?)?;
                    let kl = self.expected_zi_kl(&h_prev, &q, qc)?;
                    (p, kl)
                }
                _ => {
                    let e_c = match &c_sample {
                        Some(cs) => state_embedding(&cs.values, &self.state_embed)?,
                        None => Tensor::zeros((b, n_max, d), dtype, &Device::Cpu)?,
                    };
                    let p = self.prior_zi.forward(&h_prev, &e_c)?;
                    let kl = kl_gaussian(&q, &p)?;
                    (p, kl)
                }
            };
            let kl = kl.mul(&layout.umask)?.sum(D::Minus1)?;
            (Some(p), Some(q), Some(z), kl)
        } else {
            (None, None, None, zero_b.clone())
        };

        // z^S: session-level posterior from the mean utterance vector.
        let (post_zs, zs_sample, kl_zs) = if v.uses_zs() {
            let q = self.post.z_s(&hphi, &layout.umask)?;
            let z = reparameterize(&q, rng)?;
            let kl = kl_gaussian(&q, &prior_z_s(b, dz, dtype)?)?;
            (Some(q), Some(z), kl)
        } else {
            (None, None, zero_b.clone())
        };

        // Reconstruction with latent-shifted logits.
        let mut offset = self.latent_offset(zi_sample.as_ref(), zs_sample.as_ref(), b, n_max)?;
        // Without z^I the state embedding enters the logits directly.
        if let (false, Some(cs)) = (v.uses_zi(), &c_sample) {
            let e_c = state_embedding(&cs.values, &self.state_embed)?;
            offset = Some(match offset {
                Some(o) => o.add(&e_c)?,
                None => e_c,
            });
        }
        let fused_hidden = match &offset {
            Some(o) => hidden.add(&layout.pos_to_utt.matmul(o)?)?,
            None => hidden.clone(),
        };
        let logits = self.backbone.logits(&fused_hidden)?;
        let recon = reconstruction_term(&logits, &layout.targets, &layout.target_mask)?;

        let l_dir = match &zi_sample {
            Some(z) if v.uses_dir() => loss_dir(z, &self.verb_counts(batch, n_max)?, &self.w_verb)?,
            _ => zero_b.clone(),
        };

        let l_hid = match (&zs_sample, &tb.shuf, &tb.neg) {
            (Some(z), Some(shuf), Some(neg)) if v.uses_hid() => {
                let q_shuf = self.posterior_zs(shuf, dropout_rng.as_mut())?;
                let q_neg = self.posterior_zs(neg, dropout_rng.as_mut())?;
                let z_shuf = reparameterize(&q_shuf, rng)?;
                let z_neg = reparameterize(&q_neg, rng)?;
                loss_hid(z, &z_shuf, &z_neg)?
            }
            (_, _, _) if v.uses_hid() && (tb.shuf.is_none() || tb.neg.is_none()) => {
                return Err(Error::Config("L_HID requires shuffled and negative batches".into()))
            }
            _ => zero_b.clone(),
        };

        let l_mim = match (&zs_sample, &post_zs, &zi_sample, &post_zi) {
            (Some(zs), Some(qs), Some(zi), Some(qi)) if v.uses_mim() => {
                let stats = self.mim_stats(batch, zs, qs, zi, qi, opts.data_size)?;
                loss_mim(&stats, dtype)?
            }
            _ => Tensor::zeros((), dtype, &Device::Cpu)?,
        };

        let recon_m = recon.mean_all()?;
        let kl_c_m = kl_c.mean_all()?;
        let kl_zi_m = kl_zi.mean_all()?;
        let kl_zs_m = kl_zs.mean_all()?;
        let hid_m = l_hid.mean_all()?;
        let dir_m = l_dir.mean_all()?;
        let kl_sum = kl_c_m.add(&kl_zi_m)?.add(&kl_zs_m)?;
        let aux = hid_m.add(&dir_m)?.add(&l_mim)?;
        let objective = recon_m.sub(&kl_sum)?.add(&(&aux * opts.alpha)?)?;
        let trained = recon_m.sub(&(&kl_sum * opts.kl_weight)?)?.add(&(&aux * opts.alpha)?)?;
        let loss = trained.neg()?;

        let breakdown = LossBreakdown {
            reconstruction: to_scalar(&recon_m)?,
            kl_c: to_scalar(&kl_c_m)?,
            kl_zi: to_scalar(&kl_zi_m)?,
            kl_zs: to_scalar(&kl_zs_m)?,
            l_hid: to_scalar(&hid_m)?,
            l_dir: to_scalar(&dir_m)?,
            l_mim: to_scalar(&l_mim)?,
            total: 0.0,
        }
        .finish(opts.alpha);

        Ok(ForwardOutput {
            loss,
            objective,
            breakdown,
            bundle: LatentBundle {
                prior_c,
                post_c,
                c_sample,
                prior_zi,
                post_zi,
                zi_sample,
                post_zs,
                zs_sample,
                num_utterances: (0..b).map(|r| batch.num_utterances(r)).collect(),
            },
        })
    }

    /// Σ_k q(c_t = k) KL(q(z^I_t) ‖ p(z^I_t | h_{t-1}, e_k)), `[b, n_max]`.
    fn expected_zi_kl(&self, h_prev: &Tensor, q: &GaussianParams, qc: &CategoricalParams) -> Result<Tensor> {
        let (b, n_max, d) = h_prev.dims3()?;
        let mut per_state = Vec::with_capacity(self.cfg.num_states);
        for k in 0..self.cfg.num_states {
            let e = self.state_embed.narrow(0, k, 1)?.reshape((1, 1, d))?.broadcast_as((b, n_max, d))?.contiguous()?;
            let p = self.prior_zi.forward(h_prev, &e)?;
            per_state.push(kl_gaussian(q, &p)?);
        }
        let stacked = Tensor::stack(&per_state, D::Minus1)?;
        Ok(stacked.mul(&qc.probs)?.sum(D::Minus1)?)
    }

    /// W_I z^I_t + W_S z^S in hidden space, `[b, n_max, d]`; `None` when both
    /// latents are absent.
    fn latent_offset(&self, zi: Option<&Tensor>, zs: Option<&Tensor>, b: usize, n_max: usize) -> Result<Option<Tensor>> {
        let pi = match zi {
            Some(z) => Some(z.broadcast_matmul(&self.w_i.t()?)?),
            None => None,
        };
        let ps = match zs {
            Some(z) => Some(
                z.matmul(&self.w_s.t()?)?
                    .unsqueeze(1)?
                    .broadcast_as((b, n_max, self.cfg.d))?
                    .contiguous()?,
            ),
            None => None,
        };
        Ok(match (pi, ps) {
            (Some(a), Some(c)) => Some(a.add(&c)?),
            (Some(a), None) => Some(a),
            (None, Some(c)) => Some(c),
            (None, None) => None,
        })
    }

    /// One set of pairwise density statistics per utterance position, over
    /// the sessions that have that utterance.
    fn mim_stats(
        &self,
        batch: &Batch,
        zs: &Tensor,
        qs: &GaussianParams,
        zi: &Tensor,
        qi: &GaussianParams,
        data_size: usize,
    ) -> Result<Vec<MimBatchStats>> {
        let log_q_s = log_density_matrix(zs, qs)?;
        let n_max = zi.dim(1)?;
        let mut out = Vec::new();
        for t in 0..n_max {
            let rows: Vec<u32> = (0..batch.batch)
                .filter(|&r| t < batch.num_utterances(r))
                .map(|r| r as u32)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let idx = Tensor::new(rows.as_slice(), &Device::Cpu)?;
            let pick = |x: &Tensor| -> Result<Tensor> { Ok(x.narrow(1, t, 1)?.squeeze(1)?.contiguous()?.index_select(&idx, 0)?) };
            let zi_t = pick(zi)?;
            let qi_t = GaussianParams::new(pick(&qi.mu)?, pick(&qi.logvar)?);
            let log_q_i = log_density_matrix(&zi_t, &qi_t)?;
            let log_q_s_t = log_q_s.contiguous()?.index_select(&idx, 0)?.contiguous()?.index_select(&idx, 1)?;
            out.push(MimBatchStats::new(log_q_s_t, log_q_i, data_size.max(rows.len()))?);
        }
        Ok(out)
    }

    /// Log-likelihood of each session's final utterance under the latents
    /// used at generation time: states argmaxed from the posterior over the
    /// context, c_n from the flow prior's argmax, z^I_n at its prior mean and
    /// z^S at the context-only posterior mean. Returns `(sum log p, tokens)`
    /// per session.
    pub fn response_loglik(&self, batch: &Batch, variant: Variant) -> Result<Vec<(f64, usize)>> {
        self.check_turns(batch)?;
        let dtype = self.dtype();
        let layout = Layout::new(batch, dtype)?;
        let (b, n_max, d) = (batch.batch, layout.n_max, self.cfg.d);
        let hidden = self.backbone.encode(batch, None)?;
        let pooled = self.backbone.pool(&hidden, batch)?;
        let hphi = self.infer.encode(batch, None)?.vectors;
        let last: Vec<usize> = (0..b).map(|r| batch.num_utterances(r) - 1).collect();

        // c_n per session from the flow prior over argmaxed context states.
        let e_c = if variant.uses_c() {
            let q = to_vec(&self.post.c(&hphi)?.probs)?;
            let n = self.cfg.num_states;
            let mut e_rows = Vec::with_capacity(b);
            for (row, &tl) in last.iter().enumerate() {
                let states: Vec<usize> = (0..tl)
                    .map(|t| argmax(&q[(row * n_max + t) * n..(row * n_max + t + 1) * n]))
                    .collect();
                let prior = self.flow.forward_indices(&[states])?;
                let p = to_vec(&prior.probs.narrow(1, tl, 1)?)?;
                let ct = argmax(&p);
                e_rows.push(self.state_embed.narrow(0, ct, 1)?);
            }
            Some(Tensor::cat(&e_rows, 0)?)
        } else {
            None
        };

        let idx_last = Tensor::new(last.iter().map(|&t| t as u32).collect::<Vec<_>>().as_slice(), &Device::Cpu)?;
        let h_prev_all = self.previous_vectors(&pooled.vectors)?;
        let h_prev = h_prev_all
            .gather(&idx_last.reshape((b, 1, 1))?.broadcast_as((b, 1, d))?.contiguous()?, 1)?
            .squeeze(1)?;

        let (zi, direct_c) = if variant.uses_zi() {
            let e = e_c.unwrap_or(Tensor::zeros((b, d), dtype, &Device::Cpu)?);
            (Some(self.prior_zi.forward(&h_prev, &e)?.mu), None)
        } else {
            (None, e_c)
        };
        let zs = if variant.uses_zs() {
            let mut ctx = vec![0.0; b * n_max];
            for (row, &tl) in last.iter().enumerate() {
                for t in 0..tl {
                    ctx[row * n_max + t] = 1.0;
                }
            }
            let ctx = tensor_from(ctx, &[b, n_max], dtype)?;
            Some(self.post.z_s(&hphi, &ctx)?.mu)
        } else {
            None
        };
        let offset = match (&zi, &zs, &direct_c) {
            (None, None, None) => None,
            _ => {
                let mut o = Tensor::zeros((b, d), dtype, &Device::Cpu)?;
                if let Some(e) = &direct_c {
                    o = o.add(e)?;
                }
                if let Some(z) = &zi {
                    o = o.add(&z.matmul(&self.w_i.t()?)?)?;
                }
                if let Some(z) = &zs {
                    o = o.add(&z.matmul(&self.w_s.t()?)?)?;
                }
                Some(o)
            }
        };

        // Only positions predicting the final utterance count.
        let l = batch.max_len;
        let mut mask = vec![0.0; b * l];
        let mut counts = vec![0usize; b];
        for (row, &tl) in last.iter().enumerate() {
            let (start, end) = batch.spans[row][tl];
            for pos in start..end {
                mask[row * l + pos - 1] = 1.0;
            }
            counts[row] = end - start;
        }
        let mask = tensor_from(mask, &[b, l], dtype)?;
        let fused = match offset {
            Some(o) => hidden.broadcast_add(&o.unsqueeze(1)?)?,
            None => hidden,
        };
        let logits = self.backbone.logits(&fused)?;
        let ll = to_vec(&reconstruction_term(&logits, &layout.targets, &mask)?)?;
        Ok(ll.into_iter().zip(counts).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Precision;
    use crate::corpus::{build_vocab, shuffle_session, tokenize, DialogueSession, VerbLexicon, VerbVocab};

    fn sessions() -> Vec<DialogueSession> {
        let raw: [&[&str]; 3] = [
            &["hi how are you", "i like tea", "good to know"],
            &["where do you go", "i go home"],
            &["can you help", "sure i can help", "thanks a lot", "you are welcome"],
        ];
        raw.iter()
            .enumerate()
            .map(|(i, u)| DialogueSession {
                id: format!("s{i}"),
                utterances: u.iter().map(|x| tokenize(x)).collect(),
            })
            .collect()
    }

    pub(crate) fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d: 8,
            ffn: 16,
            vocab_size: vocab,
            max_positions: 64,
            dropout: 0.0,
            infer_layers: 0,
            num_states: 3,
            flow_layers: 1,
            flow_heads: 2,
            d_z: 0,
            history_window: 7,
            max_utterance_len: 32,
            straight_through: true,
            exact_zi_kl: false,
            precision: Precision::F64,
        }
    }

    fn setup() -> (DialogueModel, TrainBatch) {
        let ss = sessions();
        let vocab = build_vocab(&ss, 100).unwrap();
        let lex = VerbLexicon::builtin();
        let vv = VerbVocab::build(&lex, &vocab);
        let model = DialogueModel::new(&tiny_cfg(vocab.len()), vv.len(), 3).unwrap();
        let refs: Vec<&DialogueSession> = ss.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shuf: Vec<DialogueSession> = ss.iter().map(|s| shuffle_session(s, &mut rng)).collect();
        let neg = vec![ss[1].clone(), ss[2].clone(), ss[0].clone()];
        let tb = TrainBatch {
            x: Batch::collate(&refs, &vocab, &lex, &vv),
            shuf: Some(Batch::collate(&shuf.iter().collect::<Vec<_>>(), &vocab, &lex, &vv)),
            neg: Some(Batch::collate(&neg.iter().collect::<Vec<_>>(), &vocab, &lex, &vv)),
        };
        (model, tb)
    }

    #[test]
    fn forward_all_variants_finite() {
        let (model, tb) = setup();
        for v in Variant::ALL {
            let opts = ForwardOptions::eval(v, 10, 1.0);
            let out = model.forward(&tb, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let bd = out.breakdown;
            assert!(bd.is_finite(), "{v}: {bd:?}");
            assert!(bd.kl_c >= -1e-6 && bd.kl_zi >= -1e-6 && bd.kl_zs >= -1e-6);
            if !v.uses_c() {
                assert_eq!(bd.kl_c, 0.0);
            }
            if !v.uses_zs() {
                assert_eq!((bd.kl_zs, bd.l_hid), (0.0, 0.0));
            }
            if !v.uses_zi() {
                assert_eq!((bd.kl_zi, bd.l_dir), (0.0, 0.0));
            }
            if v == Variant::NoDisentangle {
                assert_eq!((bd.l_hid, bd.l_dir, bd.l_mim), (0.0, 0.0, 0.0));
            }
            if v == Variant::Full {
                assert!(bd.l_hid != 0.0 && bd.l_dir != 0.0 && bd.l_mim != 0.0 && bd.kl_c != 0.0);
            }
            let direct = -(bd.elbo() + (bd.l_hid + bd.l_dir + bd.l_mim));
            assert!((bd.total - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_zi_kl_mode_runs() {
        let (mut model, tb) = setup();
        model.cfg.exact_zi_kl = true;
        let out = model
            .forward(&tb, &ForwardOptions::eval(Variant::Full, 10, 1.0), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(out.breakdown.kl_zi > 0.0);
    }

    #[test]
    fn response_loglik_is_negative() {
        let (model, tb) = setup();
        for v in [Variant::Full, Variant::NoC, Variant::NoLatents] {
            let ll = model.response_loglik(&tb.x, v).unwrap();
            assert_eq!(ll.len(), 3);
            for (l, n) in ll {
                assert!(l < 0.0 && n > 0);
            }
        }
    }

    #[test]
    fn posterior_states_normalized() {
        let (model, tb) = setup();
        let st = model.posterior_states(&tb.x).unwrap();
        assert_eq!(st.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 4]);
        for row in st.iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
