//! Latent-conditioned decoding: infer the flow and z^S from the context,
//! roll the flow prior one step, draw z^I and decode with fused logits.

use std::io::{BufRead, Write};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, Variant};
use crate::corpus::{concat_session, tokenize, Batch, DialogueSession, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::latent::{argmax, reparameterize, standard_normal, GaussianParams};
use crate::model::DialogueModel;
use crate::nn::{log_softmax_last, tensor_from, to_vec};

/// p_ti + W_v W^I z^I + W_v W^S z^S.
/// `p_ti: [.., V]`, `z_i, z_s: [d_z]`, `w_v: [V, d]`, `w_i, w_s: [d, d_z]`.
pub fn fuse_logits(p_ti: &Tensor, z_i: &Tensor, z_s: &Tensor, w_v: &Tensor, w_i: &Tensor, w_s: &Tensor) -> Result<Tensor> {
    let p_i = latent_logits(z_i, w_v, w_i)?;
    let p_s = latent_logits(z_s, w_v, w_s)?;
    Ok(p_ti.broadcast_add(&p_i)?.broadcast_add(&p_s)?)
}

/// W_v W z as a `[V]` logit vector.
pub fn latent_logits(z: &Tensor, w_v: &Tensor, w: &Tensor) -> Result<Tensor> {
    let hidden = w.matmul(&z.unsqueeze(1)?)?;
    Ok(w_v.matmul(&hidden)?.squeeze(1)?)
}

/// Single-row batch of a context whose utterances may number just one.
pub fn context_batch(context: &DialogueSession, vocab: &Vocabulary) -> Batch {
    let c = concat_session(context, vocab);
    let n = c.ids.len();
    Batch {
        ids: c.ids,
        batch: 1,
        max_len: n,
        lengths: vec![n],
        spans: vec![c.spans],
        attention: vec![1; n],
        verb_mask: vec![0; n],
        verb_class: vec![0; n],
        session_ids: vec![context.id.clone()],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextLatents {
    /// argmax q(c_τ | ·) for every context utterance.
    pub states: Vec<usize>,
    pub state_probs: Vec<Vec<f64>>,
    pub z_s: Option<Vec<f64>>,
}

fn check_context(context: &DialogueSession, model: &DialogueModel) -> Result<()> {
    if context.utterances.is_empty() {
        return Err(Error::EmptyInput("generation context has no utterances".into()));
    }
    if let Some(t) = context.utterances.iter().position(Vec::is_empty) {
        return Err(Error::EmptyInput(format!("context utterance {t} is empty")));
    }
    if context.len() > model.cfg.history_window {
        return Err(Error::Length {
            len: context.len(),
            max: model.cfg.history_window,
        });
    }
    Ok(())
}

pub fn infer_context_latents(
    context: &DialogueSession,
    model: &DialogueModel,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContextLatents> {
    check_context(context, model)?;
    let batch = context_batch(context, vocab);
    let hphi = model.infer.encode(&batch, None)?.vectors;
    let n = context.len();
    let (states, state_probs) = if variant.uses_c() {
        let probs = to_vec(&model.post.c(&hphi)?.probs)?;
        let k = model.cfg.num_states;
        let rows: Vec<Vec<f64>> = probs.chunks(k).map(<[f64]>::to_vec).collect();
        (rows.iter().map(|r| argmax(r)).collect(), rows)
    } else {
        (Vec::new(), Vec::new())
    };
    let z_s = if variant.uses_zs() {
        let dz = model.cfg.latent_dim();
        let z = if cfg.zs_from_prior {
            standard_normal(&[1, dz], model.dtype(), rng)?
        } else {
            let q = model.post.z_s(&hphi, &tensor_from(vec![1.0; n], &[1, n], model.dtype())?)?;
            if cfg.deterministic_latents {
                q.mu
            } else {
                reparameterize(&q, rng)?
            }
        };
        Some(to_vec(&z)?)
    } else {
        None
    };
    Ok(ContextLatents {
        states,
        state_probs,
        z_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: String,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<String>,
    pub context_states: Vec<usize>,
    /// p(c_t | c_<t) for the response turn.
    pub predicted_states: Vec<f64>,
    pub state: Option<usize>,
    pub z_s: Option<Vec<f64>>,
    pub z_i: Option<Vec<f64>>,
    /// L2 norm of the latent logit shift, constant over the response.
    pub latent_logit_norm: f64,
    pub steps: Vec<StepTrace>,
    /// Length-normalized log-probability of the returned sequence.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub trace: GenerationTrace,
}

/// Everything the decoder needs once the latents are fixed.
pub struct DecodeState<'a> {
    model: &'a DialogueModel,
    prefix: Vec<u32>,
    /// W^I z^I + W^S z^S in hidden space, `[d]`.
    offset: Option<Tensor>,
}

impl<'a> DecodeState<'a> {
    pub fn new(model: &'a DialogueModel, prefix: Vec<u32>, offset: Option<Tensor>) -> Self {
        DecodeState { model, prefix, offset }
    }

    /// Next-token log-probabilities after each continuation, `[k][V]`.
    pub fn next_log_probs(&self, continuations: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let k = continuations.len();
        let len = self.prefix.len() + continuations[0].len();
        if len > self.model.cfg.max_positions {
            return Err(Error::Length {
                len,
                max: self.model.cfg.max_positions,
            });
        }
        let mut ids = Vec::with_capacity(k * len);
        for c in continuations {
            ids.extend_from_slice(&self.prefix);
            ids.extend_from_slice(c);
        }
        let ids = Tensor::from_vec(ids, (k, len), &Device::Cpu)?;
        let hidden = self.model.backbone.encode_ids(&ids, None)?;
        let mut last = hidden.narrow(1, len - 1, 1)?.squeeze(1)?;
        if let Some(o) = &self.offset {
            last = last.broadcast_add(o)?;
        }
        let lp = to_vec(&log_softmax_last(&self.model.backbone.logits(&last)?)?)?;
        let v = self.model.cfg.vocab_size;
        Ok(lp.chunks(v).map(<[f64]>::to_vec).collect())
    }

    /// Sum of token log-probabilities of `seq` under teacher forcing.
    pub fn score_sequence(&self, seq: &[u32]) -> Result<f64> {
        let mut ids = self.prefix.clone();
        ids.extend_from_slice(seq);
        let len = ids.len();
        let ids_t = Tensor::from_vec(ids.clone(), (1, len), &Device::Cpu)?;
        let mut hidden = self.model.backbone.encode_ids(&ids_t, None)?;
        if let Some(o) = &self.offset {
            hidden = hidden.broadcast_add(o)?;
        }
        let lp = to_vec(&log_softmax_last(&self.model.backbone.logits(&hidden)?)?)?;
        let v = self.model.cfg.vocab_size;
        let p0 = self.prefix.len();
        Ok(seq
            .iter()
            .enumerate()
            .map(|(i, &tok)| lp[(p0 + i - 1) * v + tok as usize])
            .sum())
    }
}

fn blocked(tok: usize) -> bool {
    tok == BOS_ID as usize || tok == PAD_ID as usize
}

/// Length-normalized score: log-probability over (token count)^penalty.
pub fn normalized_score(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
}

impl Hypothesis {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn score(&self, penalty: f64) -> f64 {
        normalized_score(self.log_prob(), self.tokens.len(), penalty)
    }

    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS_ID)
    }
}

pub fn greedy_decode(state: &DecodeState, max_new_tokens: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_probs: Vec::new(),
    };
    while hyp.tokens.len() < max_new_tokens && !hyp.finished() {
        let lp = state.next_log_probs(std::slice::from_ref(&hyp.tokens))?.remove(0);
        let masked: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(i, &x)| if blocked(i) { f64::NEG_INFINITY } else { x })
            .collect();
        let tok = argmax(&masked);
        hyp.tokens.push(tok as u32);
        hyp.log_probs.push(lp[tok]);
    }
    Ok(hyp)
}

/// Beam search over length-normalized scores. The greedy sequence joins the
/// final candidate pool so the result never scores below it.
pub fn beam_decode(state: &DecodeState, beam_size: usize, max_new_tokens: usize, penalty: f64) -> Result<Hypothesis> {
    if beam_size == 1 {
        return greedy_decode(state, max_new_tokens);
    }
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_probs: Vec::new(),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new_tokens {
        if beams.is_empty() {
            break;
        }
        let conts: Vec<Vec<u32>> = beams.iter().map(|h| h.tokens.clone()).collect();
        let lps = state.next_log_probs(&conts)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, lp) in lps.iter().enumerate() {
            let base = beams[bi].log_prob();
            for (tok, &x) in lp.iter().enumerate() {
                if !blocked(tok) {
                    cands.push((base + x, bi, tok));
                }
            }
        }
        let new_len = beams[0].tokens.len() + 1;
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for &(_, bi, tok) in cands.iter().take(beam_size) {
            let mut h = beams[bi].clone();
            h.tokens.push(tok as u32);
            h.log_probs.push(lps[bi][tok]);
            if h.finished() || new_len == max_new_tokens {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        beams = next;
    }
    done.extend(beams);
    done.push(greedy_decode(state, max_new_tokens)?);
    let best = done
        .into_iter()
        .reduce(|a, b| if b.score(penalty) > a.score(penalty) { b } else { a })
        .expect("candidate pool is never empty");
    Ok(best)
}

/// Predicted state distribution, the chosen state and W^I z^I + W^S z^S.
struct TurnLatents {
    predicted: Vec<f64>,
    state: Option<usize>,
    z_i: Option<Vec<f64>>,
    offset: Option<Tensor>,
}

fn turn_latents(
    context: &DialogueSession,
    ctx: &ContextLatents,
    model: &DialogueModel,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TurnLatents> {
    let dtype = model.dtype();
    let d = model.cfg.d;
    let (predicted, state) = if variant.uses_c() {
        let prior = model.flow.forward_indices(&[ctx.states.clone()])?;
        let p = to_vec(&prior.probs.narrow(1, ctx.states.len(), 1)?)?;
        let s = if cfg.sample_states {
            sample_state(&p, cfg.state_temperature, rng)
        } else {
            argmax(&p)
        };
        (p, Some(s))
    } else {
        (Vec::new(), None)
    };
    let z_i = if variant.uses_zi() {
        let batch = context_batch(context, vocab);
        let hidden = model.backbone.encode(&batch, None)?;
        let pooled = model.backbone.pool(&hidden, &batch)?.vectors;
        let h_prev = pooled.narrow(1, context.len() - 1, 1)?.squeeze(1)?;
        let e = match state {
            Some(s) => model.state_embed.narrow(0, s, 1)?,
            None => Tensor::zeros((1, d), dtype, &Device::Cpu)?,
        };
        let p: GaussianParams = model.prior_zi.forward(&h_prev, &e)?;
        let z = if cfg.deterministic_latents {
            p.mu
        } else {
            reparameterize(&p, rng)?
        };
        Some(to_vec(&z)?)
    } else {
        None
    };
    let dz = model.cfg.latent_dim();
    let mut offset: Option<Tensor> = match (variant.uses_zi(), state) {
        (false, Some(s)) => Some(model.state_embed.narrow(0, s, 1)?.squeeze(0)?),
        _ => None,
    };
    for (z, w) in [(&z_i, &model.w_i), (&ctx.z_s, &model.w_s)] {
        if let Some(z) = z {
            let shift = w.matmul(&tensor_from(z.clone(), &[dz, 1], dtype)?)?.squeeze(1)?;
            offset = Some(match offset {
                Some(o) => o.add(&shift)?,
                None => shift,
            });
        }
    }
    Ok(TurnLatents {
        predicted,
        state,
        z_i,
        offset,
    })
}

fn sample_state(p: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let w: Vec<f64> = p.iter().map(|x| x.max(0.0).powf(1.0 / temperature)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    argmax(p)
}

pub fn generate(
    context: &DialogueSession,
    model: &DialogueModel,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &DecodeConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ctx = infer_context_latents(context, model, vocab, variant, cfg, &mut rng)?;
    let turn = turn_latents(context, &ctx, model, vocab, variant, cfg, &mut rng)?;
    let prefix = concat_session(context, vocab).ids;
    let latent_logit_norm = match &turn.offset {
        Some(o) => {
            let shift = to_vec(&model.backbone.logits(&o.unsqueeze(0)?)?)?;
            shift.iter().map(|x| x * x).sum::<f64>().sqrt()
        }
        None => 0.0,
    };
    let state = DecodeState::new(model, prefix, turn.offset.clone());
    let hyp = beam_decode(&state, cfg.beam_size, cfg.max_new_tokens, cfg.length_penalty)?;
    let words: Vec<String> = vocab.decode(&hyp.tokens);
    let steps = hyp
        .tokens
        .iter()
        .zip(&hyp.log_probs)
        .map(|(&t, &lp)| StepTrace {
            token: vocab.token(t).to_string(),
            log_prob: lp,
        })
        .collect();
    Ok(Generation {
        text: words.join(" "),
        trace: GenerationTrace {
            tokens: words,
            context_states: ctx.states,
            predicted_states: turn.predicted,
            state: turn.state,
            z_s: ctx.z_s,
            z_i: turn.z_i,
            latent_logit_norm,
            steps,
            score: hyp.score(cfg.length_penalty),
        },
    })
}

/// A context from raw utterance strings; a single utterance is allowed.
pub fn context_from_texts(id: &str, texts: &[String], max_len: usize) -> DialogueSession {
    DialogueSession {
        id: id.to_string(),
        utterances: texts
            .iter()
            .map(|t| {
                let mut toks = tokenize(t);
                toks.truncate(max_len);
                toks
            })
            .collect(),
    }
}

#[derive(Debug, Deserialize)]
struct ContextRecord {
    context_id: String,
    context: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ResponseRecord<'a> {
    context_id: &'a str,
    response: &'a str,
    states: Vec<usize>,
}

/// JSONL `{context_id, context}` in, `{context_id, response, states}` out.
/// `states` lists the inferred context states followed by the chosen one.
pub fn generate_jsonl<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    model: &DialogueModel,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &DecodeConfig,
) -> Result<usize> {
    let mut count = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut ctx = context_from_texts(&rec.context_id, &rec.context, model.cfg.max_utterance_len);
        ctx.truncate(model.cfg.history_window, model.cfg.max_utterance_len);
        let g = generate(&ctx, model, vocab, variant, cfg)?;
        let mut states = g.trace.context_states.clone();
        states.extend(g.trace.state);
        let out = ResponseRecord {
            context_id: &rec.context_id,
            response: &g.text,
            states,
        };
        serde_json::to_writer(&mut writer, &out)?;
        writeln!(writer)?;
        count += 1;
    }
    Ok(count)
}

/// Top-k states of a distribution as `(state, prob)`, highest first.
pub fn top_states(p: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, p[i])).collect()
}

/// Line-oriented chat. `/reset` clears the window, `/states` prints the last
/// turn's state distributions, `/quit` or end of input exits.
pub fn repl<R: BufRead, W: Write>(
    reader: R,
    mut out: W,
    model: &DialogueModel,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &DecodeConfig,
) -> Result<()> {
    let mut history: Vec<String> = Vec::new();
    let mut last: Option<GenerationTrace> = None;
    let mut turn = 0u64;
    write!(out, "> ")?;
    out.flush()?;
    for line in reader.lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => {}
            "/quit" => break,
            "/reset" => {
                history.clear();
                last = None;
                writeln!(out, "(context cleared)")?;
            }
            "/states" => match &last {
                Some(tr) => {
                    for (t, s) in tr.context_states.iter().enumerate() {
                        writeln!(out, "context[{t}] state {s}")?;
                    }
                    if !tr.predicted_states.is_empty() {
                        let row: Vec<String> = tr.predicted_states.iter().map(|p| format!("{p:.4}")).collect();
                        writeln!(out, "p(c_t | c_<t) = [{}]", row.join(", "))?;
                    }
                }
                None => writeln!(out, "(no turn yet)")?,
            },
            _ => {
                history.push(text.to_string());
                let keep = model.cfg.history_window;
                if history.len() > keep {
                    history.drain(..history.len() - keep);
                }
                let ctx = context_from_texts("repl", &history, model.cfg.max_utterance_len);
                let turn_cfg = DecodeConfig {
                    seed: cfg.seed.wrapping_add(turn),
                    ..cfg.clone()
                };
                turn += 1;
                let g = generate(&ctx, model, vocab, variant, &turn_cfg)?;
                writeln!(out, "{}", g.text)?;
                if !g.trace.predicted_states.is_empty() {
                    let top: Vec<String> = top_states(&g.trace.predicted_states, 3)
                        .iter()
                        .map(|(s, p)| format!("{s}:{p:.3}"))
                        .collect();
                    writeln!(out, "  states {}", top.join(" "))?;
                }
                history.push(g.text.clone());
                last = Some(g.trace);
            }
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Precision};
    use crate::corpus::build_vocab;

    fn model_and_vocab() -> (DialogueModel, Vocabulary) {
        let ss = vec![DialogueSession {
            id: "a".into(),
            utterances: vec![tokenize("hello there"), tokenize("how are you")],
        }];
        let vocab = build_vocab(&ss, 100).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d: 8,
            ffn: 16,
            vocab_size: vocab.len(),
            max_positions: 64,
            dropout: 0.0,
            num_states: 3,
            flow_layers: 1,
            flow_heads: 2,
            precision: Precision::F64,
            ..ModelConfig::default()
        };
        (DialogueModel::new(&cfg, 2, 5).unwrap(), vocab)
    }

    #[test]
    fn fuse_zero_latents_is_identity() {
        let (m, _) = model_and_vocab();
        let v = m.cfg.vocab_size;
        let p = tensor_from((0..v).map(|i| i as f64).collect(), &[v], m.dtype()).unwrap();
        let z = Tensor::zeros(8, m.dtype(), &Device::Cpu).unwrap();
        let f = fuse_logits(&p, &z, &z, &m.backbone.embed, &m.w_i, &m.w_s).unwrap();
        assert_eq!(to_vec(&f).unwrap(), to_vec(&p).unwrap());
    }

    #[test]
    fn fuse_is_linear_in_latents() {
        let (m, _) = model_and_vocab();
        let v = m.cfg.vocab_size;
        let p = Tensor::zeros(v, m.dtype(), &Device::Cpu).unwrap();
        let zi = tensor_from((0..8).map(|i| 0.1 * i as f64).collect(), &[8], m.dtype()).unwrap();
        let zs = tensor_from((0..8).map(|i| 0.3 - 0.05 * i as f64).collect(), &[8], m.dtype()).unwrap();
        let once = to_vec(&fuse_logits(&p, &zi, &zs, &m.backbone.embed, &m.w_i, &m.w_s).unwrap()).unwrap();
        let twice = to_vec(
            &fuse_logits(&p, &(&zi * 2.0).unwrap(), &(&zs * 2.0).unwrap(), &m.backbone.embed, &m.w_i, &m.w_s).unwrap(),
        )
        .unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_utterance_context() {
        let (m, vocab) = model_and_vocab();
        let ctx = context_from_texts("c", &["hello there".into()], 32);
        let cfg = DecodeConfig {
            max_new_tokens: 4,
            ..DecodeConfig::default()
        };
        let lat = infer_context_latents(&ctx, &m, &vocab, Variant::Full, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(lat.states.len(), 1);
        assert!(lat.z_s.is_some());
        let g = generate(&ctx, &m, &vocab, Variant::Full, &cfg).unwrap();
        assert!(g.trace.tokens.len() <= 4);
        assert!(g.trace.steps.len() >= g.trace.tokens.len());
        assert!((g.trace.predicted_states.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_context_rejected() {
        let (m, vocab) = model_and_vocab();
        let ctx = context_from_texts("c", &[], 32);
        assert!(generate(&ctx, &m, &vocab, Variant::Full, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn top_states_sorted() {
        assert_eq!(top_states(&[0.2, 0.5, 0.3], 2), vec![(1, 0.5), (2, 0.3)]);
    }
}
