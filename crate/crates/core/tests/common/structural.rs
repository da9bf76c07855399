//! Structural invariants as checks returning the first violation found.

use candle_core::{DType, Device, Tensor};
use dialflow::backbone::attentive_pool;
use dialflow::config::Precision;
use dialflow::corpus::{BOS_ID, EOS_ID};
use dialflow::generator::{beam_decode, fuse_logits, greedy_decode, normalized_score, DecodeState};
use dialflow::nn::{log_softmax_last, tensor_from, to_vec};
use dialflow::DialogueModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{session, tiny_model_config, tiny_setup, two_turn_sessions};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn model(seed: u64) -> DialogueModel {
    tiny_setup(two_turn_sessions(), tiny_model_config(8, 3, Precision::F64), seed).1
}

/// Hidden states before a changed token stay bit-identical, over 100
/// random perturbations.
pub fn backbone_causality() -> Check {
    let m = model(1);
    let v = m.cfg.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let len = 12;
    for _ in 0..100 {
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let j = rng.random_range(1..len);
        let mut changed = ids.clone();
        changed[j] = (changed[j] + rng.random_range(1..v)) % v;
        let enc = |x: Vec<u32>| {
            let t = Tensor::from_vec(x, (1, len), &Device::Cpu).unwrap();
            to_vec(&m.backbone.encode_ids(&t, None).unwrap().narrow(1, 0, j).unwrap()).unwrap()
        };
        ensure!(enc(ids) == enc(changed), "positions before {j} moved");
    }
    Ok(())
}

pub fn pooling_weights() -> Check {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hidden = tensor_from((0..2 * 9 * 8).map(|_| rng.random_range(-2.0..2.0)).collect(), &[2, 9, 8], m.dtype()).unwrap();
    let spans = vec![vec![(1, 4), (4, 9)], vec![(1, 3)]];
    let pooled = attentive_pool(&hidden, &spans, &m.backbone.query).unwrap();
    let w = to_vec(&pooled.weights).unwrap();
    for (row, row_spans) in spans.iter().enumerate() {
        for (t, &(start, end)) in row_spans.iter().enumerate() {
            let base = (row * 2 + t) * 9;
            let inside: f64 = w[base + start..base + end].iter().sum();
            let outside: f64 = w[base..base + 9].iter().sum::<f64>() - inside;
            ensure!((inside - 1.0).abs() < 1e-6, "span weights sum to {inside}");
            ensure!(outside.abs() < 1e-6, "{outside} weight outside the span");
        }
    }
    Ok(())
}

/// The flow prior reads states only: scrambling every text-side parameter
/// or batching alongside other rows leaves it untouched.
pub fn flow_prior_content_independence() -> Check {
    let m = model(3);
    let prefixes = vec![vec![0, 2], vec![1, 1]];
    let before = to_vec(&m.flow.forward_indices(&prefixes).unwrap().probs).unwrap();
    let alone = to_vec(&m.flow.forward_indices(&prefixes[..1]).unwrap().probs).unwrap();
    ensure!(before[..alone.len()] == alone[..], "prior depends on other rows");
    for (name, var) in m.params.iter() {
        if name.starts_with("backbone") || name.starts_with("infer") || name.starts_with("post") {
            let noise = Tensor::randn(0.0, 1.0, var.shape(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
            var.set(&var.as_tensor().add(&noise).unwrap()).unwrap();
        }
    }
    let after = to_vec(&m.flow.forward_indices(&prefixes).unwrap().probs).unwrap();
    ensure!(before == after, "prior moved with text-side parameters");
    Ok(())
}

/// Dyadic inputs keep every product exact, so the shifted and unshifted
/// log-softmax must agree bit for bit.
pub fn fused_softmax_shift() -> Check {
    let dyadic = |n: usize, seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-8i32..8) as f64 / 4.0).collect()
    };
    let dt = DType::F64;
    let (v, d, dz) = (7, 4, 3);
    let w_v = tensor_from(dyadic(v * d, 1), &[v, d], dt).unwrap();
    let w_i = tensor_from(dyadic(d * dz, 2), &[d, dz], dt).unwrap();
    let w_s = tensor_from(dyadic(d * dz, 3), &[d, dz], dt).unwrap();
    let z_i = tensor_from(dyadic(dz, 4), &[dz], dt).unwrap();
    let z_s = tensor_from(dyadic(dz, 5), &[dz], dt).unwrap();
    let p = dyadic(v, 6);
    let lsm = |p: Vec<f64>| {
        let fused = fuse_logits(&tensor_from(p, &[v], dt).unwrap(), &z_i, &z_s, &w_v, &w_i, &w_s).unwrap();
        to_vec(&log_softmax_last(&fused).unwrap()).unwrap()
    };
    let base = lsm(p.clone());
    for shift in [-3.0, 0.5, 16.0] {
        ensure!(lsm(p.iter().map(|x| x + shift).collect()) == base, "shift {shift} changed the distribution");
    }
    Ok(())
}

fn prefixes() -> Vec<Vec<u32>> {
    vec![vec![BOS_ID], vec![BOS_ID, 4, 5, EOS_ID], vec![BOS_ID, 6, EOS_ID, 7]]
}

pub fn beam_one_is_greedy() -> Check {
    for seed in 0..3 {
        let m = model(seed);
        for p in prefixes() {
            let state = DecodeState::new(&m, p.clone(), None);
            ensure!(
                beam_decode(&state, 1, 6, 0.7).unwrap() == greedy_decode(&state, 6).unwrap(),
                "beam(1) differs from greedy after {p:?}"
            );
        }
    }
    Ok(())
}

pub fn beam_not_below_greedy() -> Check {
    for seed in 0..3 {
        let m = model(seed);
        for p in prefixes() {
            let state = DecodeState::new(&m, p, None);
            let g = greedy_decode(&state, 6).unwrap().score(0.7);
            for k in [2, 3, 5] {
                let b = beam_decode(&state, k, 6, 0.7).unwrap().score(0.7);
                ensure!(b >= g - 1e-12, "beam({k}) scored {b} below greedy {g}");
            }
        }
    }
    Ok(())
}

/// With one word plus EOS and UNK the whole search space at length three
/// holds 3 + 9 + 27 sequences; a 27-wide beam must find the best of them.
pub fn beam_exhaustive_oracle() -> Check {
    let sessions = vec![session("a", &["hi", "hi hi"]), session("b", &["hi hi hi", "hi"])];
    for seed in 0..4 {
        let (data, m) = tiny_setup(sessions.clone(), tiny_model_config(8, 2, Precision::F64), seed);
        ensure!(data.vocab.len() == 5, "vocabulary has {} entries", data.vocab.len());
        let state = DecodeState::new(&m, vec![BOS_ID], None);
        let alphabet = [EOS_ID, 3, 4];
        let mut best = f64::NEG_INFINITY;
        let mut stack: Vec<Vec<u32>> = alphabet.iter().map(|&t| vec![t]).collect();
        while let Some(seq) = stack.pop() {
            if seq.last() == Some(&EOS_ID) || seq.len() == 3 {
                best = best.max(normalized_score(state.score_sequence(&seq).unwrap(), seq.len(), 0.7));
            } else {
                for &t in &alphabet {
                    let mut next = seq.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        let beam = beam_decode(&state, 27, 3, 0.7).unwrap().score(0.7);
        ensure!((beam - best).abs() < 1e-9, "seed {seed}: beam {beam} vs exhaustive {best}");
    }
    Ok(())
}

pub const ALL: [(&str, fn() -> Check); 7] = [
    ("backbone causality", backbone_causality),
    ("pooling weights", pooling_weights),
    ("flow prior content independence", flow_prior_content_independence),
    ("fused softmax shift", fused_softmax_shift),
    ("beam(1) = greedy", beam_one_is_greedy),
    ("beam >= greedy", beam_not_below_greedy),
    ("beam exhaustive oracle", beam_exhaustive_oracle),
];
