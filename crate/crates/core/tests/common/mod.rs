#![allow(dead_code)]

use dialflow::config::{ModelConfig, Precision};
use dialflow::corpus::{build_vocab, tokenize, DialogueSession, VerbLexicon};
use dialflow::trainer::TrainData;
use dialflow::DialogueModel;

/// Sixteen distinct words, four of them verbs.
pub const WORDS: [&str; 16] = [
    "i", "want", "a", "table", "you", "need", "the", "train", "we", "book", "two", "seats", "can", "play", "some", "jazz",
];

pub fn session(id: &str, texts: &[&str]) -> DialogueSession {
    DialogueSession {
        id: id.into(),
        utterances: texts.iter().map(|t| tokenize(t)).collect(),
    }
}

/// Two-utterance sessions over exactly [`WORDS`], so the vocabulary has 20
/// entries.
pub fn two_turn_sessions() -> Vec<DialogueSession> {
    vec![
        session("s0", &["i want a table", "you need the train"]),
        session("s1", &["we book two seats", "can you play some jazz"]),
        session("s2", &["you want the jazz", "we need a train"]),
        session("s3", &["i book some seats", "play two table"]),
    ]
}

pub fn tiny_model_config(d: usize, states: usize, precision: Precision) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d,
        ffn: 2 * d,
        vocab_size: 0,
        max_positions: 64,
        dropout: 0.0,
        infer_layers: 1,
        num_states: states,
        flow_layers: 1,
        flow_heads: 2,
        d_z: 0,
        history_window: 4,
        max_utterance_len: 16,
        straight_through: false,
        exact_zi_kl: false,
        precision,
    }
}

/// Data plus a freshly initialised model whose vocabulary covers `sessions`.
pub fn tiny_setup(sessions: Vec<DialogueSession>, mut cfg: ModelConfig, seed: u64) -> (TrainData, DialogueModel) {
    let vocab = build_vocab(&sessions, 1000).unwrap();
    let data = TrainData::with_vocab(sessions.clone(), sessions, vocab, VerbLexicon::builtin());
    cfg.vocab_size = data.vocab.len();
    let model = DialogueModel::new(&cfg, data.verbs.len(), seed).unwrap();
    (data, model)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Gauss–Hermite nodes and weights for ∫ e^{-x²} f(x) dx, exact for
/// polynomials up to degree 5.
pub const GH3: [(f64, f64); 3] = [
    (-1.224_744_871_391_589, 0.295_408_975_150_919_3),
    (0.0, 1.181_635_900_603_677_4),
    (1.224_744_871_391_589, 0.295_408_975_150_919_3),
];

/// E_{x ~ N(mu, var)} f(x) by three-point Gauss–Hermite.
pub fn gauss_expect(mu: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    let s = (2.0 * var).sqrt();
    GH3.iter().map(|&(x, w)| w * f(mu + s * x)).sum::<f64>() / std::f64::consts::PI.sqrt()
}

pub fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mu).powi(2) / var)
}

// nltk corpus_bleu, uniform weights, SmoothingFunction().method1.
pub const NLTK_FULL: [f64; 4] = [0.7333735616203891, 0.6181805451625106, 0.5075991649135352, 0.40216486780211996];
pub const NLTK_FIRST3: [f64; 4] = [0.8, 0.6507913734559685, 0.4946201941314468, 0.32385880674159123];

pub fn bleu_fixture(n: usize) -> (Vec<Vec<&'static str>>, Vec<Vec<&'static str>>) {
    BLEU_FIXTURE[..n]
        .iter()
        .map(|(h, r)| (h.split(' ').collect(), r.split(' ').collect()))
        .unzip()
}

/// Twenty hypothesis/reference pairs, every hypothesis at least four tokens.
pub const BLEU_FIXTURE: [(&str, &str); 20] = [
    ("the cat sat on the mat", "the cat is on the mat"),
    ("there is a cat on the mat", "a cat is on the mat"),
    ("i would like to book a table", "i want to book a table for two"),
    ("how can i help you today", "how may i help you"),
    ("the train leaves at nine tonight", "the train leaves at nine"),
    ("please send me the report", "send the report to my boss"),
    ("what time do you open", "when do you open tomorrow"),
    ("we have seats on the morning flight", "there are seats on the morning flight"),
    ("thanks that works for me", "thanks that works for me"),
    ("i like jazz and blues music", "can you play some jazz music"),
    ("the weather is nice today", "what is the weather like tomorrow"),
    ("turn off the kitchen lights", "turn off the lights in the kitchen"),
    ("set an alarm for seven", "set an alarm for seven in the morning"),
    ("good evening how can i help", "evening how can i help"),
    ("order a large cheese pizza", "order a large pizza with cheese"),
    ("where is the train station", "where is the nearest train station"),
    ("my mother called me at six", "remind me to call my mother at six"),
    ("the hotel costs eighty a night", "the hotel in rome costs eighty a night"),
    ("do you prefer train or flight", "do you prefer a train or a flight"),
    ("ok thank you very much goodbye", "ok thank you goodbye"),
];

pub mod structural;

pub mod checks {
    use std::collections::BTreeSet;

    use candle_core::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use dialflow::model::{ForwardOptions, TrainBatch, PARAM_GROUPS};
    use dialflow::nn::{to_scalar, to_vec};
    use dialflow::trainer::{groups_with_gradient, Trainer};
    use dialflow::{Config, Variant};

    pub fn gradcheck_setup() -> (TrainData, DialogueModel, TrainBatch) {
        let cfg = tiny_model_config(8, 3, Precision::F64);
        let (data, model) = tiny_setup(two_turn_sessions(), cfg, 5);
        assert_eq!(data.vocab.len(), 20);
        let refs: Vec<&DialogueSession> = data.train.iter().collect();
        let tb = data.train_batch(&refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (data, model, tb)
    }

    pub fn gradcheck_options(variant: Variant) -> ForwardOptions {
        ForwardOptions {
            variant,
            tau: 0.7,
            kl_weight: 0.6,
            alpha: 1.0,
            data_size: 4,
            train: false,
        }
    }

    fn loss_at(model: &DialogueModel, tb: &TrainBatch, opts: &ForwardOptions) -> f64 {
        to_scalar(&model.forward(tb, opts, &mut ChaCha8Rng::seed_from_u64(77)).unwrap().loss).unwrap()
    }

    /// Largest relative error between autodiff and central differences over
    /// up to `per_param` random coordinates of every parameter, with the
    /// Gumbel and Gaussian noise fixed by seeding.
    pub fn max_gradient_error(per_param: usize) -> (f64, usize) {
        let (_, model, tb) = gradcheck_setup();
        let opts = gradcheck_options(Variant::Full);
        let out = model.forward(&tb, &opts, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let grads = out.loss.backward().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let var = model.params.get(&name).unwrap();
            let base = var.as_tensor().copy().unwrap();
            let shape = base.dims().to_vec();
            let values = to_vec(&base).unwrap();
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => to_vec(g).unwrap(),
                None => vec![0.0; values.len()],
            };
            for _ in 0..per_param.min(values.len()) {
                let k = rng.random_range(0..values.len());
                let eval = |delta: f64| {
                    let mut v = values.clone();
                    v[k] += delta;
                    var.set(&Tensor::from_vec(v, shape.as_slice(), base.device()).unwrap()).unwrap();
                    loss_at(&model, &tb, &opts)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&base).unwrap();
                worst = worst.max(rel_err(analytic[k], numeric, 1e-5));
                checked += 1;
            }
        }
        (worst, checked)
    }

    /// Parameter groups that must receive gradient under `variant`.
    pub fn expected_groups(variant: Variant) -> BTreeSet<String> {
        let dead: &[&str] = match variant {
            Variant::Full => &[],
            Variant::NoC => &["flow.trans", "flow.mlp", "latent.state_embed"],
            Variant::NoZs => &["dec.w_s"],
            Variant::NoZi => &["prior_zi", "dec.w_i", "dir.w_verb", "latent.h0"],
            Variant::NoDisentangle => &["dir.w_verb"],
            Variant::NoLatents => &["prior_zi", "dec.w_i", "dec.w_s", "dir.w_verb", "latent.h0"],
        };
        PARAM_GROUPS.iter().filter(|g| !dead.contains(g)).map(|g| g.to_string()).collect()
    }

    pub fn live_groups(variant: Variant) -> BTreeSet<String> {
        let (_, model, tb) = gradcheck_setup();
        groups_with_gradient(&model, &tb, &gradcheck_options(variant), 11)
            .unwrap()
            .into_iter()
            .collect()
    }

    /// Small trainer over [`two_turn_sessions`] for `variant`.
    pub fn tiny_trainer(variant: Variant, freeze_flow: bool) -> (TrainData, Trainer) {
        let mut cfg = Config::default();
        cfg.model = tiny_model_config(8, 3, Precision::F32);
        let t = &mut cfg.train;
        t.lr = 1e-2;
        t.batch_size = 4;
        t.max_steps = 6;
        t.eval_every = 3;
        t.variant = variant;
        t.freeze_flow = freeze_flow;
        t.early_stop_patience = 0;
        let (data, model) = tiny_setup(two_turn_sessions(), cfg.model.clone(), 4);
        cfg.model.vocab_size = data.vocab.len();
        (data, Trainer::new(model, &cfg).unwrap())
    }

    /// For each variant, runs a few training steps and returns the loss
    /// terms whose logged zero/nonzero status disagrees with the variant's
    /// definition.
    pub fn ablation_mismatches() -> Vec<(Variant, &'static str)> {
        let mut bad = Vec::new();
        for v in Variant::ALL {
            let (data, mut tr) = tiny_trainer(v, false);
            let summary = tr.train(&data, None, &mut std::io::sink()).unwrap();
            assert_eq!(summary.steps, 6);
            for log in &summary.history {
                let l = &log.loss;
                let terms = [
                    ("kl_c", l.kl_c, v.uses_c()),
                    ("kl_zI", l.kl_zi, v.uses_zi()),
                    ("kl_zS", l.kl_zs, v.uses_zs()),
                    ("l_hid", l.l_hid, v.uses_hid()),
                    ("l_dir", l.l_dir, v.uses_dir()),
                    ("l_mim", l.l_mim, v.uses_mim()),
                ];
                for (name, value, permitted) in terms {
                    if !value.is_finite() || (value != 0.0) != permitted {
                        bad.push((v, name));
                    }
                }
            }
        }
        bad.sort_by_key(|(v, n)| (v.name(), *n));
        bad.dedup();
        bad
    }
}

pub mod oracles {
    use candle_core::{DType, Device, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::log_normal;
    use dialflow::latent::{argmax, gumbel_sample, CategoricalParams, GaussianParams};
    use dialflow::nn::{to_scalar, to_vec};
    use dialflow::objective::{elbo, entropy_estimate, kl_categorical, kl_gaussian, log_density_matrix};

    pub fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    pub fn gauss(mu: &[f64], lv: &[f64]) -> GaussianParams {
        GaussianParams::new(t(mu, &[mu.len()]), t(lv, &[lv.len()]))
    }

    pub fn cat(p: &[f64]) -> CategoricalParams {
        CategoricalParams::from_probs(p, &[p.len()], DType::F64).unwrap()
    }

    /// KL(q‖p) for 2-D diagonal Gaussians by midpoint rule on a 600² grid
    /// spanning ±9σ of q.
    pub fn kl_grid(qm: [f64; 2], qv: [f64; 2], pm: [f64; 2], pv: [f64; 2]) -> f64 {
        let n = 600;
        let mut total = 0.0;
        let (lo0, hi0) = (qm[0] - 9.0 * qv[0].sqrt(), qm[0] + 9.0 * qv[0].sqrt());
        let (lo1, hi1) = (qm[1] - 9.0 * qv[1].sqrt(), qm[1] + 9.0 * qv[1].sqrt());
        let (h0, h1) = ((hi0 - lo0) / n as f64, (hi1 - lo1) / n as f64);
        for i in 0..n {
            let x = lo0 + (i as f64 + 0.5) * h0;
            for j in 0..n {
                let y = lo1 + (j as f64 + 0.5) * h1;
                let lq = log_normal(x, qm[0], qv[0]) + log_normal(y, qm[1], qv[1]);
                let lp = log_normal(x, pm[0], pv[0]) + log_normal(y, pm[1], pv[1]);
                total += lq.exp() * (lq - lp) * h0 * h1;
            }
        }
        total
    }

    /// Largest gap between the closed-form KL and the grid over five random
    /// Gaussian pairs.
    pub fn kl_gaussian_quadrature_error() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let mut r = || -> f64 { StandardNormal.sample(&mut rng) };
            let qm = [r(), r()];
            let pm = [r(), r()];
            let qlv = [0.5 * r(), 0.5 * r()];
            let plv = [0.5 * r(), 0.5 * r()];
            let ours = to_scalar(&kl_gaussian(&gauss(&qm, &qlv), &gauss(&pm, &plv)).unwrap()).unwrap();
            let grid = kl_grid(qm, [qlv[0].exp(), qlv[1].exp()], pm, [plv[0].exp(), plv[1].exp()]);
            worst = worst.max((ours - grid).abs());
        }
        worst
    }

    /// Largest gap between the tensor KL and Σ q (ln q − ln p) over random
    /// pairs of distributions.
    pub fn kl_categorical_error(trials: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let n = rng.random_range(2..12);
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect::<Vec<f64>>()
            };
            let q = draw(&mut rng);
            let p = draw(&mut rng);
            let direct: f64 = q.iter().zip(&p).map(|(a, b)| a * (a.ln() - b.ln())).sum();
            let ours = to_scalar(&kl_categorical(&cat(&q), &cat(&p)).unwrap()).unwrap();
            worst = worst.max((ours - direct).abs());
        }
        worst
    }

    /// The two-utterance, two-state objective written out by hand; returns
    /// `(library, hand, reconstruction)`.
    pub fn elbo_toy() -> (f64, f64, f64) {
        let qc1 = [0.7, 0.3];
        let pc1 = [0.5, 0.5];
        let qc2 = [0.2, 0.8];
        // p(c_2 | c_1 = 0), the sampled first state.
        let pc2 = [0.4, 0.6];
        let (qi1, pi1) = ((0.3, -0.5), (0.1, 0.2));
        let (qi2, pi2) = ((-0.4, -1.0), (0.0, 0.0));
        let qs = ([0.5, -0.2], [-0.3, 0.1]);
        let recon = -7.25;

        let kl_c_hand = 0.7 * (0.7f64 / 0.5).ln()
            + 0.3 * (0.3f64 / 0.5).ln()
            + 0.2 * (0.2f64 / 0.4).ln()
            + 0.8 * (0.8f64 / 0.6).ln();
        let kl1 =
            |(mq, lq): (f64, f64), (mp, lp): (f64, f64)| 0.5 * (lp - lq + (lq.exp() + (mq - mp) * (mq - mp)) / lp.exp() - 1.0);
        let kl_zi_hand = kl1(qi1, pi1) + kl1(qi2, pi2);
        let kl_zs_hand = kl1((qs.0[0], qs.1[0]), (0.0, 0.0)) + kl1((qs.0[1], qs.1[1]), (0.0, 0.0));
        let hand = recon - kl_c_hand - kl_zi_hand - kl_zs_hand;

        let q = CategoricalParams::from_probs(&[qc1, qc2].concat(), &[2, 2], DType::F64).unwrap();
        let p = CategoricalParams::from_probs(&[pc1, pc2].concat(), &[2, 2], DType::F64).unwrap();
        let kl_c: f64 = to_vec(&kl_categorical(&q, &p).unwrap()).unwrap().iter().sum();
        let qz = GaussianParams::new(t(&[qi1.0, qi2.0], &[2, 1]), t(&[qi1.1, qi2.1], &[2, 1]));
        let pz = GaussianParams::new(t(&[pi1.0, pi2.0], &[2, 1]), t(&[pi1.1, pi2.1], &[2, 1]));
        let kl_zi: f64 = to_vec(&kl_gaussian(&qz, &pz).unwrap()).unwrap().iter().sum();
        let kl_zs = to_scalar(&kl_gaussian(&gauss(&qs.0, &qs.1), &gauss(&[0.0, 0.0], &[0.0, 0.0])).unwrap()).unwrap();
        (elbo(recon, kl_c, kl_zi, kl_zs), hand, recon)
    }

    /// Estimator output on `b` standard-normal draws whose posteriors all
    /// equal N(0, 1), with data size `m`.
    pub fn iid_standard_entropy(b: usize, m: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zeros = Tensor::zeros((b, 1), DType::F64, &Device::Cpu).unwrap();
        let q = GaussianParams::new(zeros.clone(), zeros);
        to_scalar(&entropy_estimate(&log_density_matrix(&t(&z, &[b, 1]), &q).unwrap(), m).unwrap()).unwrap()
    }

    pub fn gaussian_entropy() -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
    }

    /// Total variation between hard Gumbel-softmax argmax frequencies and
    /// the softmax over four logits.
    pub fn gumbel_tv(draws: usize) -> f64 {
        let logits = [1.0, 0.2, -0.5, 0.7];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let lt = t(&logits, &[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let s = to_vec(&gumbel_sample(&lt, 0.5, true, &mut rng).unwrap().values).unwrap();
            counts[argmax(&s)] += 1;
        }
        0.5 * counts.iter().zip(&probs).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>()
    }
}
