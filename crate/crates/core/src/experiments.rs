//! Desk-scale experiments: memorization, structure recovery and the
//! freeze-transfer comparison.

use serde::{Deserialize, Serialize};

use crate::config::{Config, DecodeConfig, Precision, Variant};
use crate::corpus::{build_vocab, tokenize, DialogueSession, VerbLexicon};
use crate::error::Result;
use crate::evalkit::{assign_states, bleu_n, structure_recovery_score};
use crate::evalkit::structure::adjusted_mutual_info;
use crate::generator::generate;
use crate::model::DialogueModel;
use crate::synth::{self, labels_for};
use crate::trainer::{TrainData, Trainer};

/// Small model used by every desk-scale experiment.
pub fn desk_config(num_states: usize) -> Config {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.layers = 2;
    m.heads = 2;
    m.d = 32;
    m.ffn = 64;
    m.max_positions = 160;
    m.dropout = 0.0;
    m.num_states = num_states;
    m.flow_layers = 1;
    m.flow_heads = 2;
    m.history_window = 5;
    m.precision = Precision::F32;
    let t = &mut cfg.train;
    t.lr = 3e-3;
    t.batch_size = 16;
    t.kl_warmup_frac = 0.2;
    t.tau_rate = 2e-3;
    t.early_stop_patience = 0;
    cfg
}

pub fn init_model(cfg: &mut Config, data: &TrainData, seed: u64) -> Result<DialogueModel> {
    cfg.model.vocab_size = data.vocab.len();
    DialogueModel::new(&cfg.model, data.verbs.len(), seed)
}

/// Ten hand-written sessions with distinct final responses.
pub fn memorization_corpus() -> Vec<DialogueSession> {
    let raw: [&[&str]; 10] = [
        &["hi there", "hello how can i help", "i need a taxi to the airport"],
        &["good morning", "morning what do you need", "please book a table for two"],
        &["hey", "hey what is up", "can you play some jazz music"],
        &["hello", "hi what can i do for you", "what is the weather like tomorrow"],
        &["excuse me", "yes how may i help", "where is the nearest train station"],
        &["hi", "hello there friend", "remind me to call my mother at six"],
        &["good evening", "evening how can i help", "order a large pizza with cheese"],
        &["hey assistant", "i am listening", "set an alarm for seven in the morning"],
        &["hello again", "welcome back", "send the report to my boss today"],
        &["yo", "hi what do you want", "turn off the lights in the kitchen"],
    ];
    raw.iter()
        .enumerate()
        .map(|(i, u)| DialogueSession {
            id: format!("m{i}"),
            utterances: u.iter().map(|t| tokenize(t)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationResult {
    pub first_reconstruction: f64,
    pub last_reconstruction: f64,
    pub improvement: f64,
    pub verbatim: usize,
    pub total: usize,
    pub bleu_1: f64,
}

pub fn memorization_config(steps: usize, seed: u64) -> Config {
    let mut cfg = desk_config(4);
    cfg.train.max_steps = steps;
    cfg.train.batch_size = 10;
    cfg.train.eval_every = steps;
    cfg.train.seed = seed;
    cfg
}

pub fn run_memorization(steps: usize, seed: u64) -> Result<MemorizationResult> {
    run_memorization_with(memorization_config(steps, seed), seed)
}

pub fn run_memorization_with(mut cfg: Config, seed: u64) -> Result<MemorizationResult> {
    let sessions = memorization_corpus();
    let vocab = build_vocab(&sessions, 1000)?;
    let data = TrainData::with_vocab(sessions.clone(), sessions.clone(), vocab, VerbLexicon::builtin());
    let model = init_model(&mut cfg, &data, seed)?;
    let mut trainer = Trainer::new(model, &cfg)?;
    let summary = trainer.train(&data, None, &mut std::io::sink())?;
    let first = summary.history.first().map(|h| h.loss.reconstruction).unwrap_or(f64::NAN);
    let last = trainer.evaluate(&data, &sessions)?.reconstruction;
    let decode = DecodeConfig {
        max_new_tokens: 16,
        ..DecodeConfig::default()
    };
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    let mut verbatim = 0;
    for s in &sessions {
        let ctx = s.prefix(s.len() - 1);
        let g = generate(&ctx, &trainer.model, &data.vocab, cfg.train.variant, &decode)?;
        let target = s.utterances[s.len() - 1].clone();
        if g.trace.tokens == target {
            verbatim += 1;
        }
        hyps.push(g.trace.tokens);
        refs.push(target);
    }
    Ok(MemorizationResult {
        first_reconstruction: first,
        last_reconstruction: last,
        improvement: 1.0 - last / first,
        verbatim,
        total: sessions.len(),
        bleu_1: bleu_n(&hyps, &refs, 1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub full_ami: f64,
    pub random_ami: f64,
    pub utterances: usize,
    pub steps: usize,
}

/// Trains the full model on a four-state synthetic corpus and scores the
/// learned states against the generator's labels, next to a seeded
/// uniform-random assignment. Eight states with the soft relaxation and a
/// KL ramp over the whole run; shorter ramps let q(c) collapse onto the
/// flow prior.
pub fn run_structure_recovery(sessions: usize, steps: usize, seed: u64) -> Result<RecoveryResult> {
    let spec = synth::domain_a(sessions, 5, seed);
    let corpus = synth::generate(&spec)?;
    let labels: std::collections::HashMap<String, Vec<usize>> = corpus
        .sessions
        .iter()
        .zip(&corpus.labels)
        .map(|(s, l)| (s.id.clone(), l.clone()))
        .collect();
    let mut cfg = desk_config(8);
    cfg.model.straight_through = false;
    cfg.train.kl_warmup_frac = 1.0;
    cfg.train.max_steps = steps;
    cfg.train.eval_every = steps;
    cfg.train.seed = seed;
    cfg.train.val_fraction = 0.05;
    let data = TrainData::build(corpus.sessions, &cfg, VerbLexicon::builtin())?;
    let model = init_model(&mut cfg, &data, seed)?;
    let mut trainer = Trainer::new(model, &cfg)?;
    trainer.train(&data, None, &mut std::io::sink())?;
    let eval: Vec<DialogueSession> = data.train.iter().chain(&data.val).cloned().collect();
    let assign = assign_states(&trainer.model, &data, &eval, Variant::Full, 64)?;
    let truth = labels_for(&eval, &labels)?;
    let full_ami = structure_recovery_score(&assign, &truth)?;
    let random_ami = adjusted_mutual_info(&random_assignment(truth.len(), 8, seed), &truth)?;
    Ok(RecoveryResult {
        full_ami,
        random_ami,
        utterances: truth.len(),
        steps,
    })
}

pub fn random_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub sessions_a: usize,
    pub sessions_b: usize,
    pub turns: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub num_states: usize,
    pub seed: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            sessions_a: 2000,
            sessions_b: 200,
            turns: 5,
            pretrain_steps: 600,
            finetune_steps: 150,
            num_states: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub variant: Variant,
    /// Per-token negative log-likelihood of held-out domain-B responses.
    pub unfrozen_nll: f64,
    pub frozen_nll: f64,
    /// `(frozen - unfrozen) / unfrozen`.
    pub degradation: f64,
    pub frozen_params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub spec: TransferSpec,
    pub rows: Vec<TransferRow>,
}

impl TransferResult {
    pub fn row(&self, variant: Variant) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Mean per-token NLL of each session's final utterance, scored the way
/// the generator conditions on the context.
pub fn response_nll(model: &DialogueModel, data: &TrainData, sessions: &[DialogueSession], variant: Variant) -> Result<f64> {
    let (mut ll, mut tokens) = (0.0, 0usize);
    for chunk in sessions.chunks(32) {
        let refs: Vec<&DialogueSession> = chunk.iter().collect();
        for (l, n) in model.response_loglik(&data.collate(&refs), variant)? {
            ll += l;
            tokens += n;
        }
    }
    if tokens == 0 {
        return Err(crate::error::Error::EmptyInput("no response tokens".into()));
    }
    Ok(-ll / tokens as f64)
}

/// Pretrains each variant on domain A, then fine-tunes two copies on domain
/// B, one with the flow prior frozen, and compares held-out response NLL.
pub fn run_transfer(variants: &[Variant], spec: &TransferSpec) -> Result<TransferResult> {
    let a = synth::generate(&synth::domain_a(spec.sessions_a, spec.turns, spec.seed))?;
    let b = synth::generate(&synth::domain_b(spec.sessions_b, spec.turns, spec.seed + 1))?;
    let mut base = desk_config(spec.num_states);
    base.train.seed = spec.seed;
    base.train.val_fraction = 0.1;
    let (a_train, a_val) = crate::trainer::split_sessions(a.sessions, base.train.val_fraction, spec.seed)?;
    let (b_train, b_val) = crate::trainer::split_sessions(b.sessions, 0.25, spec.seed)?;
    let all: Vec<DialogueSession> = a_train.iter().chain(&b_train).cloned().collect();
    let vocab = build_vocab(&all, base.train.vocab_max)?;
    let data_a = TrainData::with_vocab(a_train, a_val, vocab.clone(), VerbLexicon::builtin());
    let data_b = TrainData::with_vocab(b_train, b_val, vocab, VerbLexicon::builtin());

    let mut rows = Vec::new();
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.train.variant = variant;
        cfg.train.max_steps = spec.pretrain_steps;
        cfg.train.eval_every = spec.pretrain_steps.max(1);
        let model = init_model(&mut cfg, &data_a, spec.seed)?;
        let mut pre = Trainer::new(model, &cfg)?;
        pre.train(&data_a, None, &mut std::io::sink())?;
        let snapshot = pre.model.params.snapshot()?;
        let tau = pre.temperature();

        let mut nll = [0.0; 2];
        let mut frozen_params = Vec::new();
        for (i, freeze) in [false, true].into_iter().enumerate() {
            let mut ft = cfg.clone();
            ft.train.max_steps = spec.finetune_steps;
            ft.train.eval_every = spec.finetune_steps.max(1);
            ft.train.freeze_flow = freeze;
            ft.train.kl_warmup_frac = 0.0;
            ft.train.tau_init = tau;
            ft.train.seed = spec.seed + 7;
            let model = DialogueModel::new(&cfg.model, data_b.verbs.len(), spec.seed)?;
            model.params.restore(&snapshot)?;
            let mut trainer = Trainer::new(model, &ft)?;
            trainer.train(&data_b, None, &mut std::io::sink())?;
            if freeze {
                frozen_params = trainer.frozen.iter().cloned().collect();
            }
            nll[i] = response_nll(&trainer.model, &data_b, &data_b.val, variant)?;
        }
        rows.push(TransferRow {
            variant,
            unfrozen_nll: nll[0],
            frozen_nll: nll[1],
            degradation: (nll[1] - nll[0]) / nll[0],
            frozen_params,
        });
    }
    Ok(TransferResult { spec: spec.clone(), rows })
}
