//! Optimization loop: Adam with global-norm clipping, Gumbel annealing, KL
//! warm-up, early stopping, parameter freezing and checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{
    build_vocab, sample_negative, shuffle_session, Batch, DialogueSession, VerbLexicon, VerbVocab, Vocabulary,
};
use crate::error::{Error, Result};
use crate::latent::{anneal_temperature, TemperatureSchedule};
use crate::model::{DialogueModel, ForwardOptions, TrainBatch, PARAM_GROUPS};
use crate::nn::to_scalar;
use crate::objective::LossBreakdown;

/// Sessions plus the vocabularies needed to batch them.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub lexicon: VerbLexicon,
    pub verbs: VerbVocab,
    pub train: Vec<DialogueSession>,
    pub val: Vec<DialogueSession>,
}

/// Seeded split into `(train, val)`; validation keeps at least one session
/// and training at least two.
pub fn split_sessions(
    mut sessions: Vec<DialogueSession>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<DialogueSession>, Vec<DialogueSession>)> {
    if sessions.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 sessions for a train/validation split, have {}",
            sessions.len()
        )));
    }
    sessions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sessions.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 2);
    let val = sessions.split_off(n - n_val);
    Ok((sessions, val))
}

impl TrainData {
    /// Splits `sessions` and builds the vocabulary from the training part.
    pub fn build(sessions: Vec<DialogueSession>, cfg: &Config, lexicon: VerbLexicon) -> Result<Self> {
        let (train, val) = split_sessions(sessions, cfg.train.val_fraction, cfg.train.seed)?;
        let vocab = build_vocab(&train, cfg.train.vocab_max)?;
        Ok(Self::with_vocab(train, val, vocab, lexicon))
    }

    pub fn with_vocab(
        train: Vec<DialogueSession>,
        val: Vec<DialogueSession>,
        vocab: Vocabulary,
        lexicon: VerbLexicon,
    ) -> Self {
        let verbs = VerbVocab::build(&lexicon, &vocab);
        TrainData {
            vocab,
            lexicon,
            verbs,
            train,
            val,
        }
    }

    pub fn collate(&self, sessions: &[&DialogueSession]) -> Batch {
        Batch::collate(sessions, &self.vocab, &self.lexicon, &self.verbs)
    }

    /// A batch with shuffled copies and negatives drawn from the training set.
    pub fn train_batch(&self, sessions: &[&DialogueSession], rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
        let shuf: Vec<DialogueSession> = sessions.iter().map(|s| shuffle_session(s, rng)).collect();
        let neg = sessions
            .iter()
            .map(|s| sample_negative(&self.train, s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainBatch {
            x: self.collate(sessions),
            shuf: Some(self.collate(&shuf.iter().collect::<Vec<_>>())),
            neg: Some(self.collate(&neg)),
        })
    }
}

/// Adam over named parameters; parameters without a gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: usize,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update and returns the pre-clipping global gradient norm.
    pub fn step(
        &mut self,
        model: &DialogueModel,
        grads: &candle_core::backprop::GradStore,
        trainable: &BTreeSet<String>,
        clip: f64,
    ) -> Result<f64> {
        let mut live = Vec::new();
        let mut sq = 0.0;
        for (name, var) in model.params.iter() {
            if !trainable.contains(name) {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += to_scalar(&g.sqr()?.sum_all()?)?;
                live.push((name.to_string(), var.clone(), g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, g) in live {
            let g = (g * scale)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = (&m / bc1)?.div(&(((&v / bc2)?.sqrt()? + self.eps)?))?;
            var.set(&var.as_tensor().sub(&(update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    fn load_state(&mut self, map: HashMap<String, Tensor>) {
        self.m.clear();
        self.v.clear();
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), t);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub tau: f64,
    pub kl_weight: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub history: Vec<StepLog>,
    pub val_history: Vec<(usize, LossBreakdown)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("corrupt rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub config: Config,
    pub verb_classes: usize,
    pub frozen: Vec<String>,
    pub best_val: Option<f64>,
    rng: RngState,
}

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const VERBS_FILE: &str = "verbs.txt";

/// Loads a model plus its vocabularies from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(DialogueModel, Vocabulary, VerbVocab, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let model = DialogueModel::new(&manifest.config.model, manifest.verb_classes, 0)?;
    model.params.load(&dir.join(PARAMS_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let verbs = VerbVocab::load(&dir.join(VERBS_FILE))?;
    if vocab.len() != manifest.config.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            manifest.config.model.vocab_size
        )));
    }
    Ok((model, vocab, verbs, manifest))
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Resolves group names to parameter names.
pub fn resolve_groups(model: &DialogueModel, groups: &[&str]) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for g in groups {
        let names = model.params.group(g);
        if names.is_empty() {
            return Err(Error::UnknownParamGroup(g.to_string()));
        }
        out.extend(names);
    }
    Ok(out)
}

pub struct Trainer {
    pub model: DialogueModel,
    pub cfg: Config,
    pub opt: Adam,
    pub step: usize,
    pub frozen: BTreeSet<String>,
    pub best_val: Option<f64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: DialogueModel, cfg: &Config) -> Result<Self> {
        cfg.train.validate()?;
        let t = &cfg.train;
        let mut trainer = Trainer {
            model,
            cfg: cfg.clone(),
            opt: Adam::new(t.lr, t.adam_beta1, t.adam_beta2, t.adam_eps),
            step: 0,
            frozen: BTreeSet::new(),
            best_val: None,
            rng: ChaCha8Rng::seed_from_u64(t.seed),
            order: Vec::new(),
            cursor: 0,
        };
        if t.freeze_flow {
            trainer.freeze(&crate::model::FLOW_GROUPS)?;
        }
        Ok(trainer)
    }

    /// Excludes the named parameter groups from every later update.
    pub fn freeze(&mut self, groups: &[&str]) -> Result<()> {
        let names = resolve_groups(&self.model, groups)?;
        self.frozen.extend(names);
        Ok(())
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        self.model
            .params
            .names()
            .filter(|n| !self.frozen.contains(*n))
            .map(str::to_string)
            .collect()
    }

    pub fn temperature(&self) -> f64 {
        let t = &self.cfg.train;
        anneal_temperature(
            self.step,
            &TemperatureSchedule {
                tau_init: t.tau_init,
                tau_min: t.tau_min,
                rate: t.tau_rate,
            },
        )
    }

    pub fn kl_weight(&self) -> f64 {
        let ramp = self.cfg.train.kl_warmup_frac * self.cfg.train.max_steps as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            (self.step as f64 / ramp).min(1.0)
        }
    }

    /// Next minibatch of training sessions in a per-epoch shuffled order.
    pub fn next_batch(&mut self, data: &TrainData) -> Result<TrainBatch> {
        let n = data.train.len();
        let bs = self.cfg.train.batch_size.min(n);
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(&data.train[self.order[self.cursor]]);
            self.cursor += 1;
        }
        data.train_batch(&picked, &mut self.rng)
    }

    pub fn train_step(&mut self, data: &TrainData, tb: &TrainBatch) -> Result<StepLog> {
        let tau = self.temperature();
        let kl_weight = self.kl_weight();
        let opts = ForwardOptions {
            variant: self.cfg.train.variant,
            tau,
            kl_weight,
            alpha: self.cfg.train.alpha,
            data_size: data.train.len(),
            train: true,
        };
        let out = self.model.forward(tb, &opts, &mut self.rng)?;
        let loss_value = to_scalar(&out.loss)?;
        if !loss_value.is_finite() || !out.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                batch_id: tb.x.session_ids.join(","),
                detail: format!("{:?}", out.breakdown),
            });
        }
        let trainable = self.trainable();
        let grad_norm = if trainable.is_empty() {
            0.0
        } else {
            let grads = out.loss.backward()?;
            self.opt.step(&self.model, &grads, &trainable, self.cfg.train.grad_clip)?
        };
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            tau,
            kl_weight,
            grad_norm,
            loss: out.breakdown,
        })
    }

    /// Mean breakdown over `sessions` with dropout off, unit KL weights and a
    /// fixed noise seed so repeated calls agree.
    pub fn evaluate(&self, data: &TrainData, sessions: &[DialogueSession]) -> Result<LossBreakdown> {
        if sessions.is_empty() {
            return Err(Error::EmptyInput("no sessions to evaluate".into()));
        }
        let opts = ForwardOptions {
            tau: self.temperature(),
            ..ForwardOptions::eval(self.cfg.train.variant, data.train.len(), self.cfg.train.alpha)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x5eed);
        let mut acc = LossBreakdown::default();
        let mut count = 0usize;
        for chunk in sessions.chunks(self.cfg.train.batch_size) {
            let refs: Vec<&DialogueSession> = chunk.iter().collect();
            let tb = data.train_batch(&refs, &mut rng)?;
            let b = self.model.forward(&tb, &opts, &mut rng)?.breakdown;
            let w = chunk.len() as f64;
            acc.reconstruction += w * b.reconstruction;
            acc.kl_c += w * b.kl_c;
            acc.kl_zi += w * b.kl_zi;
            acc.kl_zs += w * b.kl_zs;
            acc.l_hid += w * b.l_hid;
            acc.l_dir += w * b.l_dir;
            acc.l_mim += w * b.l_mim;
            count += chunk.len();
        }
        let c = count as f64;
        let mean = LossBreakdown {
            reconstruction: acc.reconstruction / c,
            kl_c: acc.kl_c / c,
            kl_zi: acc.kl_zi / c,
            kl_zs: acc.kl_zs / c,
            l_hid: acc.l_hid / c,
            l_dir: acc.l_dir / c,
            l_mim: acc.l_mim / c,
            total: 0.0,
        };
        Ok(mean.finish(self.cfg.train.alpha))
    }

    /// Runs until `max_steps` or early stopping, then restores the parameters
    /// with the best validation loss. Writes one JSON record per step and
    /// per evaluation to `log`; checkpoints go to `ckpt_dir/latest` and
    /// `ckpt_dir/best`.
    pub fn train<W: Write>(&mut self, data: &TrainData, ckpt_dir: Option<&Path>, log: &mut W) -> Result<TrainSummary> {
        let max_steps = self.cfg.train.max_steps;
        let patience = self.cfg.train.early_stop_patience;
        let mut history = Vec::new();
        let mut val_history = Vec::new();
        let mut best: Option<(usize, f64, HashMap<String, Tensor>)> = None;
        let mut bad_evals = 0;
        let mut stopped_early = false;
        while self.step < max_steps {
            let tb = self.next_batch(data)?;
            let entry = self.train_step(data, &tb)?;
            write_record(log, "train", &entry)?;
            history.push(entry);
            if self.step % self.cfg.train.eval_every == 0 || self.step == max_steps {
                let val = self.evaluate(data, &data.val)?;
                write_record(
                    log,
                    "val",
                    &serde_json::json!({"step": self.step, "loss": val}),
                )?;
                log::info!(
                    "step {} val loss {:.4} rec {:.4} kl_c {:.3}",
                    self.step,
                    val.total,
                    val.reconstruction,
                    val.kl_c
                );
                val_history.push((self.step, val));
                if let Some(dir) = ckpt_dir {
                    self.save(&dir.join("latest"), data)?;
                }
                if best.as_ref().is_none_or(|(_, b, _)| val.total < *b) {
                    best = Some((self.step, val.total, self.model.params.snapshot()?));
                    self.best_val = Some(val.total);
                    bad_evals = 0;
                    if let Some(dir) = ckpt_dir {
                        self.save(&dir.join("best"), data)?;
                    }
                } else {
                    bad_evals += 1;
                    if patience > 0 && bad_evals >= patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let (best_step, best_val) = match best {
            Some((s, v, snap)) => {
                self.model.params.restore(&snap)?;
                (s, v)
            }
            None => (self.step, f64::NAN),
        };
        Ok(TrainSummary {
            steps: self.step,
            best_step,
            best_val,
            stopped_early,
            history,
            val_history,
        })
    }

    pub fn save(&self, dir: &Path, data: &TrainData) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.params.save(&dir.join(PARAMS_FILE))?;
        let opt = self.opt.state();
        if !opt.is_empty() {
            candle_core::safetensors::save(&opt, dir.join(OPTIMIZER_FILE))?;
        }
        data.vocab.save(&dir.join(VOCAB_FILE))?;
        data.verbs.save(&dir.join(VERBS_FILE))?;
        let manifest = CheckpointManifest {
            step: self.step,
            config: self.cfg.clone(),
            verb_classes: self.model.verb_classes,
            frozen: self.frozen.iter().cloned().collect(),
            best_val: self.best_val,
            rng: RngState::capture(&self.rng),
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Restores parameters, optimizer moments, step, frozen set and RNG.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, _, _, manifest) = load_model(dir)?;
        let mut trainer = Trainer::new(model, &manifest.config)?;
        trainer.step = manifest.step;
        trainer.opt.t = manifest.step;
        trainer.frozen = manifest.frozen.iter().cloned().collect();
        trainer.best_val = manifest.best_val;
        trainer.rng = manifest.rng.restore()?;
        let opt_path = dir.join(OPTIMIZER_FILE);
        if opt_path.exists() {
            trainer
                .opt
                .load_state(candle_core::safetensors::load(&opt_path, &candle_core::Device::Cpu)?);
        }
        Ok(trainer)
    }
}

fn write_record<W: Write, T: Serialize>(log: &mut W, split: &str, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("split".into(), split.into());
    }
    serde_json::to_writer(&mut *log, &v)?;
    writeln!(log)?;
    Ok(())
}

/// Every top-level parameter group with a nonzero gradient for `tb`.
pub fn groups_with_gradient(model: &DialogueModel, tb: &TrainBatch, opts: &ForwardOptions, seed: u64) -> Result<Vec<String>> {
    let out = model.forward(tb, opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let grads = out.loss.backward()?;
    let mut live = Vec::new();
    for g in PARAM_GROUPS {
        let mut any = false;
        for name in model.params.group(g) {
            let var = model.params.get(&name).expect("listed parameter exists");
            if let Some(grad) = grads.get(var.as_tensor()) {
                if to_scalar(&grad.abs()?.sum_all()?)? > 0.0 {
                    any = true;
                    break;
                }
            }
        }
        if any {
            live.push(g.to_string());
        }
    }
    Ok(live)
}
