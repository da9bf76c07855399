//! Run configuration.
//!
//! Every tunable lives here and is addressable through a flat dotted key
//! (`model.d = 128`, `train.alpha = 1.0`). Unknown keys are rejected with an
//! error that names the key.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

impl FromStr for Precision {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Ablation variants. `NoLatents` removes both Gaussian latents at once and is
/// used by the transfer experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoC,
    NoZs,
    NoZi,
    NoDisentangle,
    NoLatents,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoC,
        Variant::NoZs,
        Variant::NoZi,
        Variant::NoDisentangle,
        Variant::NoLatents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoC => "no_c",
            Variant::NoZs => "no_zS",
            Variant::NoZi => "no_zI",
            Variant::NoDisentangle => "no_disentangle",
            Variant::NoLatents => "no_zS_zI",
        }
    }

    pub fn uses_c(self) -> bool {
        !matches!(self, Variant::NoC)
    }

    pub fn uses_zs(self) -> bool {
        !matches!(self, Variant::NoZs | Variant::NoLatents)
    }

    pub fn uses_zi(self) -> bool {
        !matches!(self, Variant::NoZi | Variant::NoLatents)
    }

    pub fn uses_hid(self) -> bool {
        self.uses_zs() && self != Variant::NoDisentangle
    }

    pub fn uses_dir(self) -> bool {
        self.uses_zi() && self != Variant::NoDisentangle
    }

    pub fn uses_mim(self) -> bool {
        self.uses_zs() && self.uses_zi() && self != Variant::NoDisentangle
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_c" => Variant::NoC,
            "no_zS" | "no_zs" => Variant::NoZs,
            "no_zI" | "no_zi" => Variant::NoZi,
            "no_disentangle" => Variant::NoDisentangle,
            "no_zS_zI" | "no_zs_zi" | "no_zS+no_zI" => Variant::NoLatents,
            other => return Err(Error::UnknownVariant(other.to_string())),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and data-shaping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn: usize,
    /// Filled in from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Depth of the inference encoder; 0 means half the backbone depth.
    pub infer_layers: usize,
    pub num_states: usize,
    pub flow_layers: usize,
    pub flow_heads: usize,
    /// Latent width; 0 means equal to `d`.
    pub d_z: usize,
    /// Turns of history kept before the final utterance.
    pub history_window: usize,
    pub max_utterance_len: usize,
    pub straight_through: bool,
    /// Enumerate all states for the expected z^I KL instead of using the
    /// single Gumbel sample.
    pub exact_zi_kl: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            d: 128,
            ffn: 512,
            vocab_size: 0,
            max_positions: 512,
            dropout: 0.1,
            infer_layers: 0,
            num_states: 100,
            flow_layers: 2,
            flow_heads: 4,
            d_z: 0,
            history_window: 7,
            max_utterance_len: 32,
            straight_through: true,
            exact_zi_kl: false,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        if self.d_z == 0 {
            self.d
        } else {
            self.d_z
        }
    }

    pub fn inference_layers(&self) -> usize {
        if self.infer_layers == 0 {
            (self.layers / 2).max(1)
        } else {
            self.infer_layers
        }
    }

    pub fn max_utterances(&self) -> usize {
        self.history_window + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d={} must be divisible by model.heads={}",
                self.d, self.heads
            )));
        }
        if self.flow_heads == 0 || self.d % self.flow_heads != 0 {
            return Err(Error::Config(format!(
                "model.d={} must be divisible by model.flow_heads={}",
                self.d, self.flow_heads
            )));
        }
        if self.num_states < 2 {
            return Err(Error::Config("model.num_states must be at least 2".into()));
        }
        if self.layers == 0 || self.flow_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if self.max_utterance_len == 0 {
            return Err(Error::Config("model.max_utterance_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub alpha: f64,
    pub variant: Variant,
    pub freeze_flow: bool,
    pub eval_every: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_rate: f64,
    /// Fraction of `max_steps` over which KL weights ramp linearly to 1.
    /// 0 disables the warm-up.
    pub kl_warmup_frac: f64,
    pub grad_clip: f64,
    pub vocab_max: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_steps: 10_000,
            alpha: 1.0,
            variant: Variant::Full,
            freeze_flow: false,
            eval_every: 500,
            seed: 0,
            early_stop_patience: 5,
            tau_init: 1.0,
            tau_min: 0.5,
            tau_rate: 4e-5,
            kl_warmup_frac: 0.1,
            grad_clip: 1.0,
            vocab_max: 20_000,
            val_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.tau_min <= 0.0 || self.tau_init < self.tau_min {
            return Err(Error::Config(
                "temperatures must satisfy 0 < train.tau_min <= train.tau_init".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_frac) {
            return Err(Error::Config("train.kl_warmup_frac must lie in [0, 1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub length_penalty: f64,
    pub deterministic_latents: bool,
    /// Sample c_t from the flow prior instead of taking its argmax.
    pub sample_states: bool,
    pub state_temperature: f64,
    /// Draw z^S from N(0, I) instead of the context posterior.
    pub zs_from_prior: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_new_tokens: 32,
            length_penalty: 0.7,
            deterministic_latents: true,
            sample_states: false,
            state_temperature: 1.0,
            zs_from_prior: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("decode.max_new_tokens must be at least 1".into()));
        }
        if self.state_temperature <= 0.0 {
            return Err(Error::Config("decode.state_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

macro_rules! config_keys {
    ($( $key:literal => $section:ident . $field:ident ),* $(,)?) => {
        /// Every accepted key, in documentation order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => self.$section.$field = parse($key, value)?,)*
                    other => return Err(Error::UnknownKey(other.to_string())),
                }
                Ok(())
            }

            /// Flat `(key, value)` listing of the whole configuration.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$section.$field.to_string())),*]
            }
        }
    };
}

config_keys! {
    "model.layers" => model.layers,
    "model.heads" => model.heads,
    "model.d" => model.d,
    "model.ffn" => model.ffn,
    "model.vocab_size" => model.vocab_size,
    "model.max_positions" => model.max_positions,
    "model.dropout" => model.dropout,
    "model.infer_layers" => model.infer_layers,
    "model.num_states" => model.num_states,
    "model.flow_layers" => model.flow_layers,
    "model.flow_heads" => model.flow_heads,
    "model.d_z" => model.d_z,
    "model.history_window" => model.history_window,
    "model.max_utterance_len" => model.max_utterance_len,
    "model.straight_through" => model.straight_through,
    "model.exact_zi_kl" => model.exact_zi_kl,
    "model.precision" => model.precision,
    "train.lr" => train.lr,
    "train.adam_beta1" => train.adam_beta1,
    "train.adam_beta2" => train.adam_beta2,
    "train.adam_eps" => train.adam_eps,
    "train.batch_size" => train.batch_size,
    "train.max_steps" => train.max_steps,
    "train.alpha" => train.alpha,
    "train.variant" => train.variant,
    "train.freeze_flow" => train.freeze_flow,
    "train.eval_every" => train.eval_every,
    "train.seed" => train.seed,
    "train.early_stop_patience" => train.early_stop_patience,
    "train.tau_init" => train.tau_init,
    "train.tau_min" => train.tau_min,
    "train.tau_rate" => train.tau_rate,
    "train.kl_warmup_frac" => train.kl_warmup_frac,
    "train.grad_clip" => train.grad_clip,
    "train.vocab_max" => train.vocab_max,
    "train.val_fraction" => train.val_fraction,
    "decode.beam_size" => decode.beam_size,
    "decode.max_new_tokens" => decode.max_new_tokens,
    "decode.length_penalty" => decode.length_penalty,
    "decode.deterministic_latents" => decode.deterministic_latents,
    "decode.sample_states" => decode.sample_states,
    "decode.state_temperature" => decode.state_temperature,
    "decode.zs_from_prior" => decode.zs_from_prior,
    "decode.seed" => decode.seed,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse_str(&text)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(key, value)
    }

    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    /// Short SHA-256 of the flat rendering.
    pub fn hash(&self) -> String {
        digest(&[self.to_flat_string().as_bytes()])[..16].to_string()
    }
}

/// Hex SHA-256 over the concatenation of `parts`, each length-prefixed.
pub fn digest(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}
