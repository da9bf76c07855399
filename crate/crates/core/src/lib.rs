//! Dialogue generation with a discrete conversation-flow prior and
//! disentangled session/utterance latents.

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod generator;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use config::{Config, ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::DialogueModel;
