//! Multi-turn, text-guided image editing: text encoder, dialogue-state
//! tracker, attentive generator/discriminator, DAMSM matching, synthetic data,
//! training and evaluation.

pub mod checkpoint;
pub mod config;
pub mod damsm;
pub mod error;
pub mod gan;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod proxy;
pub mod study;
pub mod synth;
pub mod textenc;
pub mod tracker;
pub mod trainer;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use image::Image;
pub use model::SeqAttnGan;
pub use synth::{Attributes, EditSequence, Turn};
pub use textenc::{TextEncoder, Vocabulary};
pub use trainer::{LossReport, Trainer};
