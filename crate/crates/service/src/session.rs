//! Editing sessions: history, tracker snapshots, per-turn noise and undo.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqattn_core::synth::{render, stream_seed, AttributeVector};
use seqattn_core::{Attributes, Image};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;

pub const DEFAULT_MAX_TURNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceError {
    NotFound(String),
    SessionFull { id: String, max_turns: usize },
    NothingToUndo(String),
    EmptyText,
    BadInit(String),
    BadImage(String),
    NotLoaded,
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::SessionFull { .. } | ServiceError::NothingToUndo(_) => 409,
            ServiceError::EmptyText | ServiceError::BadInit(_) | ServiceError::BadImage(_) => 422,
            ServiceError::NotLoaded => 503,
            ServiceError::Internal(_) => 500,
        }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServiceError::NotFound(id) => write!(f, "session {id} not found"),
            ServiceError::SessionFull { id, max_turns } => {
                write!(f, "session {id} already has {max_turns} turns")
            }
            ServiceError::NothingToUndo(id) => write!(f, "session {id} has no turn to undo"),
            ServiceError::EmptyText => write!(f, "feedback text has no tokens"),
            ServiceError::BadInit(m) => write!(f, "invalid init: {m}"),
            ServiceError::BadImage(m) => write!(f, "undecodable image: {m}"),
            ServiceError::NotLoaded => write!(f, "model not loaded"),
            ServiceError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for ServiceError {}

impl From<seqattn_core::Error> for ServiceError {
    fn from(e: seqattn_core::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// How a session's first image is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Init {
    Named(String),
    Preset { preset: Attributes },
    Upload { image_b64: String },
}

/// One accepted feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub text: String,
    pub words: Vec<String>,
    pub noise_seed: u64,
    pub image_png: String,
    pub heatmaps_png: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub seed: u64,
    pub max_turns: usize,
    pub created_at: u64,
    pub last_active: u64,
    pub initial_png: String,
    /// `h_0 ..= h_t`; always one longer than `turns`.
    pub states: Vec<Vec<f32>>,
    pub turns: Vec<TurnRecord>,
}

pub fn encode_png(img: &Image) -> ServiceResult<String> {
    Ok(B64.encode(img.encode_png()?))
}

pub fn decode_png(b64: &str) -> ServiceResult<Image> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ServiceError::BadImage(e.to_string()))?;
    Image::decode(&bytes).map_err(|e| ServiceError::BadImage(e.to_string()))
}

/// Attribute vector of a "random" session with this seed.
pub fn random_attributes(seed: u64) -> AttributeVector {
    AttributeVector::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// The `x_0` an init request asks for, at render size or as uploaded.
pub fn initial_image(init: &Init, seed: u64) -> ServiceResult<Image> {
    match init {
        Init::Named(name) if name == "random" => Ok(render(&random_attributes(seed))),
        Init::Named(name) => Err(ServiceError::BadInit(format!(
            "unknown init `{name}`, expected \"random\", {{\"preset\": ...}} or {{\"image_b64\": ...}}"
        ))),
        Init::Preset { preset } => AttributeVector::from_map(preset)
            .map(|a| render(&a))
            .ok_or_else(|| ServiceError::BadInit(format!("unknown attribute preset {preset:?}"))),
        Init::Upload { image_b64 } => decode_png(image_b64),
    }
}

impl Session {
    pub fn create(
        engine: &Engine,
        id: String,
        seed: u64,
        init: &Init,
        max_turns: usize,
        now: u64,
    ) -> ServiceResult<Self> {
        let x0 = engine.fit(&initial_image(init, seed)?).quantized();
        let h0 = engine.init_state(&x0)?;
        Ok(Self {
            id,
            seed,
            max_turns,
            created_at: now,
            last_active: now,
            initial_png: encode_png(&x0)?,
            states: vec![h0],
            turns: Vec::new(),
        })
    }

    pub fn turn_index(&self) -> usize {
        self.turns.len()
    }

    pub fn done(&self) -> bool {
        self.turns.len() >= self.max_turns
    }

    pub fn state(&self) -> &[f32] {
        self.states.last().expect("h_0 is always present")
    }

    /// Noise seed of turn `t` (1-based). Depends only on the session seed and
    /// the turn, so an undone turn replays with the same `ε_t`.
    pub fn noise_seed(&self, t: usize) -> u64 {
        stream_seed(self.seed, t as u64)
    }

    pub fn current_png(&self) -> &str {
        self.turns
            .last()
            .map_or(&self.initial_png, |t| &t.image_png)
    }

    /// Refuses full sessions and empty text before any model work.
    pub fn check_feedback(&self, engine: &Engine, text: &str) -> ServiceResult<()> {
        if self.done() {
            return Err(ServiceError::SessionFull {
                id: self.id.clone(),
                max_turns: self.max_turns,
            });
        }
        if engine.words(text).is_empty() {
            return Err(ServiceError::EmptyText);
        }
        Ok(())
    }

    pub fn feedback(
        &mut self,
        engine: &Engine,
        text: &str,
        now: u64,
    ) -> ServiceResult<&TurnRecord> {
        self.check_feedback(engine, text)?;
        let t = self.turns.len() + 1;
        let seed = self.noise_seed(t);
        let out = engine.feedback(self.state(), t - 1, text, seed)?;
        let heatmaps_png = out
            .heatmaps()
            .iter()
            .map(encode_png)
            .collect::<ServiceResult<Vec<_>>>()?;
        self.turns.push(TurnRecord {
            text: text.to_string(),
            words: out.words,
            noise_seed: seed,
            image_png: encode_png(&out.image)?,
            heatmaps_png,
        });
        self.states.push(out.h);
        self.last_active = now;
        Ok(self.turns.last().unwrap())
    }

    pub fn undo(&mut self, now: u64) -> ServiceResult<()> {
        if self.turns.is_empty() {
            return Err(ServiceError::NothingToUndo(self.id.clone()));
        }
        self.turns.pop();
        self.states.pop();
        self.last_active = now;
        Ok(())
    }
}
