//! Read-only model wrapper: one attend, generate, step cycle per call.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqattn_core::checkpoint::Checkpoint;
use seqattn_core::gan::{sample_noise, word_heatmaps};
use seqattn_core::synth::hex_digest;
use seqattn_core::textenc::normalize;
use seqattn_core::tracker::TrackerState;
use seqattn_core::{Image, Result, SeqAttnGan, Trainer, Vocabulary};

/// Side of the upsampled per-word heatmaps.
pub const HEATMAP_SIZE: usize = 64;

/// Output of one feedback turn.
#[derive(Debug, Clone)]
pub struct TurnOutput {
    pub image: Image,
    /// Normalized tokens the model saw, one per heatmap.
    pub words: Vec<String>,
    /// Raw attention per word on the region grid, row-major.
    pub grids: Vec<Vec<f32>>,
    pub grid_side: usize,
    /// `h_t` after the tracker step.
    pub h: Vec<f32>,
}

impl TurnOutput {
    /// Word heatmaps bilinearly upsampled to `HEATMAP_SIZE`, as grey images
    /// whose 8-bit level is the attention weight times 255.
    pub fn heatmaps(&self) -> Vec<Image> {
        let s = self.grid_side;
        self.grids
            .iter()
            .map(|g| {
                let data: Vec<f32> = g.iter().flat_map(|&b| [2.0 * b - 1.0; 3]).collect();
                Image::new(s, s, data)
                    .expect("grid size")
                    .resize_bilinear(HEATMAP_SIZE, HEATMAP_SIZE)
            })
            .collect()
    }
}

pub struct Engine {
    model: SeqAttnGan,
    vocab: Vocabulary,
    model_hash: String,
}

impl Engine {
    pub fn new(model: SeqAttnGan, vocab: Vocabulary, model_hash: String) -> Self {
        Self {
            model,
            vocab,
            model_hash,
        }
    }

    /// The hash is the SHA-256 of the checkpoint file bytes.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        let trainer = Trainer::from_checkpoint(&ck)?;
        Ok(Self::new(trainer.model, trainer.vocab, hex_digest(bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| seqattn_core::Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn image_size(&self) -> usize {
        self.model.cfg.image_size
    }

    pub fn max_len(&self) -> usize {
        self.model.cfg.max_len
    }

    /// Brings any image to the model's square input size.
    pub fn fit(&self, img: &Image) -> Image {
        let s = self.image_size();
        if img.height == s && img.width == s {
            img.clone()
        } else {
            img.fit_square(s)
        }
    }

    /// Tokens the model will attend over; empty means nothing to say.
    pub fn words(&self, text: &str) -> Vec<String> {
        normalize(text).into_iter().take(self.max_len()).collect()
    }

    /// `h_0` for an initial image already at the model size.
    pub fn init_state(&self, x0: &Image) -> Result<Vec<f32>> {
        let state = self.model.init_state(&x0.to_tensor(DType::F32)?)?;
        row(&state.h)
    }

    /// Generates `x̂_t` from `h_{t-1}` and the feedback text, then steps the
    /// tracker. `noise_seed` fully determines `ε_t`.
    pub fn feedback(
        &self,
        h: &[f32],
        turn_index: usize,
        text: &str,
        noise_seed: u64,
    ) -> Result<TurnOutput> {
        let words = self.words(text);
        let ids = vec![self.vocab.tokenize(text, self.max_len())];
        let state = TrackerState {
            h: Tensor::from_slice(h, (1, h.len()), &candle_core::Device::Cpu)?,
            turn_index,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let eps = sample_noise(&mut rng, 1, self.model.cfg.d_z, DType::F32)?;
        let (g, next) = self.model.turn(&state, &ids, &eps)?;
        let side = self.model.cfg.grid_side;
        let grids = match &g.attention {
            Some(att) => {
                let maps = word_heatmaps(&att.weights, side)?.get(0)?;
                (0..words.len())
                    .map(|w| Ok(maps.get(w)?.flatten_all()?.to_vec1::<f32>()?))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok(TurnOutput {
            image: Image::from_tensor(&g.image, 0)?,
            words,
            grids,
            grid_side: side,
            h: row(&next.h)?,
        })
    }
}

fn row(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.get(0)?.to_dtype(DType::F32)?.to_vec1()?)
}
