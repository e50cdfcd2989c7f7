//! The assembled sequential generator and its turn-by-turn unroll.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gan::{AttentionResult, Discriminator, Generator, Upsampler, WordAttention};
use crate::nn::{tile_spatial, VarBuilder};
use crate::textenc::{BatchEncoding, TextEncoder};
use crate::tracker::{ImageEncoder, StateTracker, TrackerState};

/// Parameter-name prefix of everything updated on the generator step.
pub const GEN_PREFIX: &str = "gan.";
pub const DISC_PREFIX: &str = "disc.";
pub const DAMSM_PREFIX: &str = "damsm.";

/// Text encoder, image encoder, tracker, up-sampler, attention and generator.
/// One instance serves every turn.
#[derive(Debug, Clone)]
pub struct SeqAttnGan {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub tracker: StateTracker,
    pub upsampler: Upsampler,
    pub attention: WordAttention,
    pub generator: Generator,
}

/// What one turn of the generator produced.
#[derive(Debug, Clone)]
pub struct GeneratedTurn {
    pub image: Tensor,
    pub attention: Option<AttentionResult>,
    pub text: BatchEncoding,
    /// `h_{t-1}` fed into this turn.
    pub prev_state: TrackerState,
}

impl SeqAttnGan {
    /// Builds under `vb` (conventionally the `gan` prefix).
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            text: TextEncoder::new(&vb.pp("text"), cfg.vocab_size, cfg.emb_dim, cfg.d_e)?,
            image_encoder: ImageEncoder::new(&vb.pp("img_enc"), cfg)?,
            tracker: StateTracker::new(&vb.pp("tracker"), cfg.d_v(), cfg.d_e, cfg.d_h)?,
            upsampler: Upsampler::new(&vb.pp("up"), cfg)?,
            attention: WordAttention::new(&vb.pp("attn"), cfg.d_e, cfg.d_h)?,
            generator: Generator::new(&vb.pp("gen"), cfg, 2 * cfg.d_h)?,
        })
    }

    /// `h_0` from the initial images `(B, S, S, 3)`.
    pub fn init_state(&self, x0: &Tensor) -> Result<TrackerState> {
        self.tracker.init_state(&self.image_encoder.forward(x0)?)
    }

    /// Generator input for one turn: the region map of `h_{t-1}` joined with
    /// the word context (or, without attention, the tiled projected sentence).
    pub fn condition(
        &self,
        h: &Tensor,
        text: &BatchEncoding,
    ) -> Result<(Tensor, Option<AttentionResult>)> {
        let regions = self.upsampler.forward(h)?;
        if self.cfg.use_attention {
            let att = self
                .attention
                .forward(&text.words, Some(&text.mask), &regions)?;
            let input = Tensor::cat(&[&regions.feats, &att.context], 2)?;
            Ok((input, Some(att)))
        } else {
            let s = regions.grid_side;
            let sent = self.attention.projection.forward(&text.sent)?;
            let tiled =
                tile_spatial(&sent, s, s)?.reshape((sent.dims()[0], s * s, self.cfg.d_h))?;
            Ok((Tensor::cat(&[&regions.feats, &tiled], 2)?, None))
        }
    }

    /// One full turn: generate from `h_{t-1}` and the description, then
    /// advance the tracker with the sentence feature.
    pub fn turn(
        &self,
        state: &TrackerState,
        ids: &[Vec<u32>],
        eps: &Tensor,
    ) -> Result<(GeneratedTurn, TrackerState)> {
        let b = state.h.dims2()?.0;
        if ids.len() != b {
            return Err(Error::shape("turn batch", b, ids.len()));
        }
        let text = self.text.encode_batch(ids)?;
        let (input, attention) = self.condition(&state.h, &text)?;
        let image = self.generator.forward(&input, eps)?;
        let next = self.tracker.step(state, &text.sent)?;
        Ok((
            GeneratedTurn {
                image,
                attention,
                text,
                prev_state: state.clone(),
            },
            next,
        ))
    }

    /// Unrolls a batch whose sequences are sorted by decreasing length:
    /// `turn_ids[t]` holds the descriptions of the sequences still active at
    /// turn `t` (a prefix of the batch), `noise[t]` their noise vectors.
    pub fn unroll(
        &self,
        x0: &Tensor,
        turn_ids: &[Vec<Vec<u32>>],
        noise: &[Tensor],
    ) -> Result<Vec<GeneratedTurn>> {
        if turn_ids.len() != noise.len() {
            return Err(Error::shape("noise per turn", turn_ids.len(), noise.len()));
        }
        let mut state = self.init_state(x0)?;
        let mut out = Vec::with_capacity(turn_ids.len());
        for (ids, eps) in turn_ids.iter().zip(noise) {
            let active = ids.len();
            let b = state.h.dims2()?.0;
            if active == 0 || active > b {
                return Err(Error::InvalidArgument(format!(
                    "turn has {active} active sequences of {b}"
                )));
            }
            if active < b {
                state = TrackerState {
                    h: state.h.narrow(0, 0, active)?,
                    turn_index: state.turn_index,
                };
            }
            let (g, next) = self.turn(&state, ids, eps)?;
            out.push(g);
            state = next;
        }
        Ok(out)
    }
}

/// The discriminator lives under its own prefix so each optimizer sees only
/// its side.
pub fn build_discriminator(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Discriminator> {
    Discriminator::new(&vb.pp("disc"), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            grid_side: 4,
            d_e: 8,
            d_h: 6,
            d_z: 3,
            d_s: 4,
            emb_dim: 5,
            d_cond: 4,
            gen_channels: 2,
            disc_channels: 2,
            enc_channels: 2,
            damsm_channels: 2,
            vocab_size: 12,
            max_len: 8,
            use_attention: true,
        }
    }

    #[test]
    fn unroll_counts_and_ablation() {
        for attn in [true, false] {
            let mut cfg = tiny();
            cfg.use_attention = attn;
            let store = ParamStore::new(DType::F32, 3);
            let m = SeqAttnGan::new(&store.root().pp("gan"), &cfg).unwrap();
            let x0 = Tensor::zeros((2, 16, 16, 3), DType::F32, &Device::Cpu).unwrap();
            let ids = vec![
                vec![vec![4, 5], vec![6]],
                vec![vec![7, 8, 9], vec![4]],
                vec![vec![5]],
            ];
            let noise: Vec<Tensor> = ids
                .iter()
                .map(|t| Tensor::zeros((t.len(), 3), DType::F32, &Device::Cpu).unwrap())
                .collect();
            let n_params = store.len();
            let out = m.unroll(&x0, &ids, &noise).unwrap();
            assert_eq!(out.len(), 3);
            assert_eq!(out[2].image.dims(), &[1, 16, 16, 3]);
            assert_eq!(out.iter().all(|g| g.attention.is_some()), attn);
            assert_eq!(out[2].prev_state.turn_index, 2);
            assert_eq!(store.len(), n_params);
        }
    }
}
