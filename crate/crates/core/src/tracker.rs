//! Image encoder for the initial design and the GRU dialogue-state tracker.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, leaky_relu, Conv2d, GruCell, Init, Linear, VarBuilder};

/// Strided conv stack (4x4 kernels, stride 2, leaky ReLU 0.2) with global
/// average pooling. Emits `d_v` features.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    blocks: Vec<Conv2d>,
    image_size: usize,
}

impl ImageEncoder {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 3;
        for i in 0..cfg.down_blocks() {
            let cout = cfg.enc_channels << i;
            blocks.push(Conv2d::new(
                &vb.pp(&format!("conv{i}")),
                cin,
                cout,
                4,
                2,
                1,
                true,
            )?);
            cin = cout;
        }
        Ok(Self {
            blocks,
            image_size: cfg.image_size,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().map(|c| c.out_channels()).unwrap_or(3)
    }

    /// `images: (B, S, S, 3)` in `[-1, 1]` to `(B, d_v)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = images.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::shape(
                "image encoder input",
                format!("{0}x{0}x3", self.image_size),
                format!("{h}x{w}x{c}"),
            ));
        }
        let mut x = images.clone();
        for conv in &self.blocks {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        global_avg_pool(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpActivation {
    Identity,
    Tanh,
}

/// Dialogue context `h_t` for a batch of sessions, `(B, d_h)`.
#[derive(Debug, Clone)]
pub struct TrackerState {
    pub h: Tensor,
    pub turn_index: usize,
}

impl TrackerState {
    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            turn_index: self.turn_index,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateTracker {
    mlp: Linear,
    activation: MlpActivation,
    gru: GruCell,
}

impl StateTracker {
    pub fn new(vb: &VarBuilder, d_v: usize, d_e: usize, d_h: usize) -> Result<Self> {
        Ok(Self {
            mlp: Linear::new(&vb.pp("mlp"), d_v, d_h, true, Init::FanIn)?,
            activation: MlpActivation::Tanh,
            gru: GruCell::new(&vb.pp("gru"), d_e, d_h)?,
        })
    }

    pub fn with_activation(mut self, activation: MlpActivation) -> Self {
        self.activation = activation;
        self
    }

    pub fn d_h(&self) -> usize {
        self.gru.hidden()
    }

    /// `h_0 = MLP(v_0)`.
    pub fn init_state(&self, v0: &Tensor) -> Result<TrackerState> {
        let z = self.mlp.forward(v0)?;
        let h = match self.activation {
            MlpActivation::Identity => z,
            MlpActivation::Tanh => z.tanh()?,
        };
        Ok(TrackerState { h, turn_index: 0 })
    }

    /// `h_t = GRU(h_{t-1}, e_t)` with `sent: (B, d_e)`.
    pub fn step(&self, state: &TrackerState, sent: &Tensor) -> Result<TrackerState> {
        Ok(self.step_detailed(state, sent)?.0)
    }

    /// Also returns the candidate activation of the update.
    pub fn step_detailed(
        &self,
        state: &TrackerState,
        sent: &Tensor,
    ) -> Result<(TrackerState, Tensor)> {
        let (b, dh) = state.h.dims2()?;
        if dh != self.d_h() {
            return Err(Error::shape("tracker state", self.d_h(), dh));
        }
        let (sb, de) = sent.dims2()?;
        if de != self.gru.input_dim() || sb != b {
            return Err(Error::shape(
                "sentence feature",
                format!("{b}x{}", self.gru.input_dim()),
                format!("{sb}x{de}"),
            ));
        }
        let (h, cand, _) = self.gru.step_detailed(&state.h, sent)?;
        Ok((
            TrackerState {
                h,
                turn_index: state.turn_index + 1,
            },
            cand,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn zero_all(store: &ParamStore) {
        for (_, v) in store.entries() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn encoder_shape_and_rejection() {
        let store = ParamStore::new(DType::F32, 0);
        let cfg = ModelConfig::default();
        let enc = ImageEncoder::new(&store.root(), &cfg).unwrap();
        let x = Tensor::zeros((2, 64, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x).unwrap().dims(), &[2, 256]);
        let bad = Tensor::zeros((1, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_image_zero_weights() {
        let store = ParamStore::new(DType::F32, 0);
        let enc = ImageEncoder::new(&store.root(), &ModelConfig::default()).unwrap();
        zero_all(&store);
        let x = Tensor::zeros((1, 64, 64, 3), DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = enc
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_state_cases() {
        let store = ParamStore::new(DType::F64, 0);
        let tr = StateTracker::new(&store.root(), 4, 6, 4).unwrap();
        let v0 = Tensor::new(&[[0.3f64, -0.2, 0.9, 0.0]], &Device::Cpu).unwrap();
        let s = tr.init_state(&v0).unwrap();
        assert_eq!(s.h.dims(), &[1, 4]);
        assert_eq!(s.turn_index, 0);

        store
            .get("mlp.weight")
            .unwrap()
            .set(&Tensor::eye(4, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        store
            .get("mlp.bias")
            .unwrap()
            .set(&Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let ident = tr.clone().with_activation(MlpActivation::Identity);
        let h: Vec<Vec<f64>> = ident.init_state(&v0).unwrap().h.to_vec2().unwrap();
        assert_eq!(h, v0.to_vec2::<f64>().unwrap());

        zero_all(&store);
        let h: Vec<Vec<f64>> = tr.init_state(&v0).unwrap().h.to_vec2().unwrap();
        assert!(h[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_dimension_mismatch() {
        let store = ParamStore::new(DType::F32, 0);
        let tr = StateTracker::new(&store.root(), 8, 6, 4).unwrap();
        let s = TrackerState {
            h: Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap(),
            turn_index: 0,
        };
        let bad = Tensor::zeros((1, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(tr.step(&s, &bad).is_err());
        let ok = Tensor::zeros((1, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tr.step(&s, &ok).unwrap().turn_index, 1);
    }
}
