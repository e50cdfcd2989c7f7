//! Small attribute classifier whose posteriors and penultimate features back
//! the IS and FID numbers.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{apply_arrays, capture_arrays, decode_array_file, encode_array_file};
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::nn::{leaky_relu, softmax, Adam, Conv2d, Init, Linear, ParamStore};
use crate::synth::{
    augment, hex_digest, render_canvas, AttributeVector, CROP, NUM_ATTRIBUTE_VECTORS,
};

pub const PROXY_MAGIC: &[u8; 4] = b"SQPX";
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 48,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub struct ProxyNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
    feat: Linear,
    head: Linear,
}

impl ProxyNet {
    pub fn new(seed: u64) -> Result<Self> {
        let store = ParamStore::new(DType::F32, seed);
        let vb = store.root();
        let widths = [3, 16, 32, 64, 64];
        let convs = (0..4)
            .map(|i| {
                Conv2d::new(
                    &vb.pp(&format!("conv{i}")),
                    widths[i],
                    widths[i + 1],
                    4,
                    2,
                    1,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let feat = Linear::new(&vb.pp("feat"), 64 * 16, FEATURE_DIM, true, Init::FanIn)?;
        let head = Linear::new(
            &vb.pp("head"),
            FEATURE_DIM,
            NUM_ATTRIBUTE_VECTORS,
            true,
            Init::FanIn,
        )?;
        Ok(Self {
            store,
            convs,
            feat,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        NUM_ATTRIBUTE_VECTORS
    }

    fn logits_and_features(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, _) = images.dims4()?;
        if h != CROP || w != CROP {
            return Err(Error::shape("proxy input", CROP, h));
        }
        let mut x = images.clone();
        for c in &self.convs {
            x = leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        let f = self.feat.forward(&x.reshape((b, ()))?)?;
        let logits = self.head.forward(&leaky_relu(&f, 0.2)?)?;
        Ok((logits, f))
    }

    fn batches<'a>(&self, images: &'a [Image]) -> impl Iterator<Item = &'a [Image]> {
        images.chunks(64)
    }

    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in self.batches(images) {
            let t = stack(&chunk.iter().collect::<Vec<_>>(), DType::F32)?;
            let (_, f) = self.logits_and_features(&t)?;
            out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn probs(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in self.batches(images) {
            let t = stack(&chunk.iter().collect::<Vec<_>>(), DType::F32)?;
            let (l, _) = self.logits_and_features(&t)?;
            out.extend(softmax(&l)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Top-1 class per image.
    pub fn classify(&self, images: &[Image]) -> Result<Vec<usize>> {
        Ok(self
            .probs(images)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |a, (i, &v)| if v > a.1 { (i, v) } else { a },
                    )
                    .0
            })
            .collect())
    }

    /// Fits the classifier to augmented renders of every attribute vector.
    /// Returns the final-step training loss.
    pub fn train(&mut self, cfg: &ProxyTrainConfig) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let canvases: Vec<Image> = AttributeVector::all().map(|a| render_canvas(&a)).collect();
        let mut opt = Adam::new(self.store.vars_with_prefix(""), cfg.lr, 0.9, 0.999)?;
        let mut order: Vec<usize> = Vec::new();
        let mut last = f64::NAN;
        for _ in 0..cfg.steps {
            if order.len() < cfg.batch_size {
                let mut fresh: Vec<usize> = (0..canvases.len()).collect();
                fresh.shuffle(&mut rng);
                order.extend(fresh);
            }
            let idx: Vec<usize> = order.drain(..cfg.batch_size).collect();
            let imgs: Vec<Image> = idx
                .iter()
                .map(|&i| augment(&canvases[i], &mut rng, CROP))
                .collect();
            let x = stack(&imgs.iter().collect::<Vec<_>>(), DType::F32)?;
            let y = Tensor::from_vec(
                idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                idx.len(),
                x.device(),
            )?;
            let (logits, _) = self.logits_and_features(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            last = loss.to_scalar::<f32>()? as f64;
            opt.step(&loss.backward()?)?;
        }
        Ok(last)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode_array_file(
            &capture_arrays(&self.store)?,
            PROXY_MAGIC,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let net = Self::new(0)?;
        apply_arrays(&decode_array_file(bytes, PROXY_MAGIC)?, &net.store)?;
        Ok(net)
    }

    /// SHA-256 of the serialized weights.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fraction of images whose top class matches the label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render;

    #[test]
    fn bytes_round_trip_preserves_outputs() {
        let net = ProxyNet::new(5).unwrap();
        let imgs: Vec<Image> = AttributeVector::all().take(3).map(|a| render(&a)).collect();
        let back = ProxyNet::from_bytes(&net.to_bytes().unwrap()).unwrap();
        assert_eq!(net.features(&imgs).unwrap(), back.features(&imgs).unwrap());
        assert_eq!(net.hash().unwrap(), back.hash().unwrap());
        let p = net.probs(&imgs).unwrap();
        assert_eq!(p[0].len(), 288);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}
