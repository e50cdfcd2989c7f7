//! Up-sampling module, sequential word attention, the shared generator and
//! joint conditional/unconditional discriminator, and the adversarial losses.
//!
//! Region maps are stored row-major as `(B, N, d_h)`: row `i` is the feature of
//! region `i` on a `grid_side x grid_side` grid.

use candle_core::{DType, Device, Tensor, D};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, pixel_norm, sigmoid, softmax, tile_spatial, upsample2x, Conv2d, Init, Linear,
    VarBuilder,
};

/// Probabilities are kept inside `[P_MIN, 1 - P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-7;

const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct RegionFeatureMap {
    pub feats: Tensor,
    pub grid_side: usize,
}

/// `F`: dense map `d_h -> d_h * N`, reshaped to the region grid, then one 3x3 conv.
#[derive(Debug, Clone)]
pub struct Upsampler {
    linear: Linear,
    conv: Conv2d,
    grid_side: usize,
    d_h: usize,
}

impl Upsampler {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.regions();
        Ok(Self {
            linear: Linear::new(&vb.pp("linear"), cfg.d_h, cfg.d_h * n, true, Init::FanIn)?,
            conv: Conv2d::new(&vb.pp("conv"), cfg.d_h, cfg.d_h, 3, 1, 1, true)?,
            grid_side: cfg.grid_side,
            d_h: cfg.d_h,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<RegionFeatureMap> {
        let (b, dh) = h.dims2()?;
        if dh != self.d_h {
            return Err(Error::shape("upsample input", self.d_h, dh));
        }
        let s = self.grid_side;
        let grid = self.linear.forward(h)?.reshape((b, s, s, dh))?;
        let feats = self.conv.forward(&grid)?.reshape((b, s * s, dh))?;
        Ok(RegionFeatureMap {
            feats,
            grid_side: s,
        })
    }
}

/// Scores `s[i, j]`, weights `beta[i, j]` (softmax over words), and the
/// word-context rows `c_i = sum_j beta[i, j] * W e_j`, each batched.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub scores: Tensor,
    pub weights: Tensor,
    pub context: Tensor,
}

/// Learned word projection `d_e -> d_h` feeding the attention dot products.
#[derive(Debug, Clone)]
pub struct WordAttention {
    pub projection: Linear,
}

impl WordAttention {
    pub fn new(vb: &VarBuilder, d_e: usize, d_h: usize) -> Result<Self> {
        Ok(Self {
            projection: Linear::new(&vb.pp("proj"), d_e, d_h, false, Init::FanIn)?,
        })
    }

    pub fn forward(
        &self,
        words: &Tensor,
        mask: Option<&Tensor>,
        regions: &RegionFeatureMap,
    ) -> Result<AttentionResult> {
        attend(words, mask, &regions.feats, &self.projection)
    }
}

/// `words: (B, L, d_e)`, `mask: (B, L)` with 1 on real tokens,
/// `regions: (B, N, d_h)`.
pub fn attend(
    words: &Tensor,
    mask: Option<&Tensor>,
    regions: &Tensor,
    projection: &Linear,
) -> Result<AttentionResult> {
    let (b, l, _) = words.dims3()?;
    let (rb, _, dh) = regions.dims3()?;
    if rb != b || projection.out_dim() != dh {
        return Err(Error::shape(
            "attention operands",
            format!("batch {b}, d_h {}", projection.out_dim()),
            format!("batch {rb}, d_h {dh}"),
        ));
    }
    if l == 0 {
        return Err(Error::EmptyTokens);
    }
    let projected = projection.forward(words)?;
    let scores = regions.matmul(&projected.transpose(1, 2)?.contiguous()?)?;
    let logits = match mask {
        Some(m) => {
            let penalty = m.affine(-MASK_NEG, MASK_NEG)?.unsqueeze(1)?;
            scores.broadcast_add(&penalty)?
        }
        None => scores.clone(),
    };
    let weights = softmax(&logits)?;
    let context = weights.matmul(&projected)?;
    Ok(AttentionResult {
        scores,
        weights,
        context,
    })
}

/// Image generator `G(h', eps)`: noise tiled and concatenated channel-wise to
/// the region map, then nearest-upsample + conv blocks (each pixel-normalized)
/// to a tanh RGB head.
#[derive(Debug, Clone)]
pub struct Generator {
    conv_in: Conv2d,
    ups: Vec<Conv2d>,
    to_rgb: Conv2d,
    grid_side: usize,
    d_z: usize,
    in_channels: usize,
}

impl Generator {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig, in_channels: usize) -> Result<Self> {
        let n_up = cfg.up_blocks();
        let mut ch = cfg.gen_channels << n_up;
        let conv_in = Conv2d::new(&vb.pp("conv_in"), in_channels + cfg.d_z, ch, 3, 1, 1, true)?;
        let mut ups = Vec::new();
        for i in 0..n_up {
            let next = ch / 2;
            ups.push(Conv2d::new(
                &vb.pp(&format!("up{i}")),
                ch,
                next,
                3,
                1,
                1,
                true,
            )?);
            ch = next;
        }
        let to_rgb = Conv2d::new(&vb.pp("to_rgb"), ch, 3, 3, 1, 1, true)?;
        Ok(Self {
            conv_in,
            ups,
            to_rgb,
            grid_side: cfg.grid_side,
            d_z: cfg.d_z,
            in_channels,
        })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// `context: (B, N, C)`, `eps: (B, d_z)` to `(B, S, S, 3)` in `[-1, 1]`.
    pub fn forward(&self, context: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let (b, n, c) = context.dims3()?;
        let s = self.grid_side;
        if n != s * s || c != self.in_channels {
            return Err(Error::shape(
                "generator context",
                format!("{}x{}", s * s, self.in_channels),
                format!("{n}x{c}"),
            ));
        }
        let (eb, dz) = eps.dims2()?;
        if eb != b || dz != self.d_z {
            return Err(Error::shape(
                "noise",
                format!("{b}x{}", self.d_z),
                format!("{eb}x{dz}"),
            ));
        }
        let grid = context.reshape((b, s, s, c))?;
        let noise = tile_spatial(eps, s, s)?;
        let mut x = pixel_norm(&leaky_relu(
            &self.conv_in.forward(&Tensor::cat(&[grid, noise], 3)?)?,
            0.2,
        )?)?;
        for conv in &self.ups {
            x = pixel_norm(&leaky_relu(&conv.forward(&upsample2x(&x)?)?, 0.2)?)?;
        }
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

/// Discriminator probabilities `D(x)` and `D(x, e)`, each `(B,)`.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub uncond: Tensor,
    pub cond: Tensor,
}

impl DiscOutput {
    /// Builds an output directly from probabilities (clamped like the model's).
    pub fn from_probs(uncond: &[f64], cond: &[f64]) -> Result<Self> {
        if uncond.len() != cond.len() || uncond.is_empty() {
            return Err(Error::InvalidArgument(
                "probability lists must be equal and nonempty".into(),
            ));
        }
        let mk = |v: &[f64]| -> Result<Tensor> {
            Ok(Tensor::from_slice(v, v.len(), &Device::Cpu)?.clamp(P_MIN, 1.0 - P_MIN)?)
        };
        Ok(Self {
            uncond: mk(uncond)?,
            cond: mk(cond)?,
        })
    }

    pub fn len(&self) -> usize {
        self.uncond.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    backbone: Vec<Conv2d>,
    uncond_head: Conv2d,
    cond_proj: Linear,
    cond_conv: Conv2d,
    cond_head: Conv2d,
}

impl Discriminator {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut backbone = Vec::new();
        let mut cin = 3;
        for i in 0..cfg.down_blocks() {
            let cout = cfg.disc_channels << i;
            backbone.push(Conv2d::spectral(
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
            backbone,
            uncond_head: Conv2d::spectral(&vb.pp("uncond"), cin, 1, 4, 1, 0, true)?,
            cond_proj: Linear::spectral(
                &vb.pp("cond_proj"),
                cfg.d_e,
                cfg.d_cond,
                true,
                Init::FanIn,
            )?,
            cond_conv: Conv2d::spectral(&vb.pp("cond_conv"), cin + cfg.d_cond, cin, 3, 1, 1, true)?,
            cond_head: Conv2d::spectral(&vb.pp("cond"), cin, 1, 4, 1, 0, true)?,
        })
    }

    /// Moves every spectral-norm vector `iters` power steps towards the
    /// current weights. Called after each discriminator update.
    pub fn update_spectral(&self, iters: usize) -> Result<()> {
        for conv in
            self.backbone
                .iter()
                .chain([&self.uncond_head, &self.cond_conv, &self.cond_head])
        {
            conv.update_spectral(iters)?;
        }
        self.cond_proj.update_spectral(iters)
    }

    /// Returns `(uncond_logit, cond_logit)`, each `(B,)`.
    pub fn logits(&self, images: &Tensor, sent: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = images.dims4()?.0;
        let mut x = images.clone();
        for conv in &self.backbone {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        let (_, h, w, _) = x.dims4()?;
        let uncond = self.uncond_head.forward(&x)?.reshape(b)?;
        let cond_vec = leaky_relu(&self.cond_proj.forward(sent)?, 0.2)?;
        let joint = Tensor::cat(&[x, tile_spatial(&cond_vec, h, w)?], 3)?;
        let joint = leaky_relu(&self.cond_conv.forward(&joint)?, 0.2)?;
        let cond = self.cond_head.forward(&joint)?.reshape(b)?;
        Ok((uncond, cond))
    }

    pub fn forward(&self, images: &Tensor, sent: &Tensor) -> Result<DiscOutput> {
        let (u, c) = self.logits(images, sent)?;
        Ok(DiscOutput {
            uncond: sigmoid(&u)?.clamp(P_MIN, 1.0 - P_MIN)?,
            cond: sigmoid(&c)?.clamp(P_MIN, 1.0 - P_MIN)?,
        })
    }
}

/// Batch mean of `-1/2 log D(x^) - 1/2 log D(x^, e)`.
pub fn loss_g(fake: &DiscOutput) -> Result<Tensor> {
    let per = (fake.uncond.log()? + fake.cond.log()?)?.affine(-0.5, 0.0)?;
    Ok(per.mean_all()?)
}

/// Batch mean of the four-term discriminator objective.
pub fn loss_d(real: &DiscOutput, fake: &DiscOutput) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::shape("loss_d batches", real.len(), fake.len()));
    }
    let one_minus = |t: &Tensor| -> Result<Tensor> { Ok(t.affine(-1.0, 1.0)?.log()?) };
    let per = (((real.uncond.log()? + one_minus(&fake.uncond)?)? + real.cond.log()?)?
        + one_minus(&fake.cond)?)?
    .affine(-0.5, 0.0)?;
    Ok(per.mean_all()?)
}

/// Spatially averaged attention map per word: `(B, N, L)` to `(B, L, side, side)`.
pub fn word_heatmaps(weights: &Tensor, grid_side: usize) -> Result<Tensor> {
    let (b, _, l) = weights.dims3()?;
    Ok(weights
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, l, grid_side, grid_side))?)
}

/// Standard-normal noise `(B, d_z)` from a seeded stream.
pub fn sample_noise(
    rng: &mut impl rand::Rng,
    batch: usize,
    d_z: usize,
    dtype: DType,
) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f32> = (0..batch * d_z)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(v, (batch, d_z), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn row_sums(weights: &Tensor) -> Result<Vec<f64>> {
    crate::nn::to_vec_f64(&weights.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar_f64, ParamStore};
    use candle_core::DType;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn loss_fixtures() {
        let half = DiscOutput::from_probs(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let lg = scalar_f64(&loss_g(&half).unwrap()).unwrap();
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-12);
        let ld = scalar_f64(&loss_d(&half, &half).unwrap()).unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let fooled = DiscOutput::from_probs(&[1.0], &[1.0]).unwrap();
        assert!(scalar_f64(&loss_g(&fooled).unwrap()).unwrap() < 1e-6);

        let mixed = DiscOutput::from_probs(&[0.8], &[0.5]).unwrap();
        let expect = -0.5 * 0.8f64.ln() - 0.5 * 0.5f64.ln();
        assert!((scalar_f64(&loss_g(&mixed).unwrap()).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.4581).abs() < 1e-4);

        let real = DiscOutput::from_probs(&[0.9], &[0.9]).unwrap();
        let fake = DiscOutput::from_probs(&[0.1], &[0.1]).unwrap();
        let ld = scalar_f64(&loss_d(&real, &fake).unwrap()).unwrap();
        assert!((ld - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((ld - 0.2107).abs() < 1e-4);

        let perfect_r = DiscOutput::from_probs(&[1.0], &[1.0]).unwrap();
        let perfect_f = DiscOutput::from_probs(&[0.0], &[0.0]).unwrap();
        assert!(scalar_f64(&loss_d(&perfect_r, &perfect_f).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn attention_hand_example() {
        let store = ParamStore::new(DType::F64, 0);
        let proj = Linear::new(&store.root().pp("p"), 2, 2, false, Init::Zeros).unwrap();
        store
            .get("p.weight")
            .unwrap()
            .set(&Tensor::eye(2, DType::F64, &dev()).unwrap())
            .unwrap();
        let words = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0]]], &dev()).unwrap();
        let regions = Tensor::new(&[[[1.0f64, 0.0]]], &dev()).unwrap();
        let r = attend(&words, None, &regions, &proj).unwrap();
        let w: Vec<f64> = r.weights.flatten_all().unwrap().to_vec1().unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let c: Vec<f64> = r.context.flatten_all().unwrap().to_vec1().unwrap();
        assert!((c[0] - 0.7311).abs() < 1e-4 && (c[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn attention_zero_region_and_single_word() {
        let store = ParamStore::new(DType::F64, 1);
        let proj = Linear::new(&store.root().pp("p"), 3, 2, false, Init::FanIn).unwrap();
        let words = Tensor::randn(0f64, 1.0, (1, 4, 3), &dev()).unwrap();
        let regions = Tensor::zeros((1, 5, 2), DType::F64, &dev()).unwrap();
        let r = attend(&words, None, &regions, &proj).unwrap();
        let w: Vec<f64> = r.weights.flatten_all().unwrap().to_vec1().unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        let mean = proj.forward(&words).unwrap().mean(1).unwrap();
        let mean: Vec<f64> = mean.flatten_all().unwrap().to_vec1().unwrap();
        let c: Vec<Vec<f64>> = r.context.squeeze(0).unwrap().to_vec2().unwrap();
        for row in c {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let one = words.narrow(1, 0, 1).unwrap();
        let regions = Tensor::randn(0f64, 1.0, (1, 5, 2), &dev()).unwrap();
        let r = attend(&one, None, &regions, &proj).unwrap();
        let w: Vec<f64> = r.weights.flatten_all().unwrap().to_vec1().unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn masked_words_get_zero_weight() {
        let store = ParamStore::new(DType::F64, 2);
        let proj = Linear::new(&store.root().pp("p"), 3, 4, false, Init::FanIn).unwrap();
        let words = Tensor::randn(0f64, 1.0, (1, 3, 3), &dev()).unwrap();
        let regions = Tensor::randn(0f64, 1.0, (1, 6, 4), &dev()).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev()).unwrap();
        let r = attend(&words, Some(&mask), &regions, &proj).unwrap();
        let full = attend(&words.narrow(1, 0, 2).unwrap(), None, &regions, &proj).unwrap();
        let w: Vec<Vec<f64>> = r.weights.squeeze(0).unwrap().to_vec2().unwrap();
        let f: Vec<Vec<f64>> = full.weights.squeeze(0).unwrap().to_vec2().unwrap();
        for (a, b) in w.iter().zip(&f) {
            assert_eq!(a[2], 0.0);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_generate_discriminate_shapes() {
        let store = ParamStore::new(DType::F32, 0);
        let cfg = ModelConfig::default();
        let vb = store.root();
        let up = Upsampler::new(&vb.pp("up"), &cfg).unwrap();
        let h = Tensor::randn(0f32, 1.0, (2, 128), &dev()).unwrap();
        let map = up.forward(&h).unwrap();
        assert_eq!(map.feats.dims(), &[2, 256, 128]);
        let again = up.forward(&h).unwrap();
        assert_eq!(
            map.feats.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.feats.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(up
            .forward(&Tensor::zeros((1, 7), DType::F32, &dev()).unwrap())
            .is_err());

        let gen = Generator::new(&vb.pp("gen"), &cfg, cfg.d_h).unwrap();
        let eps = Tensor::randn(0f32, 1.0, (2, 100), &dev()).unwrap();
        let img = gen.forward(&map.feats, &eps).unwrap();
        assert_eq!(img.dims(), &[2, 64, 64, 3]);

        let disc = Discriminator::new(&vb.pp("disc"), &cfg).unwrap();
        let sent = Tensor::randn(0f32, 1.0, (2, 300), &dev()).unwrap();
        let out = disc.forward(&img, &sent).unwrap();
        for p in crate::nn::to_vec_f64(&out.uncond)
            .unwrap()
            .into_iter()
            .chain(crate::nn::to_vec_f64(&out.cond).unwrap())
        {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_weights_edge_cases() {
        let store = ParamStore::new(DType::F32, 0);
        let mut cfg = ModelConfig::default();
        cfg.image_size = 16;
        cfg.grid_side = 4;
        let vb = store.root();
        let up = Upsampler::new(&vb.pp("up"), &cfg).unwrap();
        let disc = Discriminator::new(&vb.pp("disc"), &cfg).unwrap();
        for (_, v) in store.entries() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let map = up
            .forward(&Tensor::zeros((1, 128), DType::F32, &dev()).unwrap())
            .unwrap();
        assert!(crate::nn::to_vec_f64(&map.feats)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let img = Tensor::randn(0f32, 0.5, (1, 16, 16, 3), &dev()).unwrap();
        let sent = Tensor::randn(0f32, 1.0, (1, 300), &dev()).unwrap();
        let out = disc.forward(&img, &sent).unwrap();
        assert_eq!(crate::nn::to_vec_f64(&out.uncond).unwrap(), vec![0.5]);
        assert_eq!(crate::nn::to_vec_f64(&out.cond).unwrap(), vec![0.5]);
    }
}
