//! Word-level image-text matching: pair construction, the matching score `R`,
//! the in-batch posterior and the bidirectional matching loss, plus the
//! region/word encoders the score runs on.

use std::sync::Arc;

use candle_core::{DType, Tensor, D};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{leaky_relu, softmax, unit_rows, Conv2d, Init, Linear, VarBuilder};
use crate::synth::{attribute_tokens, EditSequence};
use crate::textenc::{normalize, BatchEncoding, TextEncoder, Vocabulary};

const NORM_FLOOR: f64 = 1e-8;

/// Image `x_t` with the text `attrs(x_{t-1}) ++ o_t`.
#[derive(Debug, Clone)]
pub struct DamsmPair {
    pub image: Arc<Image>,
    pub text: Vec<String>,
}

pub fn pair_text(attrs: &crate::synth::Attributes, description: &str) -> Vec<String> {
    let mut text = attribute_tokens(attrs);
    text.extend(normalize(description));
    text
}

pub fn build_damsm_pairs(seq: &EditSequence) -> Vec<DamsmPair> {
    (0..seq.turns.len())
        .map(|t| DamsmPair {
            image: seq.turns[t].image.clone(),
            text: pair_text(seq.attrs_before(t + 1), &seq.turns[t].description),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub m: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
            m: 50,
        }
    }
}

impl MatchConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            gamma1: cfg.gamma1,
            gamma2: cfg.gamma2,
            gamma3: cfg.gamma3,
            m: cfg.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.gamma1, self.gamma2, self.gamma3]
            .iter()
            .any(|g| !(*g > 0.0))
            || self.m == 0
        {
            return Err(Error::Config(
                "match config needs positive gammas and M >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    unit_rows(x, NORM_FLOOR)
}

/// `R` for one image and one text: `regions: (N', d_s)`, `words: (L, d_s)`.
pub fn match_score(regions: &Tensor, words: &Tensor, cfg: &MatchConfig) -> Result<Tensor> {
    if words.dims2()?.0 == 0 {
        return Err(Error::EmptyTokens);
    }
    let r = score_matrix(&regions.unsqueeze(0)?, &words.unsqueeze(0)?, None, cfg)?;
    Ok(r.reshape(())?)
}

/// Per-word relevances `r[i, j, l]` of word `l` of text `j` against image `i`.
/// `regions: (Mi, N', d_s)`, `words: (Mt, L, d_s)`.
pub fn relevance(regions: &Tensor, words: &Tensor, cfg: &MatchConfig) -> Result<Tensor> {
    let (mi, _, d) = regions.dims3()?;
    let (mt, l, dw) = words.dims3()?;
    if d != dw {
        return Err(Error::shape("matching feature width", d, dw));
    }
    let reg = l2_normalize(regions)?;
    let wrd = l2_normalize(words)?;
    let flat_w = wrd.reshape((mt * l, d))?;
    // sims[i, (j,l), n] = cos(word (j,l), region (i,n))
    let sims = flat_w
        .broadcast_left(mi)?
        .contiguous()?
        .matmul(&reg.transpose(1, 2)?.contiguous()?)?;
    let alpha = softmax(&sims.affine(cfg.gamma1, 0.0)?)?;
    let context = l2_normalize(&alpha.matmul(&reg)?)?;
    let rel = context
        .broadcast_mul(&flat_w.unsqueeze(0)?)?
        .sum(D::Minus1)?;
    Ok(rel.reshape((mi, mt, l))?)
}

/// `R[i, j]` between image `i` and text `j`, `mask: (Mt, L)` selecting real words.
pub fn score_matrix(
    regions: &Tensor,
    words: &Tensor,
    mask: Option<&Tensor>,
    cfg: &MatchConfig,
) -> Result<Tensor> {
    let rel = relevance(regions, words, cfg)?;
    let mut e = rel.affine(cfg.gamma2, 0.0)?.exp()?;
    if let Some(m) = mask {
        e = e.broadcast_mul(&m.unsqueeze(0)?)?;
    }
    Ok(e.sum(D::Minus1)?.log()?.affine(1.0 / cfg.gamma2, 0.0)?)
}

/// Row-wise softmax of `gamma3 * R`: `P(text j | image i)`.
pub fn posterior(r: &Tensor, gamma3: f64) -> Result<Tensor> {
    softmax(&r.affine(gamma3, 0.0)?)
}

/// Both directions of the loss, each summed over the batch.
pub fn damsm_loss_terms(r: &Tensor, gamma3: f64) -> Result<(Tensor, Tensor)> {
    let m = r.dims2()?.0;
    let eye = Tensor::eye(m, r.dtype(), r.device())?;
    let nll = |p: &Tensor| -> Result<Tensor> {
        let diag = (p.log_sum_exp(D::Minus1)? - (p * &eye)?.sum(D::Minus1)?)?;
        Ok(diag.sum_all()?)
    };
    let scaled = r.affine(gamma3, 0.0)?;
    let i2t = nll(&scaled)?;
    let t2i = nll(&scaled.t()?.contiguous()?)?;
    Ok((i2t, t2i))
}

pub fn damsm_loss(r: &Tensor, gamma3: f64) -> Result<Tensor> {
    let (a, b) = damsm_loss_terms(r, gamma3)?;
    Ok((a + b)?)
}

/// Fraction of images whose best-scoring text is their own.
pub fn retrieval_accuracy(r: &Tensor) -> Result<f64> {
    let m = r.dims2()?.0;
    let rows: Vec<Vec<f64>> = r.to_dtype(DType::F64)?.to_vec2()?;
    let hits = rows
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                );
            best.0 == *i
        })
        .count();
    Ok(hits as f64 / m as f64)
}

/// Conv backbone emitting an 8x8 grid of region features projected to `d_s`.
#[derive(Debug, Clone)]
pub struct DamsmImageEncoder {
    blocks: Vec<Conv2d>,
    proj: Linear,
    image_size: usize,
}

impl DamsmImageEncoder {
    pub const GRID: usize = 8;

    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        let n = (cfg.image_size / Self::GRID).trailing_zeros() as usize;
        if cfg.image_size < Self::GRID {
            return Err(Error::Config("image smaller than the region grid".into()));
        }
        let mut blocks = Vec::new();
        let mut cin = 3;
        for i in 0..n {
            let cout = cfg.damsm_channels << i;
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
            proj: Linear::new(&vb.pp("proj"), cin, cfg.d_s, true, Init::FanIn)?,
            image_size: cfg.image_size,
        })
    }

    /// `(B, S, S, 3)` to `(B, 64, d_s)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = images.dims4()?;
        if h != self.image_size || w != self.image_size {
            return Err(Error::shape("matching image", self.image_size, h));
        }
        let mut x = images.clone();
        for conv in &self.blocks {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        let c = x.dims4()?.3;
        Ok(self
            .proj
            .forward(&x.reshape((b, Self::GRID * Self::GRID, c))?)?)
    }
}

/// The matching model: region encoder, text encoder and word projection.
#[derive(Debug, Clone)]
pub struct Damsm {
    pub image: DamsmImageEncoder,
    pub text: TextEncoder,
    pub word_proj: Linear,
    pub max_len: usize,
}

impl Damsm {
    pub fn new(vb: &VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            image: DamsmImageEncoder::new(&vb.pp("image"), cfg)?,
            text: TextEncoder::new(&vb.pp("text"), cfg.vocab_size, cfg.emb_dim, cfg.d_e)?,
            word_proj: Linear::new(&vb.pp("word_proj"), cfg.d_e, cfg.d_s, false, Init::FanIn)?,
            max_len: cfg.damsm_max_len(),
        })
    }

    pub fn token_ids(&self, vocab: &Vocabulary, pairs_text: &[Vec<String>]) -> Vec<Vec<u32>> {
        pairs_text
            .iter()
            .map(|t| vocab.tokenize(&t.join(" "), self.max_len))
            .collect()
    }

    /// Projected word features `(M, L, d_s)` with the padding mask.
    pub fn words(&self, ids: &[Vec<u32>]) -> Result<(Tensor, BatchEncoding)> {
        let enc = self.text.encode_batch(ids)?;
        Ok((self.word_proj.forward(&enc.words)?, enc))
    }

    pub fn scores(&self, images: &Tensor, ids: &[Vec<u32>], cfg: &MatchConfig) -> Result<Tensor> {
        let regions = self.image.forward(images)?;
        let (words, enc) = self.words(ids)?;
        score_matrix(&regions, &words, Some(&enc.mask), cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar_f64, to_vec_f64, ParamStore};
    use candle_core::Device;

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.to_vec()).collect();
        let n = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), n), &Device::Cpu).unwrap()
    }

    #[test]
    fn match_score_fixtures() {
        let cfg = MatchConfig::default();
        let v = t2(&[&[0.6, 0.8]]);
        let r = scalar_f64(&match_score(&v, &v, &cfg).unwrap()).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let w = t2(&[&[-0.8, 0.6]]);
        let r = scalar_f64(&match_score(&v, &w, &cfg).unwrap()).unwrap();
        assert!(r.abs() < 1e-12);
        let words = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let region = t2(&[&[1.0, 0.0]]);
        let r = scalar_f64(&match_score(&region, &words, &cfg).unwrap()).unwrap();
        let oracle = (5f64.exp() + 1.0).ln() / 5.0;
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 1.00134).abs() < 1e-4);
    }

    #[test]
    fn posterior_fixtures() {
        let p = to_vec_f64(&posterior(&t2(&[&[1.0, 0.0]]), 10.0).unwrap()).unwrap();
        assert!((p[0] - 0.9999546).abs() < 1e-6 && (p[1] - 0.0000454).abs() < 1e-6);
        let p = to_vec_f64(&posterior(&t2(&[&[0.3, 0.3]]), 10.0).unwrap()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = to_vec_f64(&posterior(&t2(&[&[-4.0]]), 10.0).unwrap()).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn loss_fixtures() {
        let uniform = Tensor::full(0.7f64, (4, 4), &Device::Cpu).unwrap();
        let l = scalar_f64(&damsm_loss(&uniform, 10.0).unwrap()).unwrap();
        assert!((l - 8.0 * 4f64.ln()).abs() < 1e-9);
        assert!((l - 11.0904).abs() < 1e-4);
        let one = t2(&[&[3.0]]);
        assert_eq!(scalar_f64(&damsm_loss(&one, 10.0).unwrap()).unwrap(), 0.0);
        let sym = t2(&[&[1.0, 0.2, 0.3], &[0.2, 0.5, 0.1], &[0.3, 0.1, 0.9]]);
        let (a, b) = damsm_loss_terms(&sym, 10.0).unwrap();
        assert!((scalar_f64(&a).unwrap() - scalar_f64(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pairs_put_attributes_first() {
        let mut attrs = crate::synth::Attributes::new();
        attrs.insert("color".into(), "red".into());
        attrs.insert("heel".into(), "flat".into());
        assert_eq!(
            pair_text(&attrs, "make it blue"),
            vec!["red", "flat", "make", "it", "blue"]
        );
        assert_eq!(
            pair_text(&Default::default(), "Make it blue"),
            vec!["make", "it", "blue"]
        );
    }

    #[test]
    fn batched_matrix_matches_single_scores() {
        let cfg = MatchConfig::default();
        let regions = Tensor::randn(0f64, 1.0, (3, 5, 4), &Device::Cpu).unwrap();
        let words = Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let mask = t2(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 0.0]]);
        let r: Vec<Vec<f64>> = score_matrix(&regions, &words, Some(&mask), &cfg)
            .unwrap()
            .to_vec2()
            .unwrap();
        for i in 0..3 {
            for (j, len) in [(0, 3), (1, 2)] {
                let single = match_score(
                    &regions.get(i).unwrap(),
                    &words.get(j).unwrap().narrow(0, 0, len).unwrap(),
                    &cfg,
                )
                .unwrap();
                assert!((r[i][j] - scalar_f64(&single).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_shapes() {
        let store = ParamStore::new(DType::F32, 0);
        let cfg = ModelConfig::desk();
        let m = Damsm::new(&store.root(), &cfg).unwrap();
        let imgs = Tensor::zeros((2, 64, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.image.forward(&imgs).unwrap().dims(), &[2, 64, cfg.d_s]);
        let r = m
            .scores(&imgs, &[vec![4, 5], vec![6]], &MatchConfig::default())
            .unwrap();
        assert_eq!(r.dims(), &[2, 2]);
    }
}
