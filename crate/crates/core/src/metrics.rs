//! SSIM, Inception Score, Fréchet distance, the attribute color decoder and
//! the held-out evaluation report.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::sample_noise;
use crate::image::{stack, Image};
use crate::model::SeqAttnGan;
use crate::proxy::ProxyNet;
use crate::synth::{body_mask, AttributeVector, Augment, Color, EditSequence, CROP};
use crate::textenc::Vocabulary;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + j];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over 11x11 Gaussian windows (sigma 1.5) with
/// pixel values mapped from `[-1, 1]` to `[0, 1]`, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            "ssim operands",
            format!("{}x{}", a.height, a.width),
            format!("{}x{}", b.height, b.width),
        ));
    }
    let (h, w) = (a.height, a.width);
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w)
            .map(|i| (a.data[i * 3 + c] as f64 + 1.0) / 2.0)
            .collect();
        let pb: Vec<f64> = (0..h * w)
            .map(|i| (b.data[i * 3 + c] as f64 + 1.0) / 2.0)
            .collect();
        let sq =
            |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (ma, _, _) = filter_valid(&pa, h, w, &k);
        let (mb, _, _) = filter_valid(&pb, h, w, &k);
        let (eaa, _, _) = filter_valid(&sq(&pa, &pa), h, w, &k);
        let (ebb, _, _) = filter_valid(&sq(&pb, &pb), h, w, &k);
        let (eab, _, _) = filter_valid(&sq(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..ma.len() {
            let (mua, mub) = (ma[i], mb[i]);
            let va = eaa[i] - mua * mua;
            let vb = ebb[i] - mub * mub;
            let cov = eab[i] - mua * mub;
            let num = ((mua * mub) * 2.0 + C1) * (cov * 2.0 + C2);
            let den = (mua * mua + mub * mub + C1) * (va + vb + C2);
            sum += num / den;
        }
        total += sum / ma.len() as f64;
    }
    Ok(total / 3.0)
}

/// `exp(E_x KL(p(y|x) || p(y)))` averaged over `splits` consecutive splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    let splits = splits.max(1);
    if probs.len() < splits * 2 {
        return Err(Error::TooFewSamples {
            needed: splits * 2,
            got: probs.len(),
        });
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let k = part[0].len();
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for (v, m) in p.iter().zip(&marginal) {
                if *v > 0.0 {
                    kl += v * (v.ln() - m.ln());
                }
            }
        }
        scores.push((kl / part.len() as f64).exp());
    }
    Ok(scores.iter().sum::<f64>() / splits as f64)
}

fn mean_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m.clone();
    for j in 0..d {
        let mj = mu[j];
        centered.column_mut(j).add_scalar_mut(-mj);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fit to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: set.len(),
            });
        }
    }
    if a[0].len() != b[0].len() {
        return Err(Error::shape("feature width", a[0].len(), b[0].len()));
    }
    let (mu_a, sa) = mean_cov(a);
    let (mu_b, sb) = mean_cov(b);
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt)
}

fn pattern_shade(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|v| (v as f64 * 0.45 + 255.0 * 0.55).round())
}

/// Most frequent palette color among the body pixels of `mask_attrs`'s
/// silhouette, matching each pixel to the nearest plain or patterned shade.
pub fn decode_color(img: &Image, mask_attrs: &AttributeVector) -> Color {
    let mask = body_mask(mask_attrs);
    let rgb = img.to_rgb8();
    let mut votes = vec![0usize; Color::ALL.len()];
    let shades: Vec<(usize, [f64; 3])> = Color::ALL
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let base = c.rgb8().map(|v| v as f64);
            [(i, base), (i, pattern_shade(c.rgb8()))]
        })
        .collect();
    for (p, &inside) in mask.iter().enumerate() {
        if !inside || p * 3 + 2 >= rgb.len() {
            continue;
        }
        let px = [
            rgb[p * 3] as f64,
            rgb[p * 3 + 1] as f64,
            rgb[p * 3 + 2] as f64,
        ];
        let best = shades
            .iter()
            .min_by(|x, y| dist2(&x.1, &px).total_cmp(&dist2(&y.1, &px)))
            .unwrap();
        votes[best.0] += 1;
    }
    let (i, _) = votes
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    Color::ALL[i]
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: usize,
    pub count: usize,
    pub ssim: f64,
    pub baseline_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorTurnMetrics {
    pub count: usize,
    pub ssim: f64,
    pub baseline_ssim: f64,
    pub color_accuracy: f64,
}

/// Held-out evaluation summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub is_mean: f64,
    pub fid: f64,
    pub ssim_mean: f64,
    /// SSIM of the previous ground-truth image against the target.
    pub baseline_ssim_mean: f64,
    pub color_turns: ColorTurnMetrics,
    pub per_turn: Vec<TurnMetrics>,
    pub sequences: usize,
    pub images: usize,
    pub proxy_hash: String,
}

/// Centre `CROP` view of a stored image, as used for evaluation targets.
pub fn eval_view(img: &Image) -> Image {
    let canvas = img.height.min(img.width);
    if canvas == CROP {
        return img.clone();
    }
    Augment::center(canvas, CROP.min(canvas))
        .apply(img)
        .fit_square(CROP)
}

/// Generated image for every turn of every sequence, in input order. Noise
/// comes from a stream seeded with `seed`.
pub fn generate_turns(
    model: &SeqAttnGan,
    vocab: &Vocabulary,
    data: &[EditSequence],
    seed: u64,
) -> Result<Vec<Vec<Image>>> {
    if model.cfg.image_size != CROP {
        return Err(Error::Config(format!("evaluation expects {CROP}px models")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<Image>> = vec![Vec::new(); data.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(50) {
        let mut order = chunk.to_vec();
        order.sort_by_key(|&i| std::cmp::Reverse(data[i].turns.len()));
        let x0: Vec<Image> = order.iter().map(|&i| eval_view(&data[i].initial)).collect();
        let x0 = stack(&x0.iter().collect::<Vec<_>>(), DType::F32)?;
        let t_max = data[order[0]].turns.len();
        let mut ids = Vec::with_capacity(t_max);
        let mut noise = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let active: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| data[i].turns.len() > t)
                .collect();
            ids.push(
                active
                    .iter()
                    .map(|&i| vocab.tokenize(&data[i].turns[t].description, model.cfg.max_len))
                    .collect::<Vec<_>>(),
            );
            noise.push(sample_noise(
                &mut rng,
                active.len(),
                model.cfg.d_z,
                DType::F32,
            )?);
        }
        let turns = model.unroll(&x0, &ids, &noise)?;
        for g in &turns {
            for (row, &i) in order.iter().take(g.image.dims()[0]).enumerate() {
                out[i].push(Image::from_tensor(&g.image, row)?);
            }
        }
    }
    Ok(out)
}

/// Unrolls every held-out sequence once and scores the generated turns.
pub fn evaluate(
    model: &SeqAttnGan,
    vocab: &Vocabulary,
    data: &[EditSequence],
    proxy: &ProxyNet,
    seed: u64,
    splits: usize,
) -> Result<MetricsReport> {
    let generated = generate_turns(model, vocab, data, seed)?;
    score_generated(data, &generated, proxy, splits)
}

/// Scores already generated turn images against their sequences.
pub fn score_generated(
    data: &[EditSequence],
    generated: &[Vec<Image>],
    proxy: &ProxyNet,
    splits: usize,
) -> Result<MetricsReport> {
    let mut fakes = Vec::new();
    let mut reals = Vec::new();
    let mut per_turn: Vec<TurnMetrics> = Vec::new();
    let mut color = ColorTurnMetrics::default();
    let mut color_hits = 0usize;
    let (mut ssim_sum, mut base_sum) = (0.0, 0.0);
    for (seq, gens) in data.iter().zip(generated) {
        let mut prev = eval_view(&seq.initial);
        for (t, gen) in gens.iter().enumerate() {
            let target = eval_view(&seq.turns[t].image);
            let s = ssim(gen, &target)?;
            let base = ssim(&prev, &target)?;
            ssim_sum += s;
            base_sum += base;
            if per_turn.len() <= t {
                per_turn.push(TurnMetrics {
                    turn: t + 1,
                    ..Default::default()
                });
            }
            let pt = &mut per_turn[t];
            pt.count += 1;
            pt.ssim += s;
            pt.baseline_ssim += base;
            if seq.changed_fields(t + 1).iter().any(|f| f == "color") {
                color.count += 1;
                color.ssim += s;
                color.baseline_ssim += base;
                if let Some(v) = seq.target_vector(t + 1) {
                    if decode_color(gen, &v) == v.color {
                        color_hits += 1;
                    }
                }
            }
            fakes.push(gen.clone());
            reals.push(target.clone());
            prev = target;
        }
    }
    let n = fakes.len();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    for pt in &mut per_turn {
        pt.ssim /= pt.count as f64;
        pt.baseline_ssim /= pt.count as f64;
    }
    if color.count > 0 {
        color.ssim /= color.count as f64;
        color.baseline_ssim /= color.count as f64;
        color.color_accuracy = color_hits as f64 / color.count as f64;
    }
    let splits = splits.min(n / 2).max(1);
    let is_mean = inception_score(&proxy.probs(&fakes)?, splits)?;
    let fid = fid(&proxy.features(&fakes)?, &proxy.features(&reals)?)?;
    Ok(MetricsReport {
        is_mean,
        fid,
        ssim_mean: ssim_sum / n as f64,
        baseline_ssim_mean: base_sum / n as f64,
        color_turns: color,
        per_turn,
        sequences: data.len(),
        images: n,
        proxy_hash: proxy.hash()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
        Image::new(
            n,
            n,
            (0..n * n * 3)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 24);
        let b = random_image(&mut rng, 24);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let bin = Image::new(
            24,
            24,
            (0..24 * 24 * 3)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let inv = Image::new(24, 24, bin.data.iter().map(|v| -v).collect()).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(ssim(&a, &Image::filled(20, 24, [0.0; 3])).is_err());
    }

    #[test]
    fn inception_score_bounds() {
        let same = vec![vec![0.2, 0.3, 0.5]; 20];
        assert!((inception_score(&same, 10).unwrap() - 1.0).abs() < 1e-12);
        let k = 4;
        let onehot: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..k).map(|j| if i % k == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&onehot, 10).unwrap() - k as f64).abs() < 1e-9);
        assert!(inception_score(&same[..5], 10).is_err());
    }

    #[test]
    fn fid_self_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
        assert!(fid(&a[..1], &b).is_err());
    }

    #[test]
    fn color_decoder_recovers_every_render() {
        for a in AttributeVector::all() {
            assert_eq!(decode_color(&render(&a), &a), a.color, "{a:?}");
        }
    }
}
