//! Matching-model pretraining and the alternating adversarial sequence
//! training loop.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::damsm::{damsm_loss, pair_text, retrieval_accuracy, Damsm, MatchConfig};
use crate::error::{Error, Result};
use crate::gan::{loss_d, loss_g, sample_noise, Discriminator};
use crate::image::{stack, Image};
use crate::model::{build_discriminator, SeqAttnGan, DAMSM_PREFIX, DISC_PREFIX, GEN_PREFIX};
use crate::nn::{scalar_f64, Adam, ParamStore};
use crate::synth::{Augment, EditSequence, CANVAS, CROP};
use crate::textenc::Vocabulary;

/// Power-iteration steps run on the fresh discriminator weights.
const SPECTRAL_WARMUP: usize = 20;
const EVAL_SHUFFLE_SEED: u64 = 0x5eed;

pub const CSV_HEADER: &str = "step,L_D,L_G,L_DAMSM";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_damsm: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.step, self.l_d, self.l_g, self.l_damsm
        )
    }
}

/// `L_G + lambda * L_DAMSM`, or `L_G` alone when the matching term is off.
pub fn total_loss(l_g: f64, l_damsm: f64, lambda: f64, use_damsm: bool) -> f64 {
    if use_damsm {
        l_g + lambda * l_damsm
    } else {
        l_g
    }
}

/// A batch staged as tensors, sorted by decreasing turn count so the
/// sequences active at any turn form a prefix.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub size: usize,
    pub x0: Tensor,
    pub targets: Vec<Tensor>,
    pub turn_ids: Vec<Vec<Vec<u32>>>,
    pub damsm_ids: Vec<Vec<Vec<u32>>>,
    pub noise: Vec<Tensor>,
}

/// Loss tensors for one batch, each summed over turns and averaged over
/// sequences, with per-turn sums (before averaging) for inspection.
pub struct Objective {
    pub l_d: Tensor,
    pub l_g: Tensor,
    pub l_damsm: Tensor,
    pub per_turn: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DamsmEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub model: SeqAttnGan,
    pub disc: Discriminator,
    pub damsm: Damsm,
    damsm_frozen: Damsm,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        Self::with_dtype(cfg, vocab, DType::F32)
    }

    pub fn with_dtype(mut cfg: TrainConfig, vocab: Vocabulary, dtype: DType) -> Result<Self> {
        cfg.model.vocab_size = cfg.model.vocab_size.max(vocab.len());
        cfg.validate()?;
        let store = ParamStore::new(dtype, cfg.seed);
        let root = store.root();
        let model = SeqAttnGan::new(&root.pp("gan"), &cfg.model)?;
        let disc = build_discriminator(&root, &cfg.model)?;
        let damsm = Damsm::new(&root.pp("damsm"), &cfg.model)?;
        let damsm_frozen = Damsm::new(&root.pp("damsm").frozen(), &cfg.model)?;
        let opt_g = Adam::new(
            store.vars_with_prefix(GEN_PREFIX),
            cfg.lr_g,
            cfg.beta1,
            cfg.beta2,
        )?;
        let opt_d = Adam::new(
            store.vars_with_prefix(DISC_PREFIX),
            cfg.lr_d,
            cfg.beta1,
            cfg.beta2,
        )?;
        disc.update_spectral(SPECTRAL_WARMUP)?;
        let rng = ChaCha8Rng::seed_from_u64(crate::synth::splitmix64(cfg.seed));
        Ok(Self {
            cfg,
            vocab,
            store,
            model,
            disc,
            damsm,
            damsm_frozen,
            opt_g,
            opt_d,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), ck.vocab.clone())?;
        ck.apply(&t.store)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.store, &self.vocab, &self.cfg, self.step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig::from_train(&self.cfg)
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Crops (randomly when `augment`), tokenizes and draws per-turn noise.
    pub fn prepare(&mut self, seqs: &[&EditSequence], augment: bool) -> Result<PreparedBatch> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut order: Vec<&EditSequence> = seqs.to_vec();
        order.sort_by_key(|s| std::cmp::Reverse(s.turns.len()));
        let size = self.cfg.model.image_size;
        let dtype = self.dtype();
        let views: Vec<Augment> = order
            .iter()
            .map(|s| {
                let canvas = s.initial.height.min(s.initial.width);
                if augment && canvas >= CROP && canvas <= CANVAS {
                    Augment::sample(&mut self.rng, canvas, CROP)
                } else {
                    Augment::center(canvas, CROP.min(canvas))
                }
            })
            .collect();
        let view = |a: &Augment, img: &Image| -> Image {
            let c = a.apply(img);
            if c.height != size {
                c.resize_bilinear(size, size)
            } else {
                c
            }
        };
        let x0: Vec<Image> = order
            .iter()
            .zip(&views)
            .map(|(s, a)| view(a, &s.initial))
            .collect();
        let x0 = stack(&x0.iter().collect::<Vec<_>>(), self.dtype())?;
        let t_max = order[0].turns.len();
        let (mut targets, mut turn_ids, mut damsm_ids, mut noise) =
            (vec![], vec![], vec![], vec![]);
        for t in 0..t_max {
            let active: Vec<usize> = (0..order.len())
                .filter(|&i| order[i].turns.len() > t)
                .collect();
            let imgs: Vec<Image> = active
                .iter()
                .map(|&i| view(&views[i], &order[i].turns[t].image))
                .collect();
            targets.push(stack(&imgs.iter().collect::<Vec<_>>(), self.dtype())?);
            turn_ids.push(
                active
                    .iter()
                    .map(|&i| {
                        self.vocab
                            .tokenize(&order[i].turns[t].description, self.cfg.model.max_len)
                    })
                    .collect(),
            );
            damsm_ids.push(
                active
                    .iter()
                    .map(|&i| {
                        let s = order[i];
                        let text =
                            pair_text(s.attrs_before(t + 1), &s.turns[t].description).join(" ");
                        self.vocab.tokenize(&text, self.cfg.model.damsm_max_len())
                    })
                    .collect(),
            );
            noise.push(sample_noise(
                &mut self.rng,
                active.len(),
                self.cfg.model.d_z,
                dtype,
            )?);
        }
        Ok(PreparedBatch {
            size: order.len(),
            x0,
            targets,
            turn_ids,
            damsm_ids,
            noise,
        })
    }

    /// All three loss terms on the current weights. `L_D` sees detached
    /// generator outputs and sentence features.
    pub fn objective(&self, batch: &PreparedBatch) -> Result<Objective> {
        let turns = self
            .model
            .unroll(&batch.x0, &batch.turn_ids, &batch.noise)?;
        self.objective_from(batch, &turns, None)
    }

    /// Detached sentence features the discriminator is conditioned on, per turn.
    pub fn disc_conditions(&self, batch: &PreparedBatch) -> Result<Vec<Tensor>> {
        batch
            .turn_ids
            .iter()
            .map(|ids| Ok(self.model.text.encode_batch(ids)?.sent.detach()))
            .collect()
    }

    /// [`Trainer::objective`] with the discriminator's conditioning held at
    /// `conds`, so every loss is a plain function of the weights.
    pub fn objective_with_conditions(
        &self,
        batch: &PreparedBatch,
        conds: &[Tensor],
    ) -> Result<Objective> {
        if conds.len() != batch.turn_ids.len() {
            return Err(Error::shape(
                "conditions per turn",
                batch.turn_ids.len(),
                conds.len(),
            ));
        }
        let turns = self
            .model
            .unroll(&batch.x0, &batch.turn_ids, &batch.noise)?;
        self.objective_from(batch, &turns, Some(conds))
    }

    fn objective_from(
        &self,
        batch: &PreparedBatch,
        turns: &[crate::model::GeneratedTurn],
        conds: Option<&[Tensor]>,
    ) -> Result<Objective> {
        let mcfg = self.match_config();
        let b = batch.size as f64;
        let (mut ld, mut lg, mut lm): (Option<Tensor>, Option<Tensor>, Option<Tensor>) =
            (None, None, None);
        let mut per_turn = Vec::with_capacity(turns.len());
        let acc = |slot: &mut Option<Tensor>, v: Tensor| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(s) => (s + v)?,
                None => v,
            });
            Ok(())
        };
        for (t, g) in turns.iter().enumerate() {
            let n = batch.targets[t].dims()[0] as f64;
            let sent = match conds {
                Some(c) => c[t].clone(),
                None => g.text.sent.detach(),
            };
            let real = self.disc.forward(&batch.targets[t], &sent)?;
            let fake_d = self.disc.forward(&g.image.detach(), &sent)?;
            let d_t = loss_d(&real, &fake_d)?.affine(n, 0.0)?;
            let fake_g = self.disc.forward(&g.image, &sent)?;
            let g_t = loss_g(&fake_g)?.affine(n, 0.0)?;
            let m_t = if self.cfg.use_damsm {
                let r = self
                    .damsm_frozen
                    .scores(&g.image, &batch.damsm_ids[t], &mcfg)?;
                damsm_loss(&r, mcfg.gamma3)?
            } else {
                Tensor::zeros((), self.dtype(), self.store.device())?
            };
            per_turn.push([scalar_f64(&d_t)?, scalar_f64(&g_t)?, scalar_f64(&m_t)?]);
            acc(&mut ld, d_t)?;
            acc(&mut lg, g_t)?;
            acc(&mut lm, m_t)?;
        }
        let avg = |t: Option<Tensor>| -> Result<Tensor> {
            Ok(t.expect("at least one turn").affine(1.0 / b, 0.0)?)
        };
        Ok(Objective {
            l_d: avg(ld)?,
            l_g: avg(lg)?,
            l_damsm: avg(lm)?,
            per_turn,
        })
    }

    /// One discriminator update on Eq.-style `L_D`, then one generator update
    /// on `L_G + lambda * L_DAMSM`.
    pub fn train_step(&mut self, seqs: &[&EditSequence]) -> Result<LossReport> {
        let batch = self.prepare(seqs, self.cfg.augment)?;
        let turns = self
            .model
            .unroll(&batch.x0, &batch.turn_ids, &batch.noise)?;
        let b = batch.size as f64;

        let mut ld_sum: Option<Tensor> = None;
        for (t, g) in turns.iter().enumerate() {
            let n = batch.targets[t].dims()[0];
            let sent = g.text.sent.detach();
            let images = Tensor::cat(&[&batch.targets[t], &g.image.detach()], 0)?;
            let out = self
                .disc
                .forward(&images, &Tensor::cat(&[&sent, &sent], 0)?)?;
            let split = |x: &Tensor, s: usize| x.narrow(0, s, n);
            let real = crate::gan::DiscOutput {
                uncond: split(&out.uncond, 0)?,
                cond: split(&out.cond, 0)?,
            };
            let fake = crate::gan::DiscOutput {
                uncond: split(&out.uncond, n)?,
                cond: split(&out.cond, n)?,
            };
            let d_t = loss_d(&real, &fake)?.affine(n as f64, 0.0)?;
            ld_sum = Some(match ld_sum {
                Some(s) => (s + d_t)?,
                None => d_t,
            });
        }
        let l_d = ld_sum.unwrap().affine(1.0 / b, 0.0)?;
        let l_d_val = finite("L_D", scalar_f64(&l_d)?)?;
        let grads = l_d.backward()?;
        self.opt_d.step(&grads)?;
        self.disc.update_spectral(1)?;

        let mcfg = self.match_config();
        let (mut lg_sum, mut lm_sum): (Option<Tensor>, Option<Tensor>) = (None, None);
        for (t, g) in turns.iter().enumerate() {
            let n = batch.targets[t].dims()[0] as f64;
            let fake = self.disc.forward(&g.image, &g.text.sent.detach())?;
            let g_t = loss_g(&fake)?.affine(n, 0.0)?;
            lg_sum = Some(match lg_sum {
                Some(s) => (s + g_t)?,
                None => g_t,
            });
            if self.cfg.use_damsm {
                let r = self
                    .damsm_frozen
                    .scores(&g.image, &batch.damsm_ids[t], &mcfg)?;
                let m_t = damsm_loss(&r, mcfg.gamma3)?;
                lm_sum = Some(match lm_sum {
                    Some(s) => (s + m_t)?,
                    None => m_t,
                });
            }
        }
        let l_g = lg_sum.unwrap().affine(1.0 / b, 0.0)?;
        let l_g_val = finite("L_G", scalar_f64(&l_g)?)?;
        let (total, l_m_val) = match lm_sum {
            Some(m) => {
                let m = m.affine(1.0 / b, 0.0)?;
                let v = finite("L_DAMSM", scalar_f64(&m)?)?;
                ((&l_g + m.affine(self.cfg.lambda, 0.0)?)?, v)
            }
            None => (l_g.clone(), 0.0),
        };
        let grads = total.backward()?;
        self.opt_g.step(&grads)?;
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            l_d: l_d_val,
            l_g: l_g_val,
            l_damsm: l_m_val,
            l_total: total_loss(l_g_val, l_m_val, self.cfg.lambda, self.cfg.use_damsm),
        })
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn train_epoch(
        &mut self,
        data: &[EditSequence],
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let seqs: Vec<&EditSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&seqs)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Runs `cfg.epochs` epochs, appending CSV lines to `log` when given.
    pub fn train(
        &mut self,
        data: &[EditSequence],
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io("<log>", e))?;
        }
        let mut all = Vec::new();
        for _ in 0..self.cfg.epochs {
            let every = self.cfg.log_every.max(1) as u64;
            let mut io_err = None;
            let reports = self.train_epoch(data, |r| {
                if r.step % every == 0 {
                    if let Some(w) = log.as_deref_mut() {
                        if let Err(e) = writeln!(w, "{}", r.csv_line()) {
                            io_err.get_or_insert(e);
                        }
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(Error::io("<log>", e));
            }
            all.extend(reports);
        }
        Ok(all)
    }

    /// Matching pretraining (when enabled) followed by `cfg.epochs` of
    /// adversarial training.
    pub fn fit(
        &mut self,
        data: &[EditSequence],
        on_damsm_epoch: impl FnMut(&DamsmEpoch),
        log: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>> {
        if self.cfg.use_damsm && self.cfg.damsm_epochs > 0 {
            self.pretrain_damsm(data, on_damsm_epoch)?;
        }
        self.train(data, log)
    }

    /// `(image, token ids)` for every turn of `data`, center-cropped.
    pub fn damsm_pairs(&self, data: &[EditSequence]) -> Vec<(Image, Vec<u32>)> {
        let size = self.cfg.model.image_size;
        let mut out = Vec::new();
        for s in data {
            for (t, turn) in s.turns.iter().enumerate() {
                let canvas = turn.image.height.min(turn.image.width);
                let img = Augment::center(canvas, CROP.min(canvas)).apply(&turn.image);
                let img = if img.height != size {
                    img.resize_bilinear(size, size)
                } else {
                    img
                };
                let text = pair_text(s.attrs_before(t + 1), &turn.description).join(" ");
                out.push((
                    img,
                    self.vocab.tokenize(&text, self.cfg.model.damsm_max_len()),
                ));
            }
        }
        out
    }

    /// Score matrix and loss on a batch of pairs using the trainable encoders.
    pub fn damsm_batch(&self, pairs: &[&(Image, Vec<u32>)]) -> Result<(Tensor, Tensor)> {
        let images = stack(
            &pairs.iter().map(|p| &p.0).collect::<Vec<_>>(),
            self.dtype(),
        )?;
        let ids: Vec<Vec<u32>> = pairs.iter().map(|p| p.1.clone()).collect();
        let mcfg = self.match_config();
        let r = self.damsm.scores(&images, &ids, &mcfg)?;
        let loss = damsm_loss(&r, mcfg.gamma3)?;
        Ok((r, loss))
    }

    /// Mean in-batch top-1 image-to-text accuracy over batches of `m` pairs
    /// drawn in a fixed shuffled order, so turns of one sequence rarely share
    /// a batch. A trailing partial batch is dropped.
    pub fn damsm_accuracy(&self, pairs: &[(Image, Vec<u32>)], m: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(EVAL_SHUFFLE_SEED));
        let mut accs = Vec::new();
        for chunk in order.chunks(m) {
            if chunk.len() < m {
                break;
            }
            let (r, _) = self.damsm_batch(&chunk.iter().map(|&i| &pairs[i]).collect::<Vec<_>>())?;
            accs.push(retrieval_accuracy(&r)?);
        }
        if accs.is_empty() {
            return Err(Error::TooFewSamples {
                needed: m,
                got: pairs.len(),
            });
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Trains the matching encoders on real pairs, then initializes the
    /// generator-side text encoder from the trained one.
    pub fn pretrain_damsm(
        &mut self,
        data: &[EditSequence],
        mut on_epoch: impl FnMut(&DamsmEpoch),
    ) -> Result<Vec<DamsmEpoch>> {
        let pairs = self.damsm_pairs(data);
        let m = self.cfg.batch_size;
        let mut opt = Adam::new(
            self.store.vars_with_prefix(DAMSM_PREFIX),
            self.cfg.damsm_lr,
            self.cfg.beta1,
            self.cfg.beta2,
        )?;
        let mut out = Vec::new();
        for epoch in 0..self.cfg.damsm_epochs {
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut self.rng);
            let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
            for chunk in idx.chunks(m) {
                if chunk.len() < 2 {
                    continue;
                }
                let batch: Vec<&(Image, Vec<u32>)> = chunk.iter().map(|&i| &pairs[i]).collect();
                let (r, loss) = self.damsm_batch(&batch)?;
                let loss = loss.affine(1.0 / chunk.len() as f64, 0.0)?;
                loss_sum += finite("L_DAMSM", scalar_f64(&loss)?)?;
                acc_sum += retrieval_accuracy(&r)?;
                n += 1;
                opt.step(&loss.backward()?)?;
            }
            let e = DamsmEpoch {
                epoch,
                loss: loss_sum / n.max(1) as f64,
                accuracy: acc_sum / n.max(1) as f64,
            };
            on_epoch(&e);
            out.push(e);
        }
        self.store.copy_prefix("damsm.text", "gan.text")?;
        Ok(out)
    }
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}
