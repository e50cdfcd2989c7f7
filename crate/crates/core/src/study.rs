//! The controlled end-to-end study: one dataset, the full model and its two
//! ablations trained under one seed, each scored on the same held-out set.
//! Trained weights are cached by a key over everything that shapes them, so a
//! later run only evaluates.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::proxy::{ProxyNet, ProxyTrainConfig};
use crate::synth::{corpus, generate_dataset, hex_digest, EditSequence, SequenceConfig};
use crate::textenc::Vocabulary;
use crate::trainer::{DamsmEpoch, Trainer};

/// Bumped whenever training code changes in a way that invalidates caches.
pub const STUDY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoAttention,
    NoDamsm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoAttention, Variant::NoDamsm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no-attn",
            Variant::NoDamsm => "no-damsm",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::NoAttention => cfg.model.use_attention = false,
            Variant::NoDamsm => cfg.use_damsm = false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub train: TrainConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
    pub eval_seed: u64,
    pub proxy: ProxyTrainConfig,
    pub is_splits: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                model: ModelConfig::desk(),
                epochs: 15,
                ..TrainConfig::default()
            },
            train_sequences: 2000,
            test_sequences: 300,
            train_data_seed: 1,
            test_data_seed: 2,
            eval_seed: 7,
            proxy: ProxyTrainConfig::default(),
            is_splits: 10,
        }
    }
}

impl StudyConfig {
    pub fn variant_config(&self, v: Variant) -> TrainConfig {
        let mut cfg = self.train.clone();
        v.apply(&mut cfg);
        cfg
    }

    /// Cache key of one variant's weights.
    pub fn variant_key(&self, v: Variant) -> String {
        let text = format!(
            "v{STUDY_VERSION}\n{}train={} seed={}\n",
            self.variant_config(v).to_kv(),
            self.train_sequences,
            self.train_data_seed
        );
        hex_digest(text.as_bytes())[..16].to_string()
    }

    fn proxy_key(&self) -> String {
        let text = format!("v{STUDY_VERSION}\n{:?}", self.proxy);
        hex_digest(text.as_bytes())[..16].to_string()
    }
}

/// What training one variant cost and what the matching stage reached.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_secs: f64,
    pub steps: u64,
    pub damsm_epochs: Vec<DamsmEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub record: TrainRecord,
    pub report: MetricsReport,
    /// Held-out in-batch retrieval accuracy of the matching encoders, for
    /// variants that pretrain them.
    pub damsm_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub variants: Vec<VariantResult>,
}

impl StudyReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Summed training time of every variant.
    pub fn total_train_secs(&self) -> f64 {
        self.variants.iter().map(|r| r.record.train_secs).sum()
    }
}

pub struct Study {
    pub config: StudyConfig,
    pub cache: PathBuf,
    pub train: Vec<EditSequence>,
    pub test: Vec<EditSequence>,
    pub vocab: Vocabulary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json(format!("{}: {e}", path.display())))
}

impl Study {
    pub fn new(config: StudyConfig, cache: &Path) -> Result<Self> {
        std::fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
        let seq = SequenceConfig::default();
        let train = generate_dataset(config.train_sequences, config.train_data_seed, &seq);
        let test = generate_dataset(config.test_sequences, config.test_data_seed, &seq);
        let vocab = Vocabulary::build(&corpus(&train), 1);
        Ok(Self {
            config,
            cache: cache.to_path_buf(),
            train,
            test,
            vocab,
        })
    }

    fn paths(&self, v: Variant) -> (PathBuf, PathBuf) {
        let stem = format!("{}-{}", v.name(), self.config.variant_key(v));
        (
            self.cache.join(format!("{stem}.sqag")),
            self.cache.join(format!("{stem}.json")),
        )
    }

    pub fn is_cached(&self, v: Variant) -> bool {
        let (ck, rec) = self.paths(v);
        ck.exists() && rec.exists()
    }

    /// Loads the variant's weights from the cache, training them first when
    /// absent. `log` receives one line per matching epoch and per logged step.
    pub fn trained(&self, v: Variant, mut log: impl FnMut(&str)) -> Result<(Trainer, TrainRecord)> {
        let (ck_path, rec_path) = self.paths(v);
        if ck_path.exists() && rec_path.exists() {
            let tr = Trainer::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
            return Ok((tr, read_json(&rec_path)?));
        }
        let mut tr = Trainer::new(self.config.variant_config(v), self.vocab.clone())?;
        let start = Instant::now();
        let name = v.name();
        let mut damsm_epochs = Vec::new();
        let mut csv = Vec::new();
        tr.fit(
            &self.train,
            |e| {
                log(&format!(
                    "{name}: matching epoch {} loss {:.4} accuracy {:.3}",
                    e.epoch, e.loss, e.accuracy
                ));
                damsm_epochs.push(*e);
            },
            Some(&mut csv),
        )?;
        let record = TrainRecord {
            train_secs: start.elapsed().as_secs_f64(),
            steps: tr.step,
            damsm_epochs,
        };
        log(&format!(
            "{name}: {} steps in {:.0}s",
            record.steps, record.train_secs
        ));
        let csv_path = ck_path.with_extension("csv");
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
        tr.save(&ck_path)?;
        write_json(&rec_path, &record)?;
        Ok((tr, record))
    }

    /// The IS/FID classifier, trained once and cached.
    pub fn proxy(&self) -> Result<ProxyNet> {
        let path = self
            .cache
            .join(format!("proxy-{}.sqpx", self.config.proxy_key()));
        if path.exists() {
            return ProxyNet::load(&path);
        }
        let mut net = ProxyNet::new(self.config.proxy.seed)?;
        net.train(&self.config.proxy)?;
        net.save(&path)?;
        Ok(net)
    }

    /// Trains (or loads) and scores every variant.
    pub fn run(&self, mut log: impl FnMut(&str)) -> Result<StudyReport> {
        let proxy = self.proxy()?;
        let mut variants = Vec::new();
        for v in Variant::ALL {
            let (tr, record) = self.trained(v, &mut log)?;
            let report = evaluate(
                &tr.model,
                &tr.vocab,
                &self.test,
                &proxy,
                self.config.eval_seed,
                self.config.is_splits,
            )?;
            let damsm_accuracy = if tr.cfg.use_damsm {
                let pairs = tr.damsm_pairs(&self.test);
                Some(tr.damsm_accuracy(&pairs, tr.cfg.batch_size)?)
            } else {
                None
            };
            log(&format!(
                "{}: ssim {:.4} (copy-previous {:.4}), color turns ssim {:.4} (copy-previous {:.4}) accuracy {:.3}",
                v.name(),
                report.ssim_mean,
                report.baseline_ssim_mean,
                report.color_turns.ssim,
                report.color_turns.baseline_ssim,
                report.color_turns.color_accuracy
            ));
            variants.push(VariantResult {
                variant: v,
                record,
                report,
                damsm_accuracy,
            });
        }
        Ok(StudyReport {
            config: self.config.clone(),
            variants,
        })
    }
}
