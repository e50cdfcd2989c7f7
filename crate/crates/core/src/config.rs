//! Model and training configuration, and the flat `key=value` file format.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Widths default to the full-size model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Side of the region grid at the attention stage (`N = grid_side^2`).
    pub grid_side: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub d_s: usize,
    pub emb_dim: usize,
    /// Width of the sentence projection tiled into the discriminator.
    pub d_cond: usize,
    /// Channels of the generator's last block; earlier blocks double it.
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub enc_channels: usize,
    pub damsm_channels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid_side: 16,
            d_e: 300,
            d_h: 128,
            d_z: 100,
            d_s: 128,
            emb_dim: 128,
            d_cond: 128,
            gen_channels: 16,
            disc_channels: 32,
            enc_channels: 32,
            damsm_channels: 32,
            vocab_size: 128,
            max_len: 16,
            use_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn regions(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Number of stride-2 blocks taking the image down to 4x4.
    pub fn down_blocks(&self) -> usize {
        log2_ratio(self.image_size, 4)
    }

    pub fn up_blocks(&self) -> usize {
        log2_ratio(self.image_size, self.grid_side)
    }

    /// Image feature width `d_v` of the tracker's image encoder.
    pub fn d_v(&self) -> usize {
        self.enc_channels << (self.down_blocks() - 1)
    }

    /// Longest DAMSM text: attribute tokens plus a description.
    pub fn damsm_max_len(&self) -> usize {
        self.max_len + 8
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.image_size) || self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        if !pow2(self.grid_side) || self.grid_side > self.image_size {
            return Err(Error::Config(format!(
                "grid_side {} incompatible with image_size",
                self.grid_side
            )));
        }
        if self.d_e % 2 != 0 {
            return Err(Error::Config("d_e must be even".into()));
        }
        let dims = [
            self.d_e,
            self.d_h,
            self.d_z,
            self.d_s,
            self.emb_dim,
            self.d_cond,
            self.gen_channels,
            self.disc_channels,
            self.enc_channels,
            self.damsm_channels,
            self.vocab_size,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// A narrow variant used for CPU-scale end-to-end runs.
    pub fn desk() -> Self {
        Self {
            d_e: 64,
            d_h: 32,
            d_z: 16,
            d_s: 32,
            emb_dim: 32,
            d_cond: 32,
            gen_channels: 8,
            disc_channels: 16,
            enc_channels: 8,
            damsm_channels: 16,
            ..Self::default()
        }
    }
}

fn log2_ratio(big: usize, small: usize) -> usize {
    (big / small.max(1)).max(1).trailing_zeros() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub use_damsm: bool,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub damsm_epochs: usize,
    pub damsm_lr: f64,
    pub log_every: usize,
    /// Random crop and flip of training sequences.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda: 2.0,
            batch_size: 50,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 1,
            seed: 0,
            use_damsm: true,
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
            damsm_epochs: 5,
            damsm_lr: 2e-3,
            log_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if [self.gamma1, self.gamma2, self.gamma3]
            .iter()
            .any(|g| !(*g > 0.0))
        {
            return Err(Error::Config("gammas must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        to_kv(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: Self = from_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }
}

/// Serializes a flat struct as sorted `key=value` lines.
pub fn to_kv<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let mut out = String::new();
    if let serde_json::Value::Object(map) = v {
        let mut keys: Vec<_> = map.keys().cloned().collect();
        keys.sort();
        for k in keys {
            let val = match &map[&k] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={val}\n"));
        }
    }
    out
}

/// Parses `key=value` lines (`#` comments allowed) into a flat struct whose
/// defaults fill in missing keys. Unknown keys are rejected.
pub fn from_kv<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let known = match serde_json::to_value(T::default()).expect("config serializes") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("flat config"),
    };
    let mut map = serde_json::Map::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !known.contains_key(k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        let parsed =
            serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        map.insert(k.to_string(), parsed);
    }
    serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 2.0);
        assert_eq!(c.batch_size, 50);
        assert_eq!((c.model.d_e, c.model.d_h), (300, 128));
        assert_eq!(c.model.regions(), 256);
        assert_eq!(c.model.d_v(), 256);
        assert_eq!((c.model.down_blocks(), c.model.up_blocks()), (4, 2));
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let mut c = TrainConfig::default();
        c.lambda = 2.5;
        c.model.use_attention = false;
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let partial = TrainConfig::from_kv("lambda = 0.5\n# comment\nseed=9").unwrap();
        assert_eq!((partial.lambda, partial.seed), (0.5, 9));
        assert!(TrainConfig::from_kv("nope=1").is_err());
        assert!(TrainConfig::from_kv("lambda=-1").is_err());
        assert!(TrainConfig::from_kv("batch_size=0").is_err());
    }
}
