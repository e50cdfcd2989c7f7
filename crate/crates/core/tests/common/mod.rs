#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use seqattn_core::config::{ModelConfig, TrainConfig};
use seqattn_core::synth::{corpus, generate_dataset, EditSequence, SequenceConfig};
use seqattn_core::textenc::Vocabulary;
use seqattn_core::Trainer;

/// The reduced model used for gradient checks and fast wiring tests.
pub fn reduced_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        grid_side: 2,
        d_e: 8,
        d_h: 8,
        d_z: 4,
        d_s: 8,
        emb_dim: 6,
        d_cond: 4,
        gen_channels: 3,
        disc_channels: 3,
        enc_channels: 3,
        damsm_channels: 3,
        vocab_size: 8,
        max_len: 10,
        use_attention: true,
    }
}

pub fn reduced_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: reduced_model(),
        batch_size: 3,
        seed,
        augment: false,
        damsm_epochs: 1,
        ..TrainConfig::default()
    }
}

pub fn data(n: usize, seed: u64) -> (Vec<EditSequence>, Vocabulary) {
    let seqs = generate_dataset(n, seed, &SequenceConfig::default());
    let vocab = Vocabulary::build(&corpus(&seqs), 1);
    (seqs, vocab)
}

pub fn trainer(cfg: TrainConfig, vocab: Vocabulary, dtype: DType) -> Trainer {
    Trainer::with_dtype(cfg, vocab, dtype).unwrap()
}

pub fn var_values(v: &Var) -> Vec<f64> {
    v.as_tensor()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn set_entry(v: &Var, i: usize, value: f64) {
    let mut vals = var_values(v);
    vals[i] = value;
    let t = Tensor::from_vec(vals, v.as_tensor().dims(), v.device())
        .unwrap()
        .to_dtype(v.dtype())
        .unwrap();
    v.set(&t).unwrap();
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}
