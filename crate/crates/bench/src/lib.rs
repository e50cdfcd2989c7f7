//! Fixtures shared by the benchmarks.

use candle_core::DType;
use seqattn_core::config::{ModelConfig, TrainConfig};
use seqattn_core::synth::{corpus, generate_dataset, EditSequence, SequenceConfig};
use seqattn_core::trainer::PreparedBatch;
use seqattn_core::{Trainer, Vocabulary};

/// Desk-width trainer and `n` freshly generated sequences.
pub fn desk(n: usize, batch_size: usize) -> (Trainer, Vec<EditSequence>) {
    let data = generate_dataset(n, 1, &SequenceConfig::default());
    let vocab = Vocabulary::build(&corpus(&data), 1);
    let cfg = TrainConfig {
        model: ModelConfig::desk(),
        batch_size,
        ..TrainConfig::default()
    };
    (
        Trainer::with_dtype(cfg, vocab, DType::F32).expect("desk config is valid"),
        data,
    )
}

/// An unaugmented batch over all of `data`.
pub fn batch(tr: &mut Trainer, data: &[EditSequence]) -> PreparedBatch {
    tr.prepare(&data.iter().collect::<Vec<_>>(), false)
        .expect("generated data prepares")
}
