//! Shared fixtures for the criterion benchmarks.

use ctxbias::bias::BiasList;
use ctxbias::model::{Model, ModelConfig};
use ctxbias::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// The default experiment's model shape over a 70-token vocabulary.
pub fn toy_model() -> Model {
    let cfg = ModelConfig {
        feature_dim: 16,
        dim: 32,
        heads: 2,
        ff_dim: 64,
        audio_blocks: 2,
        bias_blocks: 1,
        decoder_blocks: 2,
        subsampling: 2,
        vocab_size: 77,
        ctc_classes: 71,
    };
    Model::new(cfg, 0).expect("valid config")
}

/// `n` random phrases of 2–4 regular tokens.
pub fn random_list(n: usize, seed: u64) -> BiasList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases = (0..n)
        .map(|_| (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(7..77)).collect())
        .collect();
    BiasList::new(phrases, 4).expect("valid phrases")
}
