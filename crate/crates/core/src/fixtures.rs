//! Small models and utterances shared by unit tests.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, TaskId};
use crate::tensor::Tensor;
use crate::train::Example;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ffn: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_task: 4,
        d_spk: 6,
        conv_channels: 4,
        dec_prenet_units: 8,
        postnet_channels: 8,
        dropout: 0.0,
        prenet_dropout: 0.0,
        ..ModelConfig::toy()
    }
    .with_tasks(&TaskId::ALL)
}

pub fn example(seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave: Vec<f64> = (0..1600).map(|_| rng.random::<f64>() - 0.5).collect();
    let text: Vec<usize> = (0..3).map(|_| rng.random_range(4..16)).collect();
    let mel = Tensor::from_vec(6, 80, (0..480).map(|_| rng.random::<f64>() * 4.0 - 6.0).collect()).unwrap();
    let mut spk = vec![0.0; 6];
    spk[(seed % 6) as usize] = 1.0;
    Example { wave: Some(wave), text: Some(text), mel: Some(mel), spk: Some(spk) }
}
