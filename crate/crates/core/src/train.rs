//! Pieces shared by every trainer: configuration, batch scheduling, and
//! per-epoch logs.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::nn::AdamConfig;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn with_lr(mut self, lr: f32) -> Self {
        self.optimizer.learning_rate = lr;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Examples left out of training, e.g. for infeasible CTC targets.
    pub skipped: usize,
    /// Sequences cut to the maximum length.
    #[serde(default)]
    pub truncated: usize,
}

/// Length-bucketed batch order for one epoch.
///
/// Shuffles, sorts windows of `8 · batch_size` by length so that padding
/// stays small, cuts batches, then shuffles the batch order.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let order = rng.permutation(lengths.len());
    let mut batches = Vec::new();
    for window in order.chunks(8 * batch_size) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lengths[i]);
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

/// Deterministic order for evaluation: sorted by length, chunked.
pub fn eval_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
