use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment_pair, mix_seed, AugmentConfig, AugmentedPair, SceneDataset};
use crate::error::{Error, Result};

/// Position of a sampler within its infinite epoch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Tile indices for one batch plus the seeds used to augment each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub epoch: u64,
    pub indices: Vec<usize>,
    pub augment_seeds: Vec<u64>,
}

impl SampledBatch {
    pub fn augment(&self, dataset: &SceneDataset, config: &AugmentConfig) -> Result<Vec<AugmentedPair>> {
        self.indices
            .iter()
            .zip(&self.augment_seeds)
            .map(|(&i, &seed)| {
                let tile = dataset
                    .get(i)
                    .ok_or_else(|| Error::contract(format!("tile index {i} out of range")))?;
                augment_pair(tile, config, seed)
            })
            .collect()
    }
}

/// Shuffled, epoch-complete batch stream. The permutation of every epoch is a
/// pure function of `(seed, epoch)`, so the whole stream is reproducible from
/// a [`SamplerState`]. The last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    state: SamplerState,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(dataset_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::resume(dataset_len, batch_size, seed, SamplerState { epoch: 0, cursor: 0 })
    }

    pub fn resume(dataset_len: usize, batch_size: usize, seed: u64, state: SamplerState) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds dataset size {dataset_len}"
            )));
        }
        if state.cursor >= dataset_len {
            return Err(Error::Config("sampler cursor beyond dataset".into()));
        }
        let order = epoch_order(dataset_len, seed, state.epoch);
        Ok(Self {
            len: dataset_len,
            batch_size,
            seed,
            state,
            order,
        })
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> SampledBatch {
        let start = self.state.cursor;
        let end = (start + self.batch_size).min(self.len);
        let epoch = self.state.epoch;
        let indices = self.order[start..end].to_vec();
        let augment_seeds = (start..end)
            .map(|pos| mix_seed(&[self.seed, epoch, pos as u64, 0xA6]))
            .collect();
        if end == self.len {
            self.state = SamplerState {
                epoch: epoch + 1,
                cursor: 0,
            };
            self.order = epoch_order(self.len, self.seed, epoch + 1);
        } else {
            self.state.cursor = end;
        }
        SampledBatch {
            epoch,
            indices,
            augment_seeds,
        }
    }
}

impl Iterator for BatchSampler {
    type Item = SampledBatch;

    fn next(&mut self) -> Option<SampledBatch> {
        Some(self.next_batch())
    }
}

fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0x5A]));
    order.shuffle(&mut rng);
    order
}
