use rand::seq::SliceRandom;

use super::PatchSet;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

/// Index lists for one paired step. Target indices carry no label information.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Deterministic pairing schedule over a source and a target set.
///
/// Each epoch shuffles both sets independently, then walks positions
/// `0..max(N_s, N_t)` in chunks of `batch_size`; the smaller set is indexed
/// modulo its length so it wraps around.
#[derive(Clone, Debug)]
pub struct PairBatches {
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
}

pub fn sample_pair_batches(src: &PatchSet, tgt: &PatchSet, batch_size: usize, seed: u64) -> Result<PairBatches> {
    PairBatches::new(src.len(), tgt.len(), batch_size, seed)
}

impl PairBatches {
    pub fn new(source_len: usize, target_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if source_len == 0 || target_len == 0 {
            return Err(Error::arg("both patch sets must be non-empty"));
        }
        Ok(Self {
            source_len,
            target_len,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.source_len.max(self.target_len).div_ceil(self.batch_size)
    }

    fn permutation(&self, len: usize, epoch: u64, salt: u64) -> Vec<usize> {
        let mixed = self.seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
        let mut rng = seeded(mixed, stream::BATCHES);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// All pairs of epoch `epoch` (zero-based), in consumption order.
    pub fn epoch(&self, epoch: u64) -> Vec<BatchPair> {
        let ps = self.permutation(self.source_len, epoch, 0);
        let pt = self.permutation(self.target_len, epoch, 0xA5A5_A5A5);
        let total = self.source_len.max(self.target_len);
        (0..self.batches_per_epoch())
            .map(|j| {
                let positions = j * self.batch_size..((j + 1) * self.batch_size).min(total);
                BatchPair {
                    source: positions.clone().map(|p| ps[p % self.source_len]).collect(),
                    target: positions.map(|p| pt[p % self.target_len]).collect(),
                }
            })
            .collect()
    }
}
