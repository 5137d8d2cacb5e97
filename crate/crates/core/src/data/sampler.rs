use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Mask and image indices drawn from independent per-epoch shuffles.
///
/// Batches are addressed by global step, so any step can be reproduced
/// without replaying the ones before it.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    mask_pool: usize,
    image_pool: usize,
    batch: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>, Vec<usize>)>,
}

fn shuffled(n: usize, seed: u64, path: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng_for(seed, path));
    v
}

impl UnpairedSampler {
    pub fn new(mask_pool: usize, image_pool: usize, batch: usize, seed: u64) -> Result<Self> {
        if mask_pool == 0 || image_pool == 0 {
            return Err(Error::Invalid("unpaired sampling needs non-empty pools".into()));
        }
        if batch == 0 || batch > mask_pool.min(image_pool) {
            return Err(Error::Invalid(format!(
                "batch {batch} must be in 1..={} (smaller pool)",
                mask_pool.min(image_pool)
            )));
        }
        Ok(Self {
            mask_pool,
            image_pool,
            batch,
            seed,
            cached: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.mask_pool.min(self.image_pool) / self.batch
    }

    /// Full mask and image permutations of epoch `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> (Vec<usize>, Vec<usize>) {
        let masks = shuffled(self.mask_pool, self.seed, &[0x4d41_534b, epoch]);
        let mut images = shuffled(self.image_pool, self.seed, &[0x494d_4147, epoch]);
        let used = self.batches_per_epoch() * self.batch;
        let mut retry = 0u64;
        while self.mask_pool.min(self.image_pool) > 4 && masks[..used] == images[..used] {
            retry += 1;
            images = shuffled(self.image_pool, self.seed, &[0x494d_4147, epoch, retry]);
        }
        (masks, images)
    }

    /// `(mask indices, image indices)` of global step `step` (0-based).
    pub fn batch_at(&mut self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let per = self.batches_per_epoch() as u64;
        let (epoch, k) = (step / per, (step % per) as usize);
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let (m, i) = self.epoch_order(epoch);
            self.cached = Some((epoch, m, i));
        }
        let (_, m, i) = self.cached.as_ref().expect("filled above");
        let range = k * self.batch..(k + 1) * self.batch;
        (m[range.clone()].to_vec(), i[range].to_vec())
    }
}
