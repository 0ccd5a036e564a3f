//! Two-pool minibatch sampler: sub-batch 1 from `L ∪ U`, sub-batch 2
//! from `L`. Each pool is reshuffled whenever it is exhausted.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolRef {
    Labelled(usize),
    Unlabelled(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    pub sub1: Vec<PoolRef>,
    /// Indices into the labelled set.
    pub sub2: Vec<usize>,
}

#[derive(Clone, Debug)]
struct EpochPool {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochPool {
    fn new(len: usize, seed: u64) -> Self {
        Self { order: (0..len).collect(), pos: len, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Sampler {
    n_labelled: usize,
    all: EpochPool,
    labelled: EpochPool,
}

impl Sampler {
    pub fn new(n_labelled: usize, n_unlabelled: usize, seed: u64) -> Self {
        Self {
            n_labelled,
            all: EpochPool::new(n_labelled + n_unlabelled, derive_seed(seed, 0)),
            labelled: EpochPool::new(n_labelled, derive_seed(seed, 1)),
        }
    }

    pub fn next_minibatch(&mut self, b1: usize, b2: usize) -> Result<Minibatch> {
        if b1 + b2 == 0 {
            return Err(DataError::Sampling("b1 + b2 must be at least 1".into()));
        }
        if b2 > 0 && self.n_labelled == 0 {
            return Err(DataError::Sampling("sub-batch 2 needs labelled samples".into()));
        }
        if b1 > 0 && self.all.order.is_empty() {
            return Err(DataError::Sampling("sub-batch 1 needs samples".into()));
        }
        let sub1 = (0..b1)
            .map(|_| {
                let i = self.all.next();
                if i < self.n_labelled {
                    PoolRef::Labelled(i)
                } else {
                    PoolRef::Unlabelled(i - self.n_labelled)
                }
            })
            .collect();
        let sub2 = (0..b2).map(|_| self.labelled.next()).collect();
        Ok(Minibatch { sub1, sub2 })
    }
}
