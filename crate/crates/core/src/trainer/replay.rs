//! Per-task ring-buffer replay storage with FIFO overwrite.

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::Prng;
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    /// Next write position once the buffer is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            data: Vec::with_capacity(capacity.min(4096)),
            capacity,
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Index into `data` of the i-th most recent entry (i = 0 is newest).
    fn recent_index(&self, i: usize) -> usize {
        if self.data.len() < self.capacity {
            self.data.len() - 1 - i
        } else {
            (self.cursor + self.capacity - 1 - i) % self.capacity
        }
    }

    /// Uniform sample with replacement over the whole buffer.
    pub fn sample(&self, n: usize, rng: &mut Prng) -> Result<Vec<Transition>> {
        if self.is_empty() {
            return Err(Error::InsufficientData("replay buffer is empty".into()));
        }
        Ok((0..n)
            .map(|_| self.data[rng.random_range(0..self.data.len())].clone())
            .collect())
    }

    /// Uniform sample with replacement over the `window` most recent
    /// transitions (the context-sampler recency convention).
    pub fn sample_recent(&self, n: usize, window: usize, rng: &mut Prng) -> Result<Vec<Transition>> {
        if self.is_empty() {
            return Err(Error::InsufficientData("replay buffer is empty".into()));
        }
        let w = window.min(self.data.len()).max(1);
        Ok((0..n)
            .map(|_| self.data[self.recent_index(rng.random_range(0..w))].clone())
            .collect())
    }
}
