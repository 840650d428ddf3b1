//! Counter-based, stream-splittable random numbers.
//!
//! Each [`RngStream`] is a ChaCha12 keystream keyed by `seed` and selected by
//! `stream_id`; the word position is the counter. Two streams with the same
//! `(seed, stream_id, counter)` produce bit-identical draws regardless of
//! thread or call history.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// A fresh stream under the same seed.
    pub fn split(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_counter(&mut self, counter: u128) {
        self.inner.set_word_pos(counter);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// i.i.d. standard normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Stream id for a `(domain, index)` pair, so that independent consumers
/// never share a keystream.
pub fn stream_id(domain: u32, index: u64) -> u64 {
    ((domain as u64) << 48) ^ index
}
