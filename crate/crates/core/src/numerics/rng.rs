use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Named stream ids. Every consumer of randomness draws from its own stream so
/// that changing how much one consumer draws never shifts another.
pub mod stream {
    pub const WEIGHT_INIT: u64 = 1;
    pub const TRAIN_BATCH: u64 = 2;
    pub const HELDOUT_BATCH: u64 = 3;
    pub const REFERENCE_SET: u64 = 4;
    pub const SAMPLE_NOISE: u64 = 5;
    pub const TRAIN_BUCKET: u64 = 6;
    pub const HELDOUT_BUCKET: u64 = 7;
    pub const CMA: u64 = 8;
    pub const CONDITION_SET: u64 = 9;
    pub const TEST: u64 = 100;
}

/// Counter-based ChaCha8 generator addressed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on another stream of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
