use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Seeded pseudo-random stream: xoshiro256++ seeded through SplitMix64.
///
/// Every stochastic consumer (init, dropout, shuffling, negative sampling,
/// bootstrap resampling) derives its own stream from the root seed with
/// [`Rng::derive`], so consumers never perturb each other and a resumed run
/// can recreate any stream from counters alone.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

/// Stream identifiers for [`Rng::derive`].
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const DATA: u64 = 6;
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent child stream `(stream, index)` of `root`.
    pub fn derive(root: u64, stream: u64, index: u64) -> Self {
        Rng::new(mix(mix(root ^ mix(stream)) ^ index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates with our own `below` so the permutation is platform independent.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
