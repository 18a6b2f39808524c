//! Counter-based pseudo-random numbers.
//!
//! Every random draw in the crate is a pure function of `(seed, stream,
//! counter)`, so fixtures can be regenerated bit-for-bit by any
//! implementation that follows the same recipe:
//!
//! * `mix64` is the SplitMix64 finalizer (multipliers `0xBF58476D1CE4E5B9`
//!   and `0x94D049BB133111EB`, shifts 30/27/31).
//! * A stream key is `mix64(seed ^ mix64(stream + GOLDEN_GAMMA))`.
//! * Draw `c` of a stream is `mix64(key + (c + 1) * GOLDEN_GAMMA)` with
//!   wrapping arithmetic, `GOLDEN_GAMMA = 0x9E3779B97F4A7C15`.
//! * Uniforms take the top 53 bits: `((bits >> 11) + 0.5) / 2^53`, which
//!   lies strictly inside (0, 1).
//! * Gaussian draw `c` is Box-Muller on uniforms `2c` and `2c + 1`, cosine
//!   branch only.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for a sub-task (fold draw, RFE iteration, ROI).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    mix64(master ^ mix64(tag.wrapping_add(GOLDEN_GAMMA) ^ mix64(index)))
}

/// Stateless generator addressed by an explicit counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    #[inline]
    pub fn bits(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.bits(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn gaussian(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Sequential view over a [`CounterRng`], for shuffles and sampling.
#[derive(Debug, Clone)]
pub struct SeqRng {
    rng: CounterRng,
    counter: u64,
}

impl SeqRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            rng: CounterRng::new(seed, stream),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.rng.bits(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_f64(&mut self) -> f64 {
        let v = self.rng.uniform(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let v = self.rng.gaussian(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform integer in `0..n` (multiply-shift; `n` must be nonzero).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
