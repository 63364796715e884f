//! Seeded random streams with a pinned recipe, so fixtures can be
//! regenerated bit-for-bit by other implementations.
//!
//! Generator: ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Uniform: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! Normal: Box-Muller on two consecutive words `a`, `b`:
//! `u1 = ((a >> 11) + 1) * 2^-53` (in `(0, 1]`), `u2 = (b >> 11) * 2^-53`,
//! `z = sqrt(-2 ln u1) * cos(2 pi u2)`. The sine branch is discarded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_POW_MINUS_53: f64 = 1.0 / (1u64 << 53) as f64;

pub struct SeededStream {
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_MINUS_53
    }

    pub fn normal(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * TWO_POW_MINUS_53;
        let u2 = (b >> 11) as f64 * TWO_POW_MINUS_53;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` by rejection, `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
