//! Seeded randomness shared by data generation, shuffling and weight init.
//!
//! The generator is xoshiro256** seeded through SplitMix64
//! (`rand_xoshiro::Xoshiro256StarStar::seed_from_u64`). Every derived
//! quantity below is spelled out so that the streams can be reproduced
//! outside this crate:
//!
//! * uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * bounded index in `0..n`: `next_u64 % n`
//! * standard normal: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`
//! * shuffle: Fisher-Yates from the back, `j = index(i + 1)`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Golden-ratio increment used to derive sub-stream seeds.
pub const STREAM_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

pub struct Rng(Xoshiro256StarStar);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Independent stream for `(seed, stream)`, e.g. one per epoch.
    pub fn keyed(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_add(1).wrapping_mul(STREAM_MIX))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
