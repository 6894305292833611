//! Deterministic random numbers.
//!
//! All randomness in a run flows from one root seed. Components draw from
//! named substreams ([`Rng::substream`]) so that, e.g., corpus generation
//! and parameter initialization are independently reproducible no matter
//! what else runs in between.

use alloc::vec::Vec;

use crate::num;

/// xoshiro256** seeded through splitmix64.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the stream name; mixed into the seed for substreams.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// The seed of the named substream; lets components hand sub-seeds around
/// without materializing a generator.
pub fn derive(seed: u64, name: &str) -> u64 {
    seed ^ fnv1a64(name.as_bytes())
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { state }
    }

    /// Derives an independent generator for `name` from `seed`.
    pub fn substream(seed: u64, name: &str) -> Self {
        Rng::new(derive(seed, name))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard Gumbel draw, -ln(-ln(u)).
    pub fn gumbel(&mut self) -> f64 {
        let u = self.next_f64().clamp(1e-16, 1.0 - 1e-16);
        -num::ln(-num::ln(u))
    }

    /// Poisson draw by Knuth's product method; fine for the small means
    /// used by the corpus generator.
    pub fn poisson(&mut self, mean: f64) -> usize {
        debug_assert!(mean > 0.0 && mean < 100.0);
        let limit = num::exp(-mean);
        let mut k = 0usize;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// Rank draw from a Zipf-like distribution over `n` items:
    /// weight(r) = (r + 1)^-skew. As skew grows the draw concentrates on
    /// rank 0.
    pub fn zipf(&mut self, n: usize, skew: f64) -> usize {
        debug_assert!(n > 0);
        let mut weights = Vec::with_capacity(n);
        let mut total = 0.0;
        for r in 0..n {
            let w = num::powf((r + 1) as f64, -skew);
            total += w;
            weights.push(total);
        }
        let target = self.next_f64() * total;
        match weights.iter().position(|&c| target < c) {
            Some(r) => r,
            None => n - 1,
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index draw proportional to the given non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        let target = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}
