//! Seeded, serializable random stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Counter-based random stream. Identical seed and call sequence give a
/// bit-identical sample sequence; the position can be saved and restored.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serialized form: seed plus stream position in 32-bit words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot { seed: self.seed, word_pos: self.position() }
    }

    pub fn restore(snap: RngSnapshot) -> Self {
        let mut state = Self::new(snap.seed);
        state.inner.set_word_pos(snap.word_pos);
        state
    }

    /// Independent child stream, e.g. one per dataset split.
    pub fn fork(&mut self, salt: u64) -> Self {
        let s: u64 = self.inner.gen();
        Self::new(s ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on the open interval `(eps, 1 - eps)`.
    pub fn open_uniform(&mut self, eps: f64) -> f64 {
        eps + (1.0 - 2.0 * eps) * self.uniform()
    }

    /// Standard Gumbel sample `-ln(-ln u)`, `u` kept away from 0 and 1.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.open_uniform(GUMBEL_EPS);
        -(-u.ln()).ln()
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; one draw per call keeps the stream layout simple.
        let u1 = self.open_uniform(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

pub const GUMBEL_EPS: f64 = 1e-12;
