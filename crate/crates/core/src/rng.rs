//! Counter-based deterministic random numbers.
//!
//! The generator is SplitMix64 used in counter mode: draw `n` of a stream
//! with key `k` is `finalize(k + n·γ)`, where `γ` is the 64-bit golden-ratio
//! increment and `finalize` is the SplitMix64 output mix. A draw depends only
//! on `(key, n)`, so results are identical on every platform and a stream can
//! be resumed from its `(key, counter)` pair.
//!
//! Child streams get a fresh key derived by hashing the parent key together
//! with a string label. The parent's counter is not advanced by splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, used only to fold labels into 64 bits before mixing.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: finalize(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
        }
    }

    /// Restores a stream at an exact position (see [`Rng::key`], [`Rng::counter`]).
    pub fn from_state(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream identified by `label`. Same parent key and label
    /// always give the same child.
    pub fn child(&self, label: &str) -> Rng {
        let mixed = finalize(self.key ^ finalize(fnv1a(label.as_bytes()).wrapping_add(GAMMA)));
        Rng {
            key: finalize(mixed.wrapping_add(0x3C6E_F372_FE94_F82B)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        finalize(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`, unbiased (rejection sampling).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0)");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    pub fn uniform(&mut self, lo: Real, hi: Real) -> Real {
        loop {
            let v = lo + (hi - lo) * self.next_f64() as Real;
            if v < hi {
                return v;
            }
        }
    }

    /// Standard normal draw (Box–Muller, cosine branch; one draw per call).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: Real, hi: Real) -> Result<Tensor> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidRange(format!("uniform needs lo < hi, got [{lo}, {hi})")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], mean: Real, stddev: Real) -> Result<Tensor> {
        if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidRange(format!(
                "normal needs finite mean and stddev >= 0, got mean {mean}, stddev {stddev}"
            )));
        }
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| mean + stddev * self.standard_normal() as Real)
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
