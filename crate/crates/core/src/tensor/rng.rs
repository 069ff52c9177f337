//! Seeded random numbers.
//!
//! The generator is xoshiro256** whose 256-bit state is filled from a
//! SplitMix64 sequence started at the 64-bit seed. Sub-streams are derived
//! as `Rng::stream(seed, id)`, which seeds a fresh generator with
//! `splitmix64(seed ^ splitmix64(id))`; distinct ids give statistically
//! independent streams, and the derivation involves only integer
//! arithmetic, so streams are identical on every platform.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

/// One SplitMix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream `id` of `seed`.
    pub fn stream(seed: u64, id: u64) -> Self {
        Rng::new(splitmix64(seed ^ splitmix64(id)))
    }

    /// Sub-stream keyed by a path of ids, e.g. `(epoch, batch, pair)`.
    pub fn stream_path(seed: u64, path: &[u64]) -> Self {
        let key = path.iter().fold(seed, |acc, &id| splitmix64(acc ^ splitmix64(id)));
        Rng::new(key)
    }

    /// Draws a seed from this generator and derives sub-stream `id` from it.
    pub fn fork(&mut self, id: u64) -> Rng {
        let base = self.next_u64();
        Rng::stream(base, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `0..n` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher–Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Gamma(shape, 1), Marsaglia and Tsang's method as provided by `rand_distr`.
pub fn gamma_sample(shape: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0)
        .ok()
        .filter(|_| shape.is_finite())
        .ok_or_else(|| Error::invalid(format!("gamma shape must be positive, got {shape}")))?;
    Ok(dist.sample(&mut rng.inner))
}

/// Beta(alpha, beta) as `X / (X + Y)` with `X ~ Gamma(alpha)`, `Y ~ Gamma(beta)`.
pub fn beta_sample(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::invalid(format!(
            "beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    loop {
        let x = gamma_sample(alpha, rng)?;
        let y = gamma_sample(beta, rng)?;
        let s = x + y;
        // both draws can underflow to zero for tiny shapes
        if s > 0.0 {
            return Ok((x / s).clamp(0.0, 1.0));
        }
    }
}
