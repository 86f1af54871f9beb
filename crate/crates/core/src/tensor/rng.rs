use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Seeded pseudo-random source.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`. The same seed yields the
/// same draw sequence within a build. Every stochastic operation in the crate
/// takes one of these explicitly; there is no global generator.
///
/// Handles are not split from each other's state. Independent streams are
/// created with [`Rng::derive`], which hashes a root seed together with a
/// path of stream identifiers (epoch, batch, sample, ...).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh handle whose seed is a hash of `root` and `stream`.
    pub fn derive(root: u64, stream: &[u64]) -> Self {
        let seed = stream
            .iter()
            .fold(splitmix64(root), |acc, &s| splitmix64(acc ^ splitmix64(s)));
        Rng::new(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Tensor of i.i.d. draws, uniform on [lo, hi).
pub fn rand_uniform<S: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<S>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!(
            "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
        )));
    }
    let mut t = Tensor::<S>::zeros(shape)?;
    for v in t.data_mut() {
        // Narrowing to f32 can round hi - tiny up to hi; keep the interval half-open.
        let mut x = S::of(rng.uniform(lo, hi));
        if x.f64() >= hi {
            x = S::of(lo);
        }
        *v = x;
    }
    Ok(t)
}

/// One draw from the symmetric Beta(alpha, alpha) distribution.
///
/// Uses Jöhnk's rejection algorithm in log space, valid for `0 < alpha <= 1`.
/// Draws that round to exactly 0 or 1 are rejected so the result lies in the
/// open interval.
pub fn rand_beta(rng: &mut Rng, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!(
            "Beta sampler supports 0 < alpha <= 1, got {alpha}"
        )));
    }
    loop {
        let u = rng.next_f64();
        let v = rng.next_f64();
        if u == 0.0 || v == 0.0 {
            continue;
        }
        let log_x = u.ln() / alpha;
        let log_y = v.ln() / alpha;
        let log_max = log_x.max(log_y);
        let log_sum = log_max + ((log_x - log_max).exp() + (log_y - log_max).exp()).ln();
        if log_sum > 0.0 {
            continue;
        }
        let lambda = 1.0 / (1.0 + (log_y - log_x).exp());
        if lambda > 0.0 && lambda < 1.0 {
            return Ok(lambda);
        }
    }
}
