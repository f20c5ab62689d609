//! Seeded random number generation.
//!
//! All stochastic code in this crate draws from [`SeedStream`], a thin wrapper
//! around the counter-based ChaCha8 generator. The construction is fully
//! specified so that seeds are portable:
//!
//! - `SeedStream::new(seed)` seeds ChaCha8 with the little-endian `u64` seed
//!   (remaining key bytes zero) on stream 0.
//! - `substream(index)` reuses the same key on ChaCha stream `index`, which
//!   yields statistically independent streams for parallel work.
//! - `derive(seed, tag)` produces a child seed via two rounds of SplitMix64
//!   applied to `seed ^ tag`.
//! - Uniforms take the top 53 bits of the next `u64`; normals use the
//!   Box-Muller transform on pairs of uniforms (the second value is cached).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct SeedStream {
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

/// SplitMix64-based seed derivation for independent child generators.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    /// Same key, independent ChaCha stream.
    pub fn substream(&self, index: u64) -> Self {
        let mut rng = self.rng.clone();
        rng.set_stream(index.into());
        rng.set_word_pos(0u128);
        SeedStream {
            rng,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        (((self.rng.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.rng.next_u64() >> 11) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        // Modulo bias is negligible for desk-scale n against 2^64.
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Gamma(shape, scale) via Marsaglia-Tsang squeeze.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        assert!(shape > 0.0 && scale > 0.0);
        if shape < 1.0 {
            let boost = self.uniform().powf(1.0 / shape);
            return self.gamma(shape + 1.0, scale) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v3 * scale;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v3 + v3.ln()) {
                return d * v3 * scale;
            }
        }
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a, 1.0);
        let y = self.gamma(b, 1.0);
        x / (x + y)
    }

    /// Poisson(mean) by halving plus sequential inversion. Exact: the sum of
    /// independent Poisson(mean/2) draws is Poisson(mean), and inversion is
    /// numerically safe for mean <= 16.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        assert!(mean >= 0.0 && mean.is_finite());
        if mean == 0.0 {
            return 0;
        }
        if mean > 16.0 {
            return self.poisson(mean / 2.0) + self.poisson(mean / 2.0);
        }
        let limit = (-mean).exp();
        let mut product = self.uniform();
        let mut count = 0u64;
        while product > limit {
            product *= self.uniform();
            count += 1;
        }
        count
    }
}
