//! Seeded randomness utilities.
//!
//! All stochastic behavior in the crate flows through [`ChaCha8Rng`] streams
//! whose seeds are derived with [`derive_seed`]. Gaussian draws use the
//! Box-Muller transform implemented here (rather than a library sampler) so
//! the exact algorithm is pinned in this file and results reproduce across
//! platforms and dependency upgrades.

use rand_chacha::rand_core::{RngCore, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

/// SplitMix64 output mixing step. Reference: Steele, Lea, Flood (2014).
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a tag path.
///
/// Used to split one user-facing seed into per-image, per-step and per-layer
/// streams without correlated output.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x51_7C_C1_B7_27_22_0A_95;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out = splitmix64(&mut state);
    }
    out
}

/// Seeded generator for one derived stream.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi].
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Unbiased uniform index in [0, n) by rejection sampling.
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0);
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle driven by [`uniform_index`].
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Standard normal draws via the Box-Muller transform.
///
/// Each pair of uniforms (u1, u2) in (0,1] x [0,1) maps to
/// `r = sqrt(-2 ln u1)`, `z0 = r cos(2 pi u2)`, `z1 = r sin(2 pi u2)`;
/// the second draw of the pair is cached.
pub struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self { rng, spare: None }
    }

    /// One draw from N(0, 1).
    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0,1]: shift the [0,1) draw away from zero so ln is finite.
        let u1 = 1.0 - uniform_f64(&mut self.rng);
        let u2 = uniform_f64(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// One draw from N(mu, sigma^2).
    pub fn next(&mut self, mu: f64, sigma: f64) -> f64 {
        mu + sigma * self.next_standard()
    }
}
