//! Counter-based random streams.
//!
//! Every Brownian increment is addressed by `(seed_root, path, step, component)`.
//! A path owns one ChaCha stream; the word position inside the stream is a
//! pure function of `(step, component)`, so any worker can regenerate any
//! increment without replaying the ones before it. This is what makes bundles
//! independent of thread count and lets runs at different noise levels or
//! start times share the exact same increments.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::Vector;

/// 32-bit words consumed by one standard normal (two `u64` draws).
const WORDS_PER_NORMAL: u128 = 4;

#[inline]
fn open_unit(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below stays finite.
    ((bits >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Box-Muller draw with fixed consumption of two `u64` values.
#[inline]
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = open_unit(rng.next_u64());
    let u2 = open_unit(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    lo + (hi - lo) * u
}

/// An independent stream for item `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a child seed from a root seed, a label and integer coordinates.
pub fn derive_seed(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Standard Brownian increments on a uniform grid, addressed by global step.
#[derive(Debug, Clone, Copy)]
pub struct BrownianSource {
    pub seed_root: u64,
    pub dim: usize,
    pub dt: f64,
}

impl BrownianSource {
    pub fn new(seed_root: u64, dim: usize, dt: f64) -> Self {
        Self { seed_root, dim, dt }
    }

    /// Cursor positioned at the first increment of `start_step` for `path`.
    pub fn cursor(&self, path: u64, start_step: usize) -> BrownianCursor {
        let mut rng = stream(self.seed_root, path);
        rng.set_word_pos(start_step as u128 * self.dim as u128 * WORDS_PER_NORMAL);
        BrownianCursor {
            rng,
            dim: self.dim,
            scale: self.dt.sqrt(),
        }
    }

    /// Standard normals (not scaled by `sqrt(dt)`) of one step.
    pub fn normals(&self, path: u64, step: usize) -> Vector {
        let mut cursor = self.cursor(path, step);
        Vector::from_fn(self.dim, |_, _| standard_normal(&mut cursor.rng))
    }
}

/// Sequential reader over the increments of one path.
pub struct BrownianCursor {
    rng: ChaCha8Rng,
    dim: usize,
    scale: f64,
}

impl BrownianCursor {
    /// Next vector of standard normals.
    pub fn next_normals(&mut self) -> Vector {
        let rng = &mut self.rng;
        Vector::from_fn(self.dim, |_, _| standard_normal(rng))
    }

    /// Next increment `sqrt(dt) * xi`.
    pub fn next_increment(&mut self) -> Vector {
        self.next_normals() * self.scale
    }
}
