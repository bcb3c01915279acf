//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`SeedTree`]: a root seed plus
//! a stream name (and index) hashed into an independent ChaCha8 key. Streams
//! never share state, so adding draws to one stream does not perturb another,
//! and parallel workers can each own a stream keyed by their block index.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Canonical stream names used by the experiment harness.
pub mod streams {
    pub const INSTANCE: &str = "instance";
    pub const INIT: &str = "init";
    pub const DATA: &str = "data";
    pub const C_HAT: &str = "c-hat";
    pub const EVAL: &str = "eval";
    pub const MONTE_CARLO: &str = "monte-carlo";

    pub const ALL: [&str; 6] = [INSTANCE, INIT, DATA, C_HAT, EVAL, MONTE_CARLO];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// A child tree, e.g. one per seed of a sweep.
    pub fn child(&self, name: &str, index: u64) -> SeedTree {
        let mut rng = self.stream(name, index);
        SeedTree { root: rng.random() }
    }
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Uniform draw from the unit sphere S^{dim-1}.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    loop {
        let g = gaussian_vector(rng, dim);
        let n = g.norm();
        if n > 1e-300 {
            return g / n;
        }
    }
}
