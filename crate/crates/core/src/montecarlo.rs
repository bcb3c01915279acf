//! Block-parallel Monte Carlo with results independent of the thread count.
//!
//! Samples are split into fixed-size blocks; block `b` draws from its own
//! stream `(name, b)` of the seed tree, so the sample set does not depend on
//! scheduling. Per-block moments are merged in block order.

use rayon::prelude::*;

use crate::rng::{SeedTree, StreamRng};

pub const BLOCK_SIZE: usize = 4096;

/// Running mean and centred second moment per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unbiased sample variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    /// Standard error of the mean per coordinate.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Averages `sample(rng, out)` over `n` draws. `sample` writes one
/// `dim`-vector per call.
pub fn estimate<F>(tree: &SeedTree, stream: &str, n: usize, dim: usize, sample: F) -> Moments
where
    F: Fn(&mut StreamRng, &mut [f64]) + Sync,
{
    let blocks = n.div_ceil(BLOCK_SIZE);
    let partial: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree.stream(stream, b as u64);
            let mut out = vec![0.0; dim];
            let mut acc = Moments::new(dim);
            let len = BLOCK_SIZE.min(n - b * BLOCK_SIZE);
            for _ in 0..len {
                sample(&mut rng, &mut out);
                acc.push(&out);
            }
            acc
        })
        .collect();
    let mut total = Moments::new(dim);
    for m in &partial {
        total.merge(m);
    }
    total
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}
