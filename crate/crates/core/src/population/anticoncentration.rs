//! Small-ball probabilities of `h(0)` and of the two quadratic statistics
//! that control it, over random sign vectors.

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use super::PopulationParams;
use crate::montecarlo::wilson_interval;
use crate::network::{sample_c, CMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `h(0)`, scaled by its root mean square over the sign draws.
    H0,
    /// `(sum_i lambda_i c_i)(sum_i lambda_i c_hat_i)`, scale `lambda_min^2`.
    ProductOfSums,
    /// `sum_i lambda_i^2 c_i c_hat_i`, scale `lambda_min^2 / sqrt(k)`.
    WeightedInner,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::H0, Statistic::ProductOfSums, Statistic::WeightedInner];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AntiConcentrationRow {
    pub statistic: Statistic,
    pub gamma: f64,
    pub hits: usize,
    pub trials: usize,
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AntiConcentrationTable {
    pub k: usize,
    /// Scale each statistic is compared against, in `Statistic::ALL` order.
    pub scales: [f64; 3],
    pub rows: Vec<AntiConcentrationRow>,
}

impl AntiConcentrationTable {
    pub fn row(&self, statistic: Statistic, gamma: f64) -> Option<&AntiConcentrationRow> {
        self.rows.iter().find(|r| r.statistic == statistic && r.gamma == gamma)
    }
}

/// Resamples `(c, c_hat)` uniformly from `{+-1/sqrt(k)}^k` for each trial and
/// records `Pr[|statistic| < gamma * scale]` on the grid, with 95% Wilson
/// intervals. The signs in `params` are ignored.
pub fn h0_anticoncentration<R: Rng + ?Sized>(
    params: &PopulationParams,
    trials: usize,
    gamma_grid: &[f64],
    rng: &mut R,
) -> AntiConcentrationTable {
    let k = params.k();
    let kf = k as f64;
    let lambda = &params.lambda;
    let lambda_min = lambda.iter().fold(f64::INFINITY, |a, l| a.min(l.abs()));
    let a = params.h0_matrix();
    // E[h(0)^2] = sum_ij a_ij^2 / k^2 for independent uniform signs.
    let h0_rms = a.iter().map(|v| v * v).sum::<f64>().sqrt() / kf;
    let scales = [h0_rms, lambda_min * lambda_min, lambda_min * lambda_min / kf.sqrt()];
    let lambda2 = lambda.component_mul(lambda);

    let mut samples: [Vec<f64>; 3] = Default::default();
    for _ in 0..trials {
        let c = sample_c(k, CMode::Quantized, rng);
        let c_hat = sample_c(k, CMode::Quantized, rng);
        let h0 = c.dot(&(&a * &c_hat));
        samples[0].push(h0);
        samples[1].push(lambda.dot(&c) * lambda.dot(&c_hat));
        samples[2].push(lambda2.dot(&c.component_mul(&c_hat)));
    }
    let mut rows = Vec::new();
    for (idx, statistic) in Statistic::ALL.into_iter().enumerate() {
        for &gamma in gamma_grid {
            let threshold = gamma * scales[idx];
            let hits = samples[idx].iter().filter(|v| v.abs() < threshold).count();
            let (lower, upper) = wilson_interval(hits, trials, 1.96);
            rows.push(AntiConcentrationRow {
                statistic,
                gamma,
                hits,
                trials,
                probability: hits as f64 / trials.max(1) as f64,
                lower,
                upper,
            });
        }
    }
    AntiConcentrationTable { k, scales, rows }
}

/// Identity Gram (orthonormal rows) and unit second layer; the signs are
/// placeholders since the experiment resamples them.
pub fn identity_gram_params(k: usize, xi: f64, activation: crate::hermite::Activation) -> PopulationParams {
    let ones = DVector::from_element(k, 1.0);
    PopulationParams {
        gram: nalgebra::DMatrix::identity(k, k),
        lambda: ones.clone(),
        c: ones.clone() / (k as f64).sqrt(),
        c_hat: ones / (k as f64).sqrt(),
        xi,
        activation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::Activation;
    use crate::rng::SeedTree;

    #[test]
    fn gamma_zero_has_no_hits_and_rows_are_monotone() {
        let p = identity_gram_params(16, 1.0, Activation::relu());
        let mut rng = SeedTree::new(1).stream("a", 0);
        let table = h0_anticoncentration(&p, 2000, &[0.0, 0.1, 0.4, 1.6], &mut rng);
        for s in Statistic::ALL {
            assert_eq!(table.row(s, 0.0).unwrap().hits, 0);
            let probs: Vec<f64> = [0.1, 0.4, 1.6].iter().map(|g| table.row(s, *g).unwrap().probability).collect();
            assert!(probs.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
