//! Population quantities of the normalized model.
//!
//! With `m = <u, u_hat>`, `q = 1/(1 + xi^2/k)` and both `u`, `u_hat`
//! orthogonal to span(W), the expected spherical gradient of the squared loss
//! is `-h(m) (u - u_hat m)` where
//!
//! ```text
//! h(m) = 2 sum_ij lambda_i lambda_j xi^2 c_i c_hat_j
//!          sum_p p mu_p^2 q^p (G_ij + xi^2 c_i c_hat_j m)^(p-1).
//! ```
//!
//! [`h_closed`] evaluates this directly. [`h_series`] evaluates the same
//! function reorganized as a power series in `m` whose coefficients involve
//! the moment Grams `T(l, s)`; the two agree exactly for finite Hermite
//! expansions and within their tail bounds otherwise.

mod anticoncentration;
mod montecarlo;

pub use anticoncentration::{h0_anticoncentration, identity_gram_params, AntiConcentrationRow, AntiConcentrationTable, Statistic};
pub use montecarlo::{mc_population_gradient, mc_population_loss, GradientEstimate};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::hermite::Activation;
use crate::network::{perturbed_neurons, NeuronScaling, TeacherModel};

/// Everything `h` and the population gradient depend on.
#[derive(Debug, Clone)]
pub struct PopulationParams {
    pub gram: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub c: DVector<f64>,
    pub c_hat: DVector<f64>,
    pub xi: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HEvalReport {
    pub value: f64,
    /// Bound on the magnitude of everything the evaluation dropped.
    pub truncation_bound: f64,
    pub terms_used: usize,
}

impl PopulationParams {
    pub fn new(
        gram: DMatrix<f64>,
        lambda: DVector<f64>,
        c: DVector<f64>,
        c_hat: DVector<f64>,
        xi: f64,
        activation: Activation,
    ) -> Result<Self> {
        let k = gram.nrows();
        if gram.ncols() != k || lambda.len() != k || c.len() != k || c_hat.len() != k {
            return Err(Error::invalid("gram, lambda, c and c_hat must all have size k"));
        }
        for i in 0..k {
            if (gram[(i, i)] - 1.0).abs() > 1e-10 {
                return Err(Error::NonUnitNeuron {
                    index: i,
                    norm: gram[(i, i)].sqrt(),
                });
            }
            for j in 0..i {
                if (gram[(i, j)] - gram[(j, i)]).abs() > 1e-10 {
                    return Err(Error::invalid("gram matrix is not symmetric"));
                }
            }
        }
        Ok(PopulationParams {
            gram,
            lambda,
            c,
            c_hat,
            xi,
            activation,
        })
    }

    /// Parameters of `teacher` against a student with sign vector `c_hat`.
    pub fn from_teacher(teacher: &TeacherModel, c_hat: &DVector<f64>) -> Result<Self> {
        PopulationParams::new(
            teacher.base.gram(),
            teacher.base.lambda().clone(),
            teacher.pert.c.clone(),
            c_hat.clone(),
            teacher.pert.xi,
            teacher.base.activation().clone(),
        )
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    /// `q = 1/(1 + xi^2/k)`.
    pub fn q(&self) -> f64 {
        1.0 / (1.0 + self.xi * self.xi / self.k() as f64)
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().fold(0.0, |a, l| a.max(l.abs()))
    }

    /// Both sign vectors have entries `+-1/sqrt(k)`.
    pub fn is_quantized(&self) -> bool {
        let a = 1.0 / (self.k() as f64).sqrt();
        self.c
            .iter()
            .chain(self.c_hat.iter())
            .all(|v| (v.abs() - a).abs() <= 1e-12)
    }

    /// Coefficients `a_ij` with `h(0) = sum_ij a_ij c_i c_hat_j`.
    pub fn h0_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let q = self.q();
        let xi2 = self.xi * self.xi;
        DMatrix::from_fn(k, k, |i, j| {
            let g = self.gram[(i, j)];
            let mut sum = 0.0;
            let mut gp = 1.0;
            for p in 1..=self.activation.truncation_order() {
                let mu = self.activation.mu(p);
                sum += p as f64 * mu * mu * q.powi(p as i32) * gp;
                gp *= g;
            }
            2.0 * self.lambda[i] * self.lambda[j] * xi2 * sum
        })
    }
}

fn check_m(m: f64) -> Result<()> {
    if !(m.abs() <= 1.0) {
        return Err(Error::invalid(format!("overlap m must satisfy |m| <= 1, got {m}")));
    }
    Ok(())
}

/// `(T_odd(s), T_even(s))`: `sum_ij lambda_i lambda_j G_ij^s` and
/// `k sum_ij lambda_i lambda_j c_i c_hat_j G_ij^s`, with `0^0 = 1`.
pub fn moment_gram_pair(params: &PopulationParams, s: usize) -> (f64, f64) {
    let k = params.k();
    let (mut odd, mut even) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = params.lambda[i] * params.lambda[j] * params.gram[(i, j)].powi(s as i32);
            odd += w;
            even += w * params.c[i] * params.c_hat[j];
        }
    }
    (odd, k as f64 * even)
}

/// `h(m)` from the closed double sum, truncated at the activation order.
pub fn h_closed(params: &PopulationParams, m: f64) -> Result<HEvalReport> {
    check_m(m)?;
    let k = params.k();
    let act = &params.activation;
    let order = act.truncation_order();
    let q = params.q();
    let xi2 = params.xi * params.xi;
    // p mu_p^2 q, reused for every pair.
    let weights: Vec<f64> = (0..=order)
        .map(|p| p as f64 * act.mu(p) * act.mu(p) * q)
        .collect();
    let mut value = 0.0;
    let mut bound = 0.0;
    for i in 0..k {
        for j in 0..k {
            let cc = params.c[i] * params.c_hat[j];
            let coef = 2.0 * params.lambda[i] * params.lambda[j] * xi2 * cc;
            if coef == 0.0 {
                continue;
            }
            // q^p a^(p-1) = q (q a)^(p-1).
            let r = q * (params.gram[(i, j)] + xi2 * cc * m);
            let mut rp = 1.0;
            let mut inner = 0.0;
            for w in weights.iter().skip(1) {
                inner += w * rp;
                rp *= r;
            }
            value += coef * inner;
            bound += coef.abs() * q * act.tail_bound(r, 1.0);
        }
    }
    Ok(HEvalReport {
        value,
        truncation_bound: bound,
        terms_used: k * k * order,
    })
}

/// `h(m)` from the power series in `m`, keeping `l <= max_l`, `s <= max_s`
/// and `l + s + 1` up to the activation order. Requires quantized signs,
/// which the reorganization relies on.
// `s` indexes both the Gram moments and the binomial weights.
#[allow(clippy::needless_range_loop)]
pub fn h_series(params: &PopulationParams, m: f64, max_l: usize, max_s: usize) -> Result<HEvalReport> {
    check_m(m)?;
    if !params.is_quantized() {
        return Err(Error::invalid("the (l, s) series needs c and c_hat in {+-1/sqrt(k)}^k"));
    }
    let k = params.k() as f64;
    let act = &params.activation;
    let order = act.truncation_order();
    let q = params.q();
    let ratio = params.xi * params.xi / k;
    let grams: Vec<(f64, f64)> = (0..order).map(|s| moment_gram_pair(params, s)).collect();
    // Crude |T(l, s)| <= k^2 lambda_max^2.
    let t_max = k * k * params.lambda_max().powi(2);

    // |term(l, s)| / |T|, in log space.
    let log_weight = |l: usize, s: usize| -> Option<f64> {
        let p = l + s + 1;
        let mu = act.mu(p);
        if mu == 0.0 || ratio == 0.0 {
            return None;
        }
        let mut lw = ln_binomial((l + s) as u64, l as u64)
            + (p as f64).ln()
            + 2.0 * mu.abs().ln()
            + p as f64 * q.ln()
            + (l + 1) as f64 * ratio.ln();
        if l > 0 {
            if m == 0.0 {
                return None;
            }
            lw += l as f64 * m.abs().ln();
        }
        Some(lw)
    };

    let mut value = 0.0;
    let mut dropped = 0.0;
    let mut terms = 0;
    for l in 0..order {
        let sign_m = if l % 2 == 1 && m < 0.0 { -1.0 } else { 1.0 };
        for s in 0..order - l {
            let Some(lw) = log_weight(l, s) else { continue };
            if l <= max_l && s <= max_s {
                let t = if l % 2 == 1 { grams[s].0 } else { grams[s].1 };
                value += 2.0 * sign_m * lw.exp() * t;
                terms += 1;
            } else {
                dropped += 2.0 * lw.exp() * t_max;
            }
        }
    }
    // Orders beyond the truncation: sum over l of each p-term collapses to
    // (xi^2/k) q sum_p p mu_p^2 (q (1 + xi^2 |m| / k))^(p-1).
    let r = q * (1.0 + ratio * m.abs());
    let tail = 2.0 * ratio * t_max * q * act.tail_bound(r, 1.0);
    Ok(HEvalReport {
        value,
        truncation_bound: dropped + tail,
        terms_used: terms,
    })
}

/// `-h(m) (u - u_hat m)` with `m = <u, u_hat>`.
pub fn population_gradient(params: &PopulationParams, u: &DVector<f64>, u_hat: &DVector<f64>) -> Result<DVector<f64>> {
    let m = u.dot(u_hat).clamp(-1.0, 1.0);
    let h = h_closed(params, m)?.value;
    Ok((u - u_hat * m) * (-h))
}

/// Analytic `E (f*(x) - f_hat(x))^2` for a student `(c_hat, u_hat)`.
///
/// Uses `E[sigma(<a,x>) sigma(<b,x>)] = sum_p mu_p^2 <a,b>^p`, valid for unit
/// neurons, so both models must use the normalized scaling with unit rows.
pub fn population_loss(teacher: &TeacherModel, c_hat: &DVector<f64>, u_hat: &DVector<f64>) -> Result<HEvalReport> {
    if teacher.scaling != NeuronScaling::Normalized {
        return Err(Error::invalid("analytic loss needs the normalized neuron scaling"));
    }
    let base = &teacher.base;
    let v = teacher.neurons();
    let v_hat = perturbed_neurons(base.w(), teacher.pert.xi, c_hat, u_hat, NeuronScaling::Normalized);
    for (index, row) in v.row_iter().chain(v_hat.row_iter()).enumerate() {
        let norm = row.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::NonUnitNeuron {
                index: index % base.k(),
                norm,
            });
        }
    }
    let act = base.activation();
    let order = act.truncation_order();
    let pair = |rho: f64| -> (f64, f64) {
        let rho = rho.clamp(-1.0, 1.0);
        let mut value = 0.0;
        let mut rp = 1.0;
        for p in 0..=order {
            value += act.mu(p).powi(2) * rp;
            rp *= rho;
        }
        // sum_{p > P} mu_p^2 rho^p <= |rho| sum p^0 mu_p^2 |rho|^(p-1).
        (value, rho.abs() * act.tail_bound(rho, 0.0))
    };
    let gs = v * v.transpose();
    let gh = &v_hat * v_hat.transpose();
    let gx = v * v_hat.transpose();
    let lambda = base.lambda();
    let (mut value, mut bound) = (0.0, 0.0);
    for i in 0..base.k() {
        for j in 0..base.k() {
            let ll = lambda[i] * lambda[j];
            let (a, ta) = pair(gs[(i, j)]);
            let (b, tb) = pair(gh[(i, j)]);
            let (c, tc) = pair(gx[(i, j)]);
            value += ll * (a + b - 2.0 * c);
            bound += ll.abs() * (ta + tb + 2.0 * tc);
        }
    }
    Ok(HEvalReport {
        value,
        truncation_bound: bound,
        terms_used: base.k() * base.k() * 3 * (order + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::ActivationKind;
    use crate::network::{make_orthonormal_weights, sample_c, sample_perturbation, BaseModel, CMode};
    use crate::rng::{unit_vector, SeedTree};

    fn random_params(seed: u64, k: usize, d: usize, xi: f64, act: Activation, orthonormal: bool) -> PopulationParams {
        let tree = SeedTree::new(seed);
        let mut rng = tree.stream("instance", 0);
        let w = if orthonormal {
            make_orthonormal_weights(k, d, &mut rng).unwrap()
        } else {
            let mut w = DMatrix::zeros(k, d);
            for i in 0..k {
                w.set_row(i, &unit_vector(&mut rng, d).transpose());
            }
            w
        };
        let gram = &w * w.transpose();
        let c = sample_c(k, CMode::Quantized, &mut rng);
        let c_hat = sample_c(k, CMode::Quantized, &mut rng);
        PopulationParams::new(gram, DVector::from_element(k, 1.0), c, c_hat, xi, act).unwrap()
    }

    #[test]
    fn moment_grams_reduce_for_orthonormal_rows() {
        let p = random_params(1, 5, 12, 1.0, Activation::relu(), true);
        let dot: f64 = p.c.dot(&p.c_hat);
        for s in 1..4 {
            let (odd, even) = moment_gram_pair(&p, s);
            assert!((odd - 5.0).abs() < 1e-12);
            assert!((even - 5.0 * dot).abs() < 1e-12);
        }
        let (odd, even) = moment_gram_pair(&p, 0);
        assert!((odd - 25.0).abs() < 1e-12);
        assert!((even - 5.0 * p.c.sum() * p.c_hat.sum()).abs() < 1e-12);
    }

    #[test]
    fn moment_gram_matches_explicit_tensors() {
        // s = 2: <sum_i a_i w_i (x) w_i, sum_j b_j w_j (x) w_j>_F.
        let tree = SeedTree::new(2);
        let mut rng = tree.stream("w", 0);
        let (k, d) = (3, 4);
        let mut w = DMatrix::zeros(k, d);
        for i in 0..k {
            w.set_row(i, &unit_vector(&mut rng, d).transpose());
        }
        let lambda = DVector::from_vec(vec![0.7, -1.2, 2.0]);
        let c = sample_c(k, CMode::Quantized, &mut rng);
        let c_hat = sample_c(k, CMode::Quantized, &mut rng);
        let p = PopulationParams::new(&w * w.transpose(), lambda.clone(), c.clone(), c_hat.clone(), 1.0, Activation::relu()).unwrap();
        let tensor = |coef: &dyn Fn(usize) -> f64| {
            let mut t = DMatrix::zeros(d, d);
            for i in 0..k {
                let wi = w.row(i).transpose();
                t += &wi * wi.transpose() * coef(i);
            }
            t
        };
        let a = tensor(&|i| lambda[i]);
        let ac = tensor(&|i| lambda[i] * c[i]);
        let ach = tensor(&|i| lambda[i] * c_hat[i]);
        let (odd, even) = moment_gram_pair(&p, 2);
        assert!((odd - a.dot(&a)).abs() < 1e-12);
        assert!((even - k as f64 * ac.dot(&ach)).abs() < 1e-12);
        // s = 3 against an explicit 3-tensor.
        let t3 = |coef: &dyn Fn(usize) -> f64| {
            let mut t = vec![0.0; d * d * d];
            for i in 0..k {
                for a in 0..d {
                    for b in 0..d {
                        for e in 0..d {
                            t[(a * d + b) * d + e] += coef(i) * w[(i, a)] * w[(i, b)] * w[(i, e)];
                        }
                    }
                }
            }
            t
        };
        let x = t3(&|i| lambda[i] * c[i]);
        let y = t3(&|i| lambda[i] * c_hat[i]);
        let (_, even3) = moment_gram_pair(&p, 3);
        let direct: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((even3 - k as f64 * direct).abs() < 1e-12);
    }

    #[test]
    fn h_closed_for_single_hermite_term() {
        let k = 4;
        let act = Activation::new(ActivationKind::Hermite(3), 6).unwrap();
        let p = random_params(3, k, 10, 1.7, act, false);
        let q = p.q();
        let xi2 = p.xi * p.xi;
        for m in [-1.0, -0.3, 0.0, 0.45, 1.0] {
            let mut expected = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let cc = p.c[i] * p.c_hat[j];
                    expected += cc * (p.gram[(i, j)] + xi2 * cc * m).powi(2);
                }
            }
            expected *= 2.0 * 3.0 * xi2 * q.powi(3);
            let got = h_closed(&p, m).unwrap();
            assert!((got.value - expected).abs() < 1e-12);
            assert_eq!(got.truncation_bound, 0.0);
        }
        assert!(h_closed(&p, 1.01).is_err());
    }

    #[test]
    fn h_vanishes_without_c_hat() {
        let mut p = random_params(4, 3, 9, 1.0, Activation::relu(), true);
        p.c_hat = DVector::zeros(3);
        assert_eq!(h_closed(&p, 0.4).unwrap().value, 0.0);
    }

    #[test]
    fn series_matches_closed_for_finite_expansions() {
        for (name, order) in [("he3", 4), ("quadratic", 4), ("identity", 3)] {
            let act = Activation::from_name(name, order).unwrap();
            let p = random_params(5, 4, 10, 1.3, act, false);
            for m in [-1.0, -0.5, 0.0, 0.2, 1.0] {
                let a = h_closed(&p, m).unwrap();
                let b = h_series(&p, m, 4, 4).unwrap();
                assert!((a.value - b.value).abs() < 1e-10, "{name} m={m}: {} vs {}", a.value, b.value);
                assert_eq!(b.truncation_bound, 0.0);
            }
        }
    }

    #[test]
    fn series_at_zero_keeps_only_constant_terms() {
        let p = random_params(6, 4, 10, 1.0, Activation::relu(), false);
        let q = p.q();
        let ratio = p.xi * p.xi / 4.0;
        let mut expected = 0.0;
        for s in 0..p.activation.truncation_order() {
            let mu = p.activation.mu(s + 1);
            expected += (s + 1) as f64 * mu * mu * q.powi(s as i32 + 1) * moment_gram_pair(&p, s).1;
        }
        expected *= 2.0 * ratio;
        let got = h_series(&p, 0.0, 64, 64).unwrap().value;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - h_closed(&p, 0.0).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn relu_series_agrees_within_bounds() {
        let p = random_params(7, 8, 20, 1.0, Activation::relu(), true);
        let a = h_closed(&p, 0.5).unwrap();
        let b = h_series(&p, 0.5, 40, 40).unwrap();
        assert!((a.value - b.value).abs() <= a.truncation_bound + b.truncation_bound);
    }

    #[test]
    fn gradient_is_tangent_and_vanishes_at_poles() {
        let mut rng = SeedTree::new(8).stream("g", 0);
        let w = make_orthonormal_weights(3, 10, &mut rng).unwrap();
        let pert = sample_perturbation(&w, 1.0, CMode::Quantized, &mut rng).unwrap();
        let base = BaseModel::with_unit_lambda(w, Activation::relu()).unwrap();
        let t = TeacherModel::new(base, pert.clone(), NeuronScaling::Normalized).unwrap();
        let p = PopulationParams::from_teacher(&t, &pert.c).unwrap();
        assert!(population_gradient(&p, &pert.u, &pert.u).unwrap().norm() < 1e-14);
        assert!(population_gradient(&p, &pert.u, &(-&pert.u)).unwrap().norm() < 1e-14);
        let u_hat = unit_vector(&mut rng, 10);
        let g = population_gradient(&p, &pert.u, &u_hat).unwrap();
        assert!(g.dot(&u_hat).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_at_truth_and_without_perturbation() {
        let mut rng = SeedTree::new(9).stream("l", 0);
        let w = make_orthonormal_weights(4, 12, &mut rng).unwrap();
        let pert = sample_perturbation(&w, 1.0, CMode::Quantized, &mut rng).unwrap();
        let base = BaseModel::with_unit_lambda(w.clone(), Activation::relu()).unwrap();
        let t = TeacherModel::new(base.clone(), pert.clone(), NeuronScaling::Normalized).unwrap();
        let at_truth = population_loss(&t, &pert.c, &pert.u).unwrap();
        assert!(at_truth.value.abs() <= at_truth.truncation_bound + 1e-12);

        let mut flat = pert.clone();
        flat.xi = 0.0;
        let t0 = TeacherModel::new(base, flat, NeuronScaling::Normalized).unwrap();
        let other = crate::network::SubspaceProjector::from_rows(&w).sample_complement(&mut rng).unwrap();
        assert!(population_loss(&t0, &pert.c, &other).unwrap().value.abs() < 1e-12);
    }
}
