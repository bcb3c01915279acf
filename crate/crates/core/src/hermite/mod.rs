//! Normalized probabilist's Hermite polynomials and Gaussian expectations.
//!
//! `h_p = He_p / sqrt(p!)` form an orthonormal basis of L^2(N(0,1)), and for
//! unit vectors u, v and x ~ N(0, I): E[h_p(<u,x>) h_q(<v,x>)] = 1{p=q} <u,v>^p.
//! Every analytic formula elsewhere in the crate is built on that identity.

mod activation;
pub mod quadrature;

pub use activation::{Activation, ActivationKind, Table, DEFAULT_ORDER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use quadrature::{GaussHermite, PiecewiseGaussian};

/// h_p(a) = He_p(a) / sqrt(p!).
pub fn hermite_poly(p: usize, a: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..p {
        let next = (a * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[p] = h_p(a)` for p = 0..out.len().
pub fn hermite_values(a: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = a;
    }
    for j in 1..out.len() - 1 {
        out[j + 1] = (a * out[j] - (j as f64).sqrt() * out[j - 1]) / ((j + 1) as f64).sqrt();
    }
}

/// E[h_p(<u,x>) h_q(<v,x>)] for unit u, v with <u,v> = rho.
pub fn gaussian_correlation(p: usize, q: usize, rho: f64) -> f64 {
    if p != q {
        0.0
    } else {
        rho.powi(p as i32)
    }
}

/// Evaluate sum_p coeffs[p] h_p(a).
pub fn hermite_series(coeffs: &[f64], a: f64) -> f64 {
    let mut h = vec![0.0; coeffs.len()];
    hermite_values(a, &mut h);
    coeffs.iter().zip(&h).map(|(c, h)| c * h).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    /// Node count; `None` means max(200, 4P).
    pub nodes: Option<usize>,
    /// Largest allowed change of any coefficient when the node count doubles.
    pub tolerance: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            nodes: None,
            tolerance: 1e-10,
        }
    }
}

pub fn default_node_count(order: usize) -> usize {
    200.max(4 * order)
}

/// Hermite coefficients mu_p = E[sigma(g) h_p(g)], p = 0..=order, by
/// Gauss–Hermite quadrature, checked against a rule with twice the nodes.
pub fn hermite_coeffs(
    sigma: impl Fn(f64) -> f64,
    order: usize,
    opts: QuadratureOptions,
) -> Result<Vec<f64>> {
    if order < 1 {
        return Err(Error::invalid("truncation order P must be at least 1"));
    }
    let nodes = opts.nodes.unwrap_or_else(|| default_node_count(order));
    if nodes < 2 * order + 2 {
        return Err(Error::invalid(format!(
            "need at least 2P+2 = {} nodes, got {nodes}",
            2 * order + 2
        )));
    }
    let coarse = GaussHermite::cached(nodes)?.hermite_projections(&sigma, order);
    let fine = GaussHermite::cached(2 * nodes)?.hermite_projections(&sigma, order);
    check_agreement(&coarse, &fine, opts.tolerance)?;
    Ok(fine)
}

/// Same as [`hermite_coeffs`] for integrands with kinks: composite
/// Gauss–Legendre against the Gaussian density with panel edges at the given
/// breakpoints, checked by halving the panel width.
pub fn hermite_coeffs_piecewise(
    sigma: impl Fn(f64) -> f64,
    order: usize,
    breakpoints: &[f64],
    tolerance: f64,
) -> Result<Vec<f64>> {
    if order < 1 {
        return Err(Error::invalid("truncation order P must be at least 1"));
    }
    // h_p(x) phi(x) is negligible beyond |x| ~ 2 sqrt(p) + 10; phi(38) is
    // already ~1e-314.
    let limit = (2.0 * (order as f64).sqrt() + 12.0).min(38.0);
    let width = 0.25_f64.min(2.0 / (order as f64).sqrt().max(1.0));
    let coarse = PiecewiseGaussian::new(breakpoints, limit, width, 16)
        .hermite_projections(&sigma, order);
    let fine = PiecewiseGaussian::new(breakpoints, limit, 0.5 * width, 16)
        .hermite_projections(&sigma, order);
    check_agreement(&coarse, &fine, tolerance)?;
    Ok(fine)
}

fn check_agreement(coarse: &[f64], fine: &[f64], tolerance: f64) -> Result<()> {
    for (index, (a, b)) in coarse.iter().zip(fine).enumerate() {
        let change = (a - b).abs();
        if !(change <= tolerance) {
            return Err(Error::QuadratureNotConverged {
                index,
                change,
                tolerance,
            });
        }
    }
    Ok(())
}

/// Decay envelope |mu_p| <= c * p^{-1-rho}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub c: f64,
    pub rho: f64,
}

impl DecayParams {
    pub fn envelope(&self, p: usize) -> f64 {
        self.c * (p as f64).powf(-1.0 - self.rho)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    /// Every p >= 1 with |mu_p| > C p^{-1-rho}, ascending.
    pub violations: Vec<usize>,
}

impl DecayReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.violations.first().copied()
    }

    pub fn largest_violation(&self) -> Option<usize> {
        self.violations.last().copied()
    }
}

pub fn check_decay(coeffs: &[f64], c_sigma: f64, rho: f64) -> DecayReport {
    let env = DecayParams { c: c_sigma, rho };
    let violations = coeffs
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(p, mu)| mu.abs() > env.envelope(p) * (1.0 + 1e-12))
        .map(|(p, _)| p)
        .collect();
    DecayReport { violations }
}

/// Fit an envelope to computed coefficients.
///
/// For finite expansions rho is fixed at 1. Otherwise rho comes from a
/// log-log slope over the upper half of the significant coefficients, backed
/// off by 0.05 so the envelope decays no faster than the data, and C is the
/// smallest constant covering every computed coefficient.
pub fn fit_decay(coeffs: &[f64], finite: bool) -> DecayParams {
    let significant: Vec<(f64, f64)> = coeffs
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, mu)| mu.abs() > 1e-12)
        .map(|(p, mu)| ((p as f64).ln(), mu.abs().ln()))
        .collect();
    let rho = if finite || significant.len() < 3 {
        1.0
    } else {
        let upper = &significant[significant.len() / 2..];
        let n = upper.len() as f64;
        let mx = upper.iter().map(|p| p.0).sum::<f64>() / n;
        let my = upper.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = upper.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = upper.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { -2.0 };
        (-slope - 1.0 - 0.05).clamp(0.01, 4.0)
    };
    let c = coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(p, mu)| mu.abs() * (p as f64).powf(1.0 + rho))
        .fold(0.0, f64::max);
    DecayParams { c, rho }
}

/// Upper bound on sum_{p > start} p^{-exponent} r^{p-1}, for r in [0, 1] and
/// exponent > 1. Infinite when r > 1.
pub fn power_tail(start: usize, r: f64, exponent: f64) -> f64 {
    let r = r.abs();
    if r > 1.0 + 1e-12 {
        return f64::INFINITY;
    }
    let start = start.max(1);
    let integral = if exponent > 1.0 {
        (start as f64).powf(1.0 - exponent) / (exponent - 1.0)
    } else {
        f64::INFINITY
    };
    if r >= 1.0 - 1e-12 {
        return integral;
    }
    let mut sum = 0.0;
    let mut rp = r.powi(start as i32);
    let mut p = start + 1;
    loop {
        let term = (p as f64).powf(-exponent) * rp;
        sum += term;
        rp *= r;
        let remainder = ((p + 1) as f64).powf(-exponent) * rp / (1.0 - r);
        if remainder <= 1e-18 * sum.max(1e-300) || p - start > 200_000 || rp == 0.0 {
            return (sum + remainder).min(integral);
        }
        p += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_poly_examples() {
        assert_eq!(hermite_poly(0, 3.7), 1.0);
        assert!((hermite_poly(2, 0.0) + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        // He_3(1) = 1 - 3 = -2.
        assert!((hermite_poly(3, 1.0) + 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hermite_values_match_single_evaluation() {
        let mut h = vec![0.0; 15];
        hermite_values(0.73, &mut h);
        for (p, v) in h.iter().enumerate() {
            assert!((v - hermite_poly(p, 0.73)).abs() < 1e-14);
        }
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(gaussian_correlation(2, 3, 0.5), 0.0);
        assert_eq!(gaussian_correlation(3, 3, 1.0), 1.0);
        assert!((gaussian_correlation(2, 2, -0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn orthonormality_under_quadrature() {
        let rule = GaussHermite::new(200).unwrap();
        for p in 0..=12 {
            for q in 0..=12 {
                let e = rule.expect(|x| hermite_poly(p, x) * hermite_poly(q, x));
                let want = if p == q { 1.0 } else { 0.0 };
                assert!((e - want).abs() < 1e-10, "p={p} q={q} got {e}");
            }
        }
    }

    #[test]
    fn coeffs_of_identity_and_hermite() {
        let mu = hermite_coeffs(|a| a, 5, QuadratureOptions::default()).unwrap();
        let want = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in mu.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let mu = hermite_coeffs(|a| hermite_poly(3, a), 6, QuadratureOptions::default()).unwrap();
        for (p, v) in mu.iter().enumerate() {
            let want = if p == 3 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn coeffs_reject_bad_orders() {
        assert!(hermite_coeffs(|a| a, 0, QuadratureOptions::default()).is_err());
        let opts = QuadratureOptions {
            nodes: Some(9),
            ..Default::default()
        };
        assert!(matches!(
            hermite_coeffs(|a| a, 4, opts),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kinked_integrand_reports_non_convergence_on_plain_rule() {
        // |a| has a kink at 0; a Gauss–Hermite rule cannot reach 1e-10.
        let err = hermite_coeffs(|a: f64| a.abs(), 4, QuadratureOptions::default()).unwrap_err();
        assert!(matches!(err, Error::QuadratureNotConverged { .. }));
        // The breakpoint-aware rule handles it.
        let mu = hermite_coeffs_piecewise(|a: f64| a.abs(), 4, &[0.0], 1e-10).unwrap();
        // E|g| = sqrt(2/pi).
        assert!((mu[0] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-13);
    }

    #[test]
    fn reconstruction_of_polynomials() {
        // sigma(a) = a^6 - 2a^3 + 0.5a, degree 6.
        let f = |a: f64| a.powi(6) - 2.0 * a.powi(3) + 0.5 * a;
        let mu = hermite_coeffs(f, 6, QuadratureOptions::default()).unwrap();
        for i in 0..100 {
            let a = -3.0 + 6.0 * i as f64 / 99.0;
            assert!((hermite_series(&mu, a) - f(a)).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_check_examples() {
        let mut he3 = vec![0.0; 7];
        he3[3] = 1.0;
        assert!(!check_decay(&he3, 1.0, 0.5).passed());
        assert!(check_decay(&he3, 6.0, 0.5).passed());

        let report = check_decay(&[0.0, 1.0, 1.0, 1.0, 1.0], 1.0, 1.0);
        assert_eq!(report.first_violation(), Some(2));
        assert_eq!(report.largest_violation(), Some(4));
    }

    #[test]
    fn power_tail_bounds_direct_sums() {
        for &(start, r, a) in &[(10usize, 0.5f64, 1.5f64), (40, 0.99, 1.4), (5, 1.0, 2.5), (64, 0.0, 2.0)] {
            let direct: f64 = (start + 1..start + 2_000_000)
                .map(|p| (p as f64).powf(-a) * r.powi(p as i32 - 1))
                .sum();
            let bound = power_tail(start, r, a);
            assert!(bound >= direct * (1.0 - 1e-12), "{start} {r} {a}: {bound} < {direct}");
            if r < 0.9 {
                assert!(bound <= direct * (1.0 + 1e-9) + 1e-300);
            }
        }
        assert!(power_tail(3, 1.5, 2.0).is_infinite());
    }
}
