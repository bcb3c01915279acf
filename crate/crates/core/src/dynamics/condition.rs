//! Moments of the sample gradient against their worst-case bounds.

use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::gradient::{sample_gradient, StudentForm};
use crate::error::{Error, Result};
use crate::montecarlo::estimate;
use crate::network::{StudentState, SubspaceProjector, TeacherModel};
use crate::population::{population_gradient, PopulationParams};
use crate::rng::{fill_gaussian, streams, SeedTree};

/// Smallest sample count accepted by [`condition_suite`].
pub const MIN_CONDITION_SAMPLES: usize = 10_000;

/// `lambda_max^4 k^3 xi^2 min{k, 4 xi^2} / (k + xi^2)`.
pub fn variance_bound(k: usize, xi: f64, lambda_max: f64) -> f64 {
    let k = k as f64;
    let xi2 = xi * xi;
    lambda_max.powi(4) * k.powi(3) * xi2 * k.min(4.0 * xi2) / (k + xi2)
}

/// `lambda_max^2 k xi^2 / (1 + xi^2 / k)`.
pub fn population_gradient_bound(k: usize, xi: f64, lambda_max: f64) -> f64 {
    let k = k as f64;
    lambda_max * lambda_max * k * xi * xi / (1.0 + xi * xi / k)
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionMoments {
    pub m: f64,
    /// `E ||g / sqrt(d)||^2` and `E ||g / sqrt(d)||^4`.
    pub norm_moments: [f64; 2],
    pub norm_std_errors: [f64; 2],
    /// `E <g, u>^2` and `E <g, u>^4`.
    pub dot_moments: [f64; 2],
    pub dot_std_errors: [f64; 2],
    /// `||grad Phi(u_hat)||`, analytic.
    pub population_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub k: usize,
    pub d: usize,
    pub xi: f64,
    pub lambda_max: f64,
    pub samples: usize,
    pub directions: Vec<DirectionMoments>,
    pub variance_bound: f64,
    pub population_bound: f64,
    /// `max over u_hat of max(E||g/sqrt d||^{2p}, E<g,u>^{2p})^{1/p} / bound`,
    /// for `p = 1, 2`.
    pub variance_ratio: [f64; 2],
    pub population_ratio: f64,
}

/// Estimates the gradient moments at `directions` random unit `u_hat` in
/// span(W)^perp, with `n` samples each.
pub fn condition_suite(
    teacher: &TeacherModel,
    c_hat: &DVector<f64>,
    n: usize,
    directions: usize,
    tree: &SeedTree,
) -> Result<ConditionReport> {
    let projector = SubspaceProjector::from_rows(teacher.base.w());
    let mut init = tree.stream(streams::INIT, 0);
    let u_hats = (0..directions)
        .map(|_| projector.sample_complement(&mut init))
        .collect::<Result<Vec<_>>>()?;
    condition_suite_at(teacher, c_hat, &u_hats, n, tree)
}

/// As [`condition_suite`], at the given unit students.
pub fn condition_suite_at(
    teacher: &TeacherModel,
    c_hat: &DVector<f64>,
    u_hats: &[DVector<f64>],
    n: usize,
    tree: &SeedTree,
) -> Result<ConditionReport> {
    if n < MIN_CONDITION_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_CONDITION_SAMPLES} samples")));
    }
    if u_hats.is_empty() {
        return Err(Error::invalid("need at least one direction"));
    }
    let (k, d, xi) = (teacher.k(), teacher.d(), teacher.pert.xi);
    let projector = SubspaceProjector::from_rows(teacher.base.w());
    let params = PopulationParams::from_teacher(teacher, c_hat)?;
    let u = &teacher.pert.u;
    let lambda_max = teacher.base.lambda_max();
    let mut out = Vec::with_capacity(u_hats.len());
    for (j, u_hat) in u_hats.iter().enumerate() {
        if (u_hat.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("u_hat must be unit norm"));
        }
        let student = StudentState::new(u_hat.clone(), c_hat.clone(), true);
        let sub = tree.child("direction", j as u64);
        let mom = estimate(&sub, streams::MONTE_CARLO, n, 4, |rng, o| {
            let mut x = DVector::zeros(d);
            fill_gaussian(rng, x.as_mut_slice());
            let g = sample_gradient(teacher, &student, Some(&projector), StudentForm::Full, &x).u_grad;
            let a = g.norm_squared() / d as f64;
            let b = g.dot(u).powi(2);
            o.copy_from_slice(&[a, a * a, b, b * b]);
        });
        let se = mom.std_error();
        out.push(DirectionMoments {
            m: u_hat.dot(u),
            norm_moments: [mom.mean[0], mom.mean[1]],
            norm_std_errors: [se[0], se[1]],
            dot_moments: [mom.mean[2], mom.mean[3]],
            dot_std_errors: [se[2], se[3]],
            population_norm: population_gradient(&params, u, u_hat)?.norm(),
        });
    }
    let vb = variance_bound(k, xi, lambda_max);
    let pb = population_gradient_bound(k, xi, lambda_max);
    let ratio = |p: usize| {
        let worst = out
            .iter()
            .map(|m| m.norm_moments[p - 1].max(m.dot_moments[p - 1]).powf(1.0 / p as f64))
            .fold(0.0f64, f64::max);
        if vb > 0.0 { worst / vb } else { 0.0 }
    };
    let variance_ratio = [ratio(1), ratio(2)];
    let pop_worst = out.iter().map(|m| m.population_norm).fold(0.0f64, f64::max);
    Ok(ConditionReport {
        k,
        d,
        xi,
        lambda_max,
        samples: n,
        variance_bound: vb,
        population_bound: pb,
        variance_ratio,
        population_ratio: if pb > 0.0 { pop_worst / pb } else { 0.0 },
        directions: out,
    })
}
