//! Recovering the full teacher once the direction `u` is learned.
//!
//! Given `u_hat`, each base row `w_i` yields two candidate neurons
//! `(w_i +- (xi/sqrt(k)) u_hat) / sqrt(1 + xi^2/k)`, one per possible sign of
//! `c_i`. Fitting a linear second layer on these 2k features by least squares
//! recovers the teacher when `u_hat` is close to `u`, and the fitted weights
//! show which sign each row carries.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hermite::Activation;
use crate::montecarlo::estimate;
use crate::network::TeacherModel;
use crate::rng::{fill_gaussian, streams, SeedTree};

/// Default ridge, relative to the mean diagonal of the Gram of the design.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Pair masses closer than this are reported as ambiguous.
pub const AMBIGUITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// One direction per row. Without a grid, rows `2i` and `2i + 1` are the
    /// `+` and `-` candidates for neuron `i`.
    pub directions: DMatrix<f64>,
    pub activation: Activation,
    pub xi: f64,
    /// Candidates per neuron (2 without a grid).
    pub per_neuron: usize,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.nrows() == 0
    }

    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.directions * x).map(|a| self.activation.eval(a))
    }

    pub fn predict(&self, lambda_hat: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.features(x).dot(lambda_hat)
    }
}

/// The 2k candidate directions for `u_hat` (which must be unit norm).
pub fn build_feature_map(w: &DMatrix<f64>, u_hat: &DVector<f64>, xi: f64, activation: &Activation) -> Result<FeatureMap> {
    let norm = u_hat.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("u_hat must be unit norm, got {norm}")));
    }
    let a = 1.0 / (w.nrows() as f64).sqrt();
    build_grid_feature_map(w, u_hat, xi, activation, &[a, -a], false)
}

/// Candidates `(w_i + xi a u_hat)` for every `a` in `values`, normalized by
/// `sqrt(1 + xi^2/k)` or, with `exact_norm`, by their own length.
pub fn build_grid_feature_map(
    w: &DMatrix<f64>,
    u_hat: &DVector<f64>,
    xi: f64,
    activation: &Activation,
    values: &[f64],
    exact_norm: bool,
) -> Result<FeatureMap> {
    if values.is_empty() {
        return Err(Error::invalid("feature grid is empty"));
    }
    let (k, d) = (w.nrows(), w.ncols());
    if u_hat.len() != d {
        return Err(Error::invalid("u_hat has the wrong dimension"));
    }
    let n = (1.0 + xi * xi / k as f64).sqrt();
    let mut directions = DMatrix::zeros(k * values.len(), d);
    for i in 0..k {
        for (j, a) in values.iter().enumerate() {
            let mut row = w.row(i).transpose() + u_hat * (xi * a);
            if exact_norm {
                row.normalize_mut();
            } else {
                row /= n;
            }
            directions.set_row(i * values.len() + j, &row.transpose());
        }
    }
    Ok(FeatureMap {
        directions,
        activation: activation.clone(),
        xi,
        per_neuron: values.len(),
    })
}

/// The quantization remark for general `c`: `g` evenly spaced values of
/// `[-1, 1]` per neuron, directions normalized to unit length.
pub fn build_quantized_feature_map(
    w: &DMatrix<f64>,
    u_hat: &DVector<f64>,
    xi: f64,
    activation: &Activation,
    g: usize,
) -> Result<FeatureMap> {
    if g < 2 {
        return Err(Error::invalid("grid size must be at least 2"));
    }
    let values: Vec<f64> = (0..g).map(|j| -1.0 + 2.0 * j as f64 / (g - 1) as f64).collect();
    build_grid_feature_map(w, u_hat, xi, activation, &values, true)
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondLayerFit {
    pub lambda_hat: Vec<f64>,
    /// Root mean squared training residual.
    pub residual_rms: f64,
    /// Ridge actually added to the normal equations.
    pub ridge: f64,
}

/// Least squares of `ys` on the features of `xs`. `ridge` is relative to the
/// mean diagonal of `A^T A`; with `ridge = 0` a numerically rank-deficient
/// design is reported.
pub fn fit_second_layer(map: &FeatureMap, xs: &[DVector<f64>], ys: &[f64], ridge: f64) -> Result<SecondLayerFit> {
    let p = map.len();
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::invalid("xs and ys differ in length"));
    }
    if n < p {
        return Err(Error::invalid(format!("need at least {p} samples, got {n}")));
    }
    if ridge < 0.0 {
        return Err(Error::invalid("ridge must be >= 0"));
    }
    let mut a = DMatrix::zeros(n + p, p);
    for (r, x) in xs.iter().enumerate() {
        a.set_row(r, &map.features(x).transpose());
    }
    let scale = (0..p).map(|j| a.column(j).norm_squared()).sum::<f64>() / p as f64;
    let alpha = ridge * scale;
    for j in 0..p {
        a[(n + j, j)] = alpha.sqrt();
    }
    let mut b = DVector::zeros(n + p);
    b.rows_mut(0, n).copy_from_slice(ys);

    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
    let big = diag.iter().fold(0.0f64, |m, v| m.max(*v));
    let small = diag.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(big > 0.0) || small / big < 1e-12 {
        return Err(Error::RankDeficient {
            ratio: if big > 0.0 { small / big } else { 0.0 },
        });
    }
    let qtb = qr.q().tr_mul(&b);
    let lambda_hat = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { ratio: small / big })?;
    let fitted = a.rows(0, n) * &lambda_hat;
    let residual_rms = ((fitted - b.rows(0, n)).norm_squared() / n as f64).sqrt();
    Ok(SecondLayerFit {
        lambda_hat: lambda_hat.iter().copied().collect(),
        residual_rms,
        ridge: alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignCall {
    /// `+-1/sqrt(k)`.
    pub value: f64,
    pub ambiguous: bool,
}

/// Reads `c` off a two-feature-per-neuron fit: `+1/sqrt(k)` when the `+`
/// candidate carries at least as much weight, `-1/sqrt(k)` otherwise.
pub fn extract_c(lambda_hat: &[f64]) -> Result<Vec<SignCall>> {
    if lambda_hat.is_empty() || !lambda_hat.len().is_multiple_of(2) {
        return Err(Error::invalid("expected a pair of weights per neuron"));
    }
    let k = lambda_hat.len() / 2;
    let a = 1.0 / (k as f64).sqrt();
    Ok(lambda_hat
        .chunks(2)
        .map(|pair| {
            let (plus, minus) = (pair[0].abs(), pair[1].abs());
            SignCall {
                value: if plus >= minus { a } else { -a },
                ambiguous: (plus - minus).abs() < AMBIGUITY_TOL,
            }
        })
        .collect())
}

/// Inputs from the `data` stream and teacher labels.
pub fn regression_data(teacher: &TeacherModel, n: usize, tree: &SeedTree) -> (Vec<DVector<f64>>, Vec<f64>) {
    let mut rng = tree.stream(streams::DATA, 0);
    let xs: Vec<DVector<f64>> = (0..n)
        .map(|_| {
            let mut x = DVector::zeros(teacher.d());
            fill_gaussian(&mut rng, x.as_mut_slice());
            x
        })
        .collect();
    let ys = xs.iter().map(|x| teacher.forward(x)).collect();
    (xs, ys)
}

/// `(mean, standard error)` of `(f*(x) - h(x))^2` for the fitted model.
pub fn mc_recovery_error(
    teacher: &TeacherModel,
    map: &FeatureMap,
    lambda_hat: &[f64],
    n: usize,
    tree: &SeedTree,
) -> (f64, f64) {
    let lambda_hat = DVector::from_column_slice(lambda_hat);
    let d = teacher.d();
    let m = estimate(tree, streams::MONTE_CARLO, n, 1, |rng, out| {
        let mut x = DVector::zeros(d);
        fill_gaussian(rng, x.as_mut_slice());
        out[0] = (teacher.forward(&x) - map.predict(&lambda_hat, &x)).powi(2);
    });
    (m.mean[0], m.std_error()[0])
}

/// Largest `1 - |<u, u_hat>|` for which some member of the family is within
/// `epsilon` of the teacher: `epsilon (k + xi^2) / (2 C lambda_max^2 xi^2 k^2)`.
pub fn recovery_tolerance(epsilon: f64, k: usize, xi: f64, lambda_max: f64, c_sigma: f64) -> f64 {
    let k = k as f64;
    epsilon * (k + xi * xi) / (2.0 * c_sigma * lambda_max * lambda_max * xi * xi * k * k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        make_orthonormal_weights, sample_perturbation, BaseModel, CMode, NeuronScaling, Perturbation, SubspaceProjector,
    };

    fn teacher(seed: u64, k: usize, d: usize, xi: f64) -> (TeacherModel, SubspaceProjector) {
        let mut rng = SeedTree::new(seed).stream("instance", 0);
        let w = make_orthonormal_weights(k, d, &mut rng).unwrap();
        let pert = sample_perturbation(&w, xi, CMode::Quantized, &mut rng).unwrap();
        let proj = SubspaceProjector::from_rows(&w);
        let base = BaseModel::with_unit_lambda(w, Activation::relu()).unwrap();
        (TeacherModel::new(base, pert, NeuronScaling::Normalized).unwrap(), proj)
    }

    #[test]
    fn single_neuron_mirror_pair() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let u = DVector::from_vec(vec![0.0, 1.0]);
        let map = build_feature_map(&w, &u, 1.0, &Activation::relu()).unwrap();
        assert_eq!(map.len(), 2);
        let (a, b) = (map.directions.row(0), map.directions.row(1));
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], -b[1]);
        for row in map.directions.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_xi_collapses_pairs() {
        let (t, _) = teacher(1, 3, 8, 1.0);
        let map = build_feature_map(t.base.w(), &t.pert.u, 0.0, &Activation::relu()).unwrap();
        for i in 0..3 {
            assert_eq!(map.directions.row(2 * i), t.base.w().row(i));
            assert_eq!(map.directions.row(2 * i + 1), t.base.w().row(i));
        }
    }

    #[test]
    fn realizable_fit_is_exact() {
        // Teacher built from the family itself: lambda on the true-sign features.
        let (t, _) = teacher(2, 4, 12, 1.0);
        let map = build_feature_map(t.base.w(), &t.pert.u, 1.0, &Activation::relu()).unwrap();
        let truth: Vec<f64> = (0..8).map(|j| 0.3 + 0.1 * j as f64).collect();
        let tree = SeedTree::new(2);
        let (xs, _) = regression_data(&t, 64, &tree);
        let ys: Vec<f64> = xs.iter().map(|x| map.predict(&DVector::from_vec(truth.clone()), x)).collect();
        let fit = fit_second_layer(&map, &xs, &ys, 0.0).unwrap();
        assert!(fit.residual_rms <= 1e-10);
        for (a, b) in fit.lambda_hat.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_direction_recovers_signs() {
        let (t, _) = teacher(3, 6, 24, 1.0);
        let map = build_feature_map(t.base.w(), &t.pert.u, 1.0, &Activation::relu()).unwrap();
        let (xs, ys) = regression_data(&t, 600, &SeedTree::new(3));
        let fit = fit_second_layer(&map, &xs, &ys, DEFAULT_RIDGE).unwrap();
        let calls = extract_c(&fit.lambda_hat).unwrap();
        for (call, c) in calls.iter().zip(t.pert.c.iter()) {
            assert_eq!(call.value, *c);
            assert!(!call.ambiguous);
        }
    }

    #[test]
    fn extract_examples() {
        let calls = extract_c(&[1.0, 0.0, 0.5, 0.5, 0.0, -2.0]).unwrap();
        let a = 1.0 / 3f64.sqrt();
        assert_eq!(calls[0], SignCall { value: a, ambiguous: false });
        assert!(calls[1].ambiguous && calls[1].value == a);
        assert_eq!(calls[2].value, -a);
        assert!(extract_c(&[1.0]).is_err());
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let u = DVector::from_vec(vec![0.0, 1.0]);
        let base = BaseModel::with_unit_lambda(w.clone(), Activation::relu()).unwrap();
        let pert = Perturbation::new(0.0, DVector::from_vec(vec![1.0]), u.clone()).unwrap();
        let t = TeacherModel::new(base, pert, NeuronScaling::Normalized).unwrap();
        let map = build_feature_map(&w, &u, 0.0, &Activation::relu()).unwrap();
        let (xs, ys) = regression_data(&t, 20, &SeedTree::new(1));
        assert!(matches!(fit_second_layer(&map, &xs, &ys, 0.0), Err(Error::RankDeficient { .. })));
        assert!(fit_second_layer(&map, &xs, &ys, DEFAULT_RIDGE).is_ok());
    }

    #[test]
    fn quantized_grid_has_g_features_per_neuron() {
        let (t, _) = teacher(4, 3, 9, 1.0);
        let map = build_quantized_feature_map(t.base.w(), &t.pert.u, 1.0, &Activation::relu(), 5).unwrap();
        assert_eq!(map.len(), 15);
        for row in map.directions.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
    }
}
