//! Base models, rank-1 perturbations, teachers and students.
//!
//! A base model is `f(x) = sum_i lambda_i sigma(<w_i, x>)` with unit rows
//! `w_i`. The teacher perturbs every row along one direction,
//! `w_i + xi c_i u`, and (by default) rescales by `sqrt(1 + xi^2/k)` so the
//! perturbed neurons stay on the unit sphere when `u` is orthogonal to the
//! rows. The student has the same form with `(c_hat, u_hat)`.

mod instances;
mod io;

pub use instances::{global_optima_example, hardness_instance, HardnessInstance};
pub use io::{InstanceDocument, WeightRegime};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::Activation;
use crate::rng::{gaussian_vector, unit_vector};

/// Tolerance on `||w_i|| = 1`.
pub const UNIT_TOL: f64 = 1e-12;

/// Default number of resamples for [`make_separated_weights`].
pub const SEPARATION_ATTEMPTS: usize = 1000;

/// How perturbed neurons are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronScaling {
    /// `(w_i + xi c_i u) / sqrt(1 + xi^2/k)`: unit neurons, used by every
    /// analytic formula in the crate.
    #[default]
    Normalized,
    /// `w_i + xi c_i u`.
    Unnormalized,
    /// `k/(k + xi^2) (w_i + xi c_i u)` with the output divided by `xi`, as in
    /// the published simulation figures.
    Figure,
}

impl NeuronScaling {
    /// Factor multiplying `w_i + xi c_i u`.
    pub fn neuron_factor(self, xi: f64, k: usize) -> f64 {
        let k = k as f64;
        match self {
            NeuronScaling::Normalized => 1.0 / (1.0 + xi * xi / k).sqrt(),
            NeuronScaling::Unnormalized => 1.0,
            NeuronScaling::Figure => k / (k + xi * xi),
        }
    }

    /// Factor multiplying the network output.
    pub fn output_factor(self, xi: f64) -> f64 {
        match self {
            NeuronScaling::Figure if xi != 0.0 => 1.0 / xi,
            _ => 1.0,
        }
    }
}

/// Distribution of the sign pattern `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CMode {
    /// Uniform on `{+-1/sqrt(k)}^k`.
    #[default]
    Quantized,
    /// Uniform on the unit sphere of R^k.
    Spherical,
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    w: DMatrix<f64>,
    lambda: DVector<f64>,
    activation: Activation,
}

impl BaseModel {
    pub fn new(w: DMatrix<f64>, lambda: DVector<f64>, activation: Activation) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::invalid("W must have at least one row and column"));
        }
        if lambda.len() != w.nrows() {
            return Err(Error::invalid(format!(
                "lambda has {} entries but W has {} rows",
                lambda.len(),
                w.nrows()
            )));
        }
        for (index, row) in w.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitNeuron { index, norm });
            }
        }
        if lambda.iter().any(|l| !l.is_finite() || *l == 0.0) {
            return Err(Error::invalid("lambda entries must be finite and nonzero"));
        }
        Ok(BaseModel { w, lambda, activation })
    }

    /// All-ones second layer.
    pub fn with_unit_lambda(w: DMatrix<f64>, activation: Activation) -> Result<Self> {
        let k = w.nrows();
        BaseModel::new(w, DVector::from_element(k, 1.0), activation)
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda.iter().fold(f64::INFINITY, |a, l| a.min(l.abs()))
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().fold(0.0, |a, l| a.max(l.abs()))
    }

    /// `G_ij = <w_i, w_j>`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.w * self.w.transpose()
    }

    pub fn forward(&self, x: &DVector<f64>) -> f64 {
        let wx = &self.w * x;
        self.lambda
            .iter()
            .zip(wx.iter())
            .map(|(l, a)| l * self.activation.eval(*a))
            .sum()
    }

    /// Output of the perturbed network with neurons `s (w_i + xi c_i u)`
    /// given the precomputed projections `wx = W x` and `ux = <u, x>`.
    pub fn perturbed_output(
        &self,
        scaling: NeuronScaling,
        xi: f64,
        c: &DVector<f64>,
        wx: &DVector<f64>,
        ux: f64,
    ) -> f64 {
        let s = scaling.neuron_factor(xi, self.k());
        let sum: f64 = (0..self.k())
            .map(|i| self.lambda[i] * self.activation.eval(s * (wx[i] + xi * c[i] * ux)))
            .sum();
        scaling.output_factor(xi) * sum
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub xi: f64,
    /// Set when `xi = xi_bar sqrt(k)` was requested.
    pub xi_bar: Option<f64>,
    pub c: DVector<f64>,
    pub u: DVector<f64>,
}

impl Perturbation {
    pub fn new(xi: f64, c: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        if !xi.is_finite() || xi < 0.0 {
            return Err(Error::invalid(format!("xi must be finite and >= 0, got {xi}")));
        }
        let norm = u.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("u must be unit norm, got {norm}")));
        }
        Ok(Perturbation {
            xi,
            xi_bar: None,
            c,
            u,
        })
    }

    pub fn k(&self) -> usize {
        self.c.len()
    }

    /// Every `|c_i| = 1/sqrt(k)`.
    pub fn is_quantized(&self) -> bool {
        let target = 1.0 / (self.k() as f64).sqrt();
        self.c.iter().all(|c| (c.abs() - target).abs() <= 1e-15)
    }
}

/// Orthonormal basis of span(W), used to project onto its complement.
#[derive(Debug, Clone)]
pub struct SubspaceProjector {
    /// r x d, orthonormal rows.
    basis: DMatrix<f64>,
}

impl SubspaceProjector {
    /// Row space of `w`; singular values below 1e-12 of the largest are
    /// treated as zero.
    pub fn from_rows(w: &DMatrix<f64>) -> Self {
        let svd = w.clone().svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let top = svd.singular_values.iter().fold(0.0f64, |a, v| a.max(*v));
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&j| top > 0.0 && svd.singular_values[j] > 1e-12 * top)
            .collect();
        let mut basis = DMatrix::zeros(keep.len(), w.ncols());
        for (row, &j) in keep.iter().enumerate() {
            basis.set_row(row, &v_t.row(j));
        }
        SubspaceProjector { basis }
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Component of `v` inside span(W).
    pub fn project_onto(&self, v: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(&(&self.basis * v))
    }

    /// `v - Pi_W v`, in place.
    pub fn project_out_mut(&self, v: &mut DVector<f64>) {
        let coeffs = &self.basis * &*v;
        v.gemv_tr(-1.0, &self.basis, &coeffs, 1.0);
    }

    pub fn project_out(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        self.project_out_mut(&mut out);
        out
    }

    /// `||Pi_W v||`.
    pub fn inside_norm(&self, v: &DVector<f64>) -> f64 {
        (&self.basis * v).norm()
    }

    /// Uniform draw from the unit sphere of span(W)^perp.
    pub fn sample_complement<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        if self.rank() >= self.dim() {
            return Err(Error::invalid("span(W) is the whole space; its complement is trivial"));
        }
        loop {
            let mut g = gaussian_vector(rng, self.dim());
            self.project_out_mut(&mut g);
            let n = g.norm();
            if n > 1e-300 {
                return Ok(g / n);
            }
        }
    }
}

/// Rows orthonormalized from k i.i.d. Gaussian vectors.
pub fn make_orthonormal_weights<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 || k > d {
        return Err(Error::invalid(format!("orthonormal weights need 1 <= k <= d, got k={k}, d={d}")));
    }
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let q = g.qr().q();
    let mut w = q.transpose();
    for mut row in w.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    Ok(w)
}

/// The separation bound `1 - ln(k)/sqrt(k)` on `|<w_i, w_j>|`.
pub fn separation_bound(k: usize) -> f64 {
    let k = k as f64;
    1.0 - k.ln() / k.sqrt()
}

/// Largest off-diagonal `|<w_i, w_j>|`.
pub fn max_overlap(w: &DMatrix<f64>) -> f64 {
    let g = w * w.transpose();
    let mut best = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..i {
            best = best.max(g[(i, j)].abs());
        }
    }
    best
}

/// Checks the separation bound on given rows.
pub fn check_separation(w: &DMatrix<f64>) -> Result<f64> {
    let bound = separation_bound(w.nrows());
    let overlap = max_overlap(w);
    if overlap > bound {
        return Err(Error::SeparationFailed {
            attempts: 0,
            max_overlap: overlap,
            bound,
        });
    }
    Ok(overlap)
}

/// Unit rows drawn uniformly from the sphere, resampled until every pairwise
/// overlap is within [`separation_bound`]. Returns the rows and the realized
/// maximum overlap.
pub fn make_separated_weights<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    rng: &mut R,
    max_attempts: usize,
) -> Result<(DMatrix<f64>, f64)> {
    if k < 2 || d < 2 {
        return Err(Error::invalid(format!("separated weights need k, d >= 2, got k={k}, d={d}")));
    }
    let bound = separation_bound(k);
    let mut worst = f64::INFINITY;
    for _ in 0..max_attempts.max(1) {
        let mut w = DMatrix::zeros(k, d);
        for i in 0..k {
            w.set_row(i, &unit_vector(rng, d).transpose());
        }
        let overlap = max_overlap(&w);
        if overlap <= bound {
            return Ok((w, overlap));
        }
        worst = worst.min(overlap);
    }
    Err(Error::SeparationFailed {
        attempts: max_attempts.max(1),
        max_overlap: worst,
        bound,
    })
}

pub fn sample_c<R: Rng + ?Sized>(k: usize, mode: CMode, rng: &mut R) -> DVector<f64> {
    match mode {
        CMode::Quantized => {
            let a = 1.0 / (k as f64).sqrt();
            DVector::from_fn(k, |_, _| if rng.random::<bool>() { a } else { -a })
        }
        CMode::Spherical => unit_vector(rng, k),
    }
}

/// `c` from `mode` and `u` uniform on the unit sphere of span(W)^perp.
pub fn sample_perturbation<R: Rng + ?Sized>(
    w: &DMatrix<f64>,
    xi: f64,
    mode: CMode,
    rng: &mut R,
) -> Result<Perturbation> {
    let (k, d) = (w.nrows(), w.ncols());
    if d <= k {
        return Err(Error::invalid(format!(
            "u orthogonal to span(W) needs d > k, got k={k}, d={d}"
        )));
    }
    let c = sample_c(k, mode, rng);
    let u = SubspaceProjector::from_rows(w).sample_complement(rng)?;
    Perturbation::new(xi, c, u)
}

/// Rows drawn independently and uniformly from the unit sphere.
pub fn make_random_weights<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(k, d);
    for i in 0..k {
        w.set_row(i, &unit_vector(rng, d).transpose());
    }
    w
}

/// `u = alpha u1 + sqrt(1 - alpha^2) u2` with `u1` uniform on the unit sphere
/// of span(W) and `u2` uniform on that of span(W)^perp, so that
/// `||P_W u|| = alpha`.
pub fn sample_tilted_perturbation<R: Rng + ?Sized>(
    w: &DMatrix<f64>,
    xi: f64,
    alpha: f64,
    mode: CMode,
    rng: &mut R,
) -> Result<Perturbation> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let (k, d) = (w.nrows(), w.ncols());
    if d <= k {
        return Err(Error::invalid(format!("need d > k, got k={k}, d={d}")));
    }
    let c = sample_c(k, mode, rng);
    let projector = SubspaceProjector::from_rows(w);
    let u2 = projector.sample_complement(rng)?;
    let mut u1 = projector.project_onto(&gaussian_vector(rng, d));
    u1.normalize_mut();
    let mut u = u1 * alpha + u2 * (1.0 - alpha * alpha).sqrt();
    u.normalize_mut();
    Perturbation::new(xi, c, u)
}

/// Unit vector in span(W)^perp with `<v, u> = m`; the orthogonal part is
/// uniform. `u` must be a unit vector in span(W)^perp.
pub fn direction_with_overlap<R: Rng + ?Sized>(
    u: &DVector<f64>,
    projector: &SubspaceProjector,
    m: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(-1.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("overlap must lie in [-1, 1], got {m}")));
    }
    if projector.dim() < projector.rank() + 2 {
        return Err(Error::invalid("span(W)^perp is too small for a second direction"));
    }
    let mut z = projector.sample_complement(rng)?;
    z.axpy(-z.dot(u), u, 1.0);
    z.normalize_mut();
    let mut v = u * m + z * (1.0 - m * m).sqrt();
    v.normalize_mut();
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub base: BaseModel,
    pub pert: Perturbation,
    pub scaling: NeuronScaling,
    v: DMatrix<f64>,
}

impl TeacherModel {
    pub fn new(base: BaseModel, pert: Perturbation, scaling: NeuronScaling) -> Result<Self> {
        if pert.k() != base.k() || pert.u.len() != base.d() {
            return Err(Error::invalid(format!(
                "perturbation shape (k={}, d={}) does not match base model (k={}, d={})",
                pert.k(),
                pert.u.len(),
                base.k(),
                base.d()
            )));
        }
        let v = perturbed_neurons(base.w(), pert.xi, &pert.c, &pert.u, scaling);
        Ok(TeacherModel { base, pert, scaling, v })
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    pub fn d(&self) -> usize {
        self.base.d()
    }

    /// Teacher neurons, one per row.
    pub fn neurons(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn forward(&self, x: &DVector<f64>) -> f64 {
        let wx = self.base.w() * x;
        self.forward_projected(&wx, self.pert.u.dot(x))
    }

    /// Output from precomputed `W x` and `<u, x>`.
    pub fn forward_projected(&self, wx: &DVector<f64>, ux: f64) -> f64 {
        self.base
            .perturbed_output(self.scaling, self.pert.xi, &self.pert.c, wx, ux)
    }
}

/// Rows `s (w_i + xi c_i u)` for the given scaling.
pub fn perturbed_neurons(
    w: &DMatrix<f64>,
    xi: f64,
    c: &DVector<f64>,
    u: &DVector<f64>,
    scaling: NeuronScaling,
) -> DMatrix<f64> {
    let s = scaling.neuron_factor(xi, w.nrows());
    let mut v = w + (c * xi) * u.transpose();
    v *= s;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    pub u_hat: DVector<f64>,
    pub c_hat: DVector<f64>,
    pub constrain_subspace: bool,
    pub t: u64,
}

impl StudentState {
    pub fn new(u_hat: DVector<f64>, c_hat: DVector<f64>, constrain_subspace: bool) -> Self {
        StudentState {
            u_hat,
            c_hat,
            constrain_subspace,
            t: 0,
        }
    }

    /// `m = <u, u_hat>`.
    pub fn overlap(&self, u: &DVector<f64>) -> f64 {
        self.u_hat.dot(u)
    }
}

pub fn teacher_forward(teacher: &TeacherModel, x: &DVector<f64>) -> f64 {
    teacher.forward(x)
}

/// Student output `sum_i lambda_i sigma(<v_hat_i, x>)` with
/// `v_hat_i = s (w_i + xi c_hat_i u_hat)`.
pub fn student_forward(
    base: &BaseModel,
    student: &StudentState,
    xi: f64,
    scaling: NeuronScaling,
    x: &DVector<f64>,
) -> f64 {
    let wx = base.w() * x;
    base.perturbed_output(scaling, xi, &student.c_hat, &wx, student.u_hat.dot(x))
}
