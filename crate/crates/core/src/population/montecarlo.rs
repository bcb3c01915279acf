//! Monte Carlo estimates of population quantities.

use nalgebra::DVector;

use crate::dynamics::{sample_gradient, sample_loss, StudentForm};
use crate::montecarlo::estimate;
use crate::network::{StudentState, SubspaceProjector, TeacherModel};
use crate::rng::{fill_gaussian, streams, SeedTree};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: DVector<f64>,
    pub std_error: DVector<f64>,
    pub samples: usize,
}

impl GradientEstimate {
    /// `sqrt(sum_i se_i^2)`: scale of the error of the mean vector.
    pub fn aggregate_std_error(&self) -> f64 {
        self.std_error.norm()
    }

    /// Per-coordinate z-scores of `mean - reference`.
    pub fn z_scores(&self, reference: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |i, _| {
            let diff = self.mean[i] - reference[i];
            if self.std_error[i] > 0.0 {
                diff / self.std_error[i]
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
    }
}

/// Mean of `n` sample spherical gradients at a fixed student, with
/// per-coordinate standard errors. The last coordinate of each sample is
/// `<grad, u>`, so its standard error is reported exactly rather than
/// propagated; it is returned separately as `(estimate, mean_dot_u, se_dot_u)`.
pub fn mc_population_gradient(
    teacher: &TeacherModel,
    student: &StudentState,
    projector: Option<&SubspaceProjector>,
    n: usize,
    tree: &SeedTree,
) -> (GradientEstimate, f64, f64) {
    let d = teacher.d();
    let u = &teacher.pert.u;
    let moments = estimate(tree, streams::MONTE_CARLO, n, d + 1, |rng, out| {
        let mut x = DVector::zeros(d);
        fill_gaussian(rng, x.as_mut_slice());
        let g = sample_gradient(teacher, student, projector, StudentForm::Full, &x).u_grad;
        out[..d].copy_from_slice(g.as_slice());
        out[d] = g.dot(u);
    });
    let se = moments.std_error();
    let est = GradientEstimate {
        mean: DVector::from_column_slice(&moments.mean[..d]),
        std_error: DVector::from_column_slice(&se[..d]),
        samples: moments.count,
    };
    (est, moments.mean[d], se[d])
}

/// `(mean, standard error)` of the squared loss over `n` fresh inputs.
pub fn mc_population_loss(
    teacher: &TeacherModel,
    student: &StudentState,
    form: StudentForm,
    n: usize,
    tree: &SeedTree,
) -> (f64, f64) {
    let d = teacher.d();
    let moments = estimate(tree, streams::MONTE_CARLO, n, 1, |rng, out| {
        let mut x = DVector::zeros(d);
        fill_gaussian(rng, x.as_mut_slice());
        out[0] = sample_loss(teacher, student, form, &x);
    });
    (moments.mean[0], moments.std_error()[0])
}
