//! Per-sample losses and gradients.

use nalgebra::DVector;

use crate::network::{StudentState, SubspaceProjector, TeacherModel};

/// Which student network is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StudentForm {
    /// Same architecture as the teacher.
    #[default]
    Full,
    /// First-order expansion in the perturbation around the (scaled) base.
    Linearized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    /// Spherical gradient in `u_hat`, after both projections.
    pub u_grad: DVector<f64>,
    /// Euclidean gradient in `c_hat`.
    pub c_grad: DVector<f64>,
    /// `(f*(x) - f_hat(x))^2`.
    pub loss: f64,
}

/// Student output and `d f_hat / d <u_hat, x>` split per neuron: returns
/// `(f_hat, a)` where `d f_hat / d u_hat = (sum_i a_i c_hat_i) x` and
/// `d f_hat / d c_hat_i = a_i <u_hat, x>`.
fn student_eval(
    teacher: &TeacherModel,
    student: &StudentState,
    form: StudentForm,
    wx: &DVector<f64>,
    uhx: f64,
    slopes: &mut DVector<f64>,
) -> f64 {
    let base = &teacher.base;
    let act = base.activation();
    let xi = teacher.pert.xi;
    let s = teacher.scaling.neuron_factor(xi, base.k());
    let o = teacher.scaling.output_factor(xi);
    let lambda = base.lambda();
    let mut out = 0.0;
    for i in 0..base.k() {
        let c = student.c_hat[i];
        match form {
            StudentForm::Full => {
                let pre = s * (wx[i] + xi * c * uhx);
                out += lambda[i] * act.eval(pre);
                slopes[i] = o * lambda[i] * act.derivative(pre) * s * xi;
            }
            StudentForm::Linearized => {
                let pre = s * wx[i];
                let slope = act.derivative(pre);
                out += lambda[i] * (act.eval(pre) + slope * s * xi * c * uhx);
                slopes[i] = o * lambda[i] * slope * s * xi;
            }
        }
    }
    o * out
}

/// Removes the span(W) component (if `projector` is given), then the
/// component along `u_hat`.
pub fn spherical_projection(v: &mut DVector<f64>, u_hat: &DVector<f64>, projector: Option<&SubspaceProjector>) {
    if let Some(p) = projector {
        p.project_out_mut(v);
    }
    let along = u_hat.dot(v);
    v.axpy(-along, u_hat, 1.0);
}

/// Loss and gradients of `(f*(x) - f_hat(x))^2` at one input.
pub fn sample_gradient(
    teacher: &TeacherModel,
    student: &StudentState,
    projector: Option<&SubspaceProjector>,
    form: StudentForm,
    x: &DVector<f64>,
) -> SampleGradient {
    let wx = teacher.base.w() * x;
    let ux = teacher.pert.u.dot(x);
    let uhx = student.u_hat.dot(x);
    let target = teacher.forward_projected(&wx, ux);
    let mut slopes = DVector::zeros(teacher.k());
    let pred = student_eval(teacher, student, form, &wx, uhx, &mut slopes);
    let residual = target - pred;
    let scalar = -2.0 * residual * slopes.dot(&student.c_hat);
    let mut u_grad = x * scalar;
    spherical_projection(&mut u_grad, &student.u_hat, projector);
    let c_grad = slopes * (-2.0 * residual * uhx);
    SampleGradient {
        u_grad,
        c_grad,
        loss: residual * residual,
    }
}

/// The spherical gradient of the sample loss in `u_hat` for the full student.
pub fn sample_spherical_gradient(
    teacher: &TeacherModel,
    student: &StudentState,
    projector: Option<&SubspaceProjector>,
    x: &DVector<f64>,
) -> DVector<f64> {
    sample_gradient(teacher, student, projector, StudentForm::Full, x).u_grad
}

/// `(f*(x) - f_hat(x))^2`.
pub fn sample_loss(teacher: &TeacherModel, student: &StudentState, form: StudentForm, x: &DVector<f64>) -> f64 {
    let wx = teacher.base.w() * x;
    let target = teacher.forward_projected(&wx, teacher.pert.u.dot(x));
    let mut slopes = DVector::zeros(teacher.k());
    let pred = student_eval(teacher, student, form, &wx, student.u_hat.dot(x), &mut slopes);
    (target - pred).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::Activation;
    use crate::network::{
        make_orthonormal_weights, sample_c, sample_perturbation, student_forward, BaseModel, CMode, NeuronScaling,
    };
    use crate::rng::{gaussian_vector, SeedTree};

    fn setup(seed: u64, act: &str, scaling: NeuronScaling) -> (TeacherModel, StudentState, SubspaceProjector) {
        let mut rng = SeedTree::new(seed).stream("s", 0);
        let w = make_orthonormal_weights(3, 8, &mut rng).unwrap();
        let pert = sample_perturbation(&w, 1.4, CMode::Quantized, &mut rng).unwrap();
        let proj = SubspaceProjector::from_rows(&w);
        let u_hat = proj.sample_complement(&mut rng).unwrap();
        let c_hat = sample_c(3, CMode::Quantized, &mut rng);
        let base = BaseModel::with_unit_lambda(w, Activation::from_name(act, 8).unwrap()).unwrap();
        let t = TeacherModel::new(base, pert, scaling).unwrap();
        (t, StudentState::new(u_hat, c_hat, true), proj)
    }

    #[test]
    fn zero_at_truth() {
        let (t, _, proj) = setup(1, "relu", NeuronScaling::Normalized);
        let s = StudentState::new(t.pert.u.clone(), t.pert.c.clone(), true);
        let mut rng = SeedTree::new(1).stream("x", 0);
        for _ in 0..50 {
            let x = gaussian_vector(&mut rng, 8);
            let g = sample_gradient(&t, &s, Some(&proj), StudentForm::Full, &x);
            assert_eq!(g.loss, 0.0);
            assert_eq!(g.u_grad.norm(), 0.0);
        }
    }

    #[test]
    fn output_is_tangent_and_orthogonal_to_rows() {
        let (t, s, proj) = setup(2, "tanh", NeuronScaling::Normalized);
        let mut rng = SeedTree::new(2).stream("x", 0);
        for _ in 0..50 {
            let x = gaussian_vector(&mut rng, 8);
            let g = sample_spherical_gradient(&t, &s, Some(&proj), &x);
            assert!(g.dot(&s.u_hat).abs() < 1e-10);
            assert!((t.base.w() * &g).amax() < 1e-10);
        }
    }

    /// Raw Euclidean gradient against central differences of the loss.
    #[test]
    fn matches_finite_differences() {
        for scaling in [NeuronScaling::Normalized, NeuronScaling::Figure] {
            for form in [StudentForm::Full, StudentForm::Linearized] {
                let (t, s, _) = setup(3, "sigmoid", scaling);
                let mut rng = SeedTree::new(3).stream("x", 0);
                let x = gaussian_vector(&mut rng, 8);
                // Without projections u_grad is the raw gradient minus its
                // u_hat component; compare along a tangent direction.
                let g = sample_gradient(&t, &s, None, form, &x);
                let mut dir = gaussian_vector(&mut rng, 8);
                dir.axpy(-s.u_hat.dot(&dir), &s.u_hat, 1.0);
                let h = 1e-6;
                let mut plus = s.clone();
                plus.u_hat += &dir * h;
                let mut minus = s.clone();
                minus.u_hat -= &dir * h;
                let fd = (sample_loss(&t, &plus, form, &x) - sample_loss(&t, &minus, form, &x)) / (2.0 * h);
                assert!((fd - g.u_grad.dot(&dir)).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g.u_grad.dot(&dir));

                let i = 1;
                let mut plus = s.clone();
                plus.c_hat[i] += h;
                let mut minus = s.clone();
                minus.c_hat[i] -= h;
                let fd = (sample_loss(&t, &plus, form, &x) - sample_loss(&t, &minus, form, &x)) / (2.0 * h);
                assert!((fd - g.c_grad[i]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn linearized_identity_is_exact() {
        let (t, s, _) = setup(4, "identity", NeuronScaling::Normalized);
        let mut rng = SeedTree::new(4).stream("x", 0);
        for _ in 0..20 {
            let x = gaussian_vector(&mut rng, 8);
            let full = sample_loss(&t, &s, StudentForm::Full, &x);
            let lin = sample_loss(&t, &s, StudentForm::Linearized, &x);
            assert!((full - lin).abs() < 1e-10 * full.max(1.0));
            let pred = student_forward(&t.base, &s, t.pert.xi, t.scaling, &x);
            assert!((full - (t.forward(&x) - pred).powi(2)).abs() < 1e-12);
        }
    }
}
