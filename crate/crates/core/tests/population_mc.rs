use lora_dyn::dynamics::StudentForm;
use lora_dyn::hermite::Activation;
use lora_dyn::network::{
    make_orthonormal_weights, sample_c, sample_perturbation, BaseModel, CMode, NeuronScaling, StudentState,
    SubspaceProjector, TeacherModel,
};
use lora_dyn::population::{
    mc_population_gradient, mc_population_loss, population_gradient, population_loss, PopulationParams,
};
use lora_dyn::rng::SeedTree;
use nalgebra::DVector;

fn instance(seed: u64, k: usize, d: usize, xi: f64, act: &str) -> (TeacherModel, SubspaceProjector, DVector<f64>) {
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream("instance", 0);
    let w = make_orthonormal_weights(k, d, &mut rng).unwrap();
    let pert = sample_perturbation(&w, xi, CMode::Quantized, &mut rng).unwrap();
    let c_hat = sample_c(k, CMode::Quantized, &mut rng);
    let proj = SubspaceProjector::from_rows(&w);
    let base = BaseModel::with_unit_lambda(w, Activation::from_name(act, 64).unwrap()).unwrap();
    (TeacherModel::new(base, pert, NeuronScaling::Normalized).unwrap(), proj, c_hat)
}

/// Student direction in span(W)^perp with overlap m.
fn student_at(teacher: &TeacherModel, proj: &SubspaceProjector, m: f64, seed: u64) -> DVector<f64> {
    let mut rng = SeedTree::new(seed).stream("init", 0);
    let u = &teacher.pert.u;
    let mut z = proj.sample_complement(&mut rng).unwrap();
    z.axpy(-z.dot(u), u, 1.0);
    z.normalize_mut();
    u * m + z * (1.0 - m * m).sqrt()
}

#[test]
fn mc_gradient_matches_analytic_along_u() {
    let (t, proj, c_hat) = instance(21, 4, 32, 1.0, "relu");
    let u_hat = student_at(&t, &proj, 0.2, 1);
    let student = StudentState::new(u_hat.clone(), c_hat.clone(), true);
    let params = PopulationParams::from_teacher(&t, &c_hat).unwrap();
    let analytic = population_gradient(&params, &t.pert.u, &u_hat).unwrap();
    let (est, dot_u, se_u) = mc_population_gradient(&t, &student, Some(&proj), 200_000, &SeedTree::new(5));
    let z = (dot_u - analytic.dot(&t.pert.u)) / se_u;
    assert!(z.abs() <= 4.0, "z = {z}");
    let zs = est.z_scores(&analytic);
    assert!(zs.amax() <= 4.5, "max |z| = {}", zs.amax());

    // Quadrupling N halves the standard errors.
    let (big, _, _) = mc_population_gradient(&t, &student, Some(&proj), 800_000, &SeedTree::new(6));
    let ratio = est.aggregate_std_error() / big.aggregate_std_error();
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn mc_gradient_vanishes_at_truth() {
    let (t, proj, _) = instance(22, 4, 16, 1.0, "relu");
    let student = StudentState::new(t.pert.u.clone(), t.pert.c.clone(), true);
    let (est, _, _) = mc_population_gradient(&t, &student, Some(&proj), 10_000, &SeedTree::new(1));
    assert!(est.mean.norm() <= 4.0 * est.aggregate_std_error().max(1e-300));
}

#[test]
fn mc_loss_matches_analytic() {
    let (t, proj, c_hat) = instance(23, 4, 16, 1.0, "relu");
    let u_hat = student_at(&t, &proj, 0.3, 2);
    let student = StudentState::new(u_hat.clone(), c_hat.clone(), true);
    let analytic = population_loss(&t, &c_hat, &u_hat).unwrap();
    let (mean, se) = mc_population_loss(&t, &student, StudentForm::Full, 1_000_000, &SeedTree::new(3));
    let z = (mean - analytic.value) / se;
    assert!(z.abs() <= 4.0 + analytic.truncation_bound / se, "z = {z}, bound {}", analytic.truncation_bound);
}
