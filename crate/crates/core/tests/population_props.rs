use lora_dyn::hermite::Activation;
use lora_dyn::network::{
    make_orthonormal_weights, make_random_weights, sample_c, sample_perturbation, BaseModel, CMode, NeuronScaling,
    SubspaceProjector, TeacherModel,
};
use lora_dyn::population::{
    h0_anticoncentration, h_closed, h_series, identity_gram_params, population_gradient, population_loss,
    PopulationParams, Statistic,
};
use lora_dyn::rng::{unit_vector, SeedTree};
use nalgebra::{DMatrix, DVector};

const BUILTIN: [&str; 8] = ["relu", "sigmoid", "tanh", "identity", "quadratic", "he2", "he3", "he4"];

fn orthonormal_teacher(seed: u64, k: usize, d: usize, xi: f64, act: &str) -> (TeacherModel, SubspaceProjector) {
    let mut rng = SeedTree::new(seed).stream("instance", 0);
    let w = make_orthonormal_weights(k, d, &mut rng).unwrap();
    let pert = sample_perturbation(&w, xi, CMode::Quantized, &mut rng).unwrap();
    let proj = SubspaceProjector::from_rows(&w);
    let base = BaseModel::with_unit_lambda(w, Activation::from_name(act, 64).unwrap()).unwrap();
    (TeacherModel::new(base, pert, NeuronScaling::Normalized).unwrap(), proj)
}

/// Unit vector in span(W)^perp orthogonal to everything in `against`.
fn complement_direction(proj: &SubspaceProjector, against: &[&DVector<f64>], seed: u64) -> DVector<f64> {
    let mut rng = SeedTree::new(seed).stream("dir", 0);
    let mut z = proj.sample_complement(&mut rng).unwrap();
    for a in against {
        let a = a.normalize();
        z.axpy(-z.dot(&a), &a, 1.0);
    }
    z.normalize()
}

#[test]
fn loss_derivative_along_tangents_matches_population_gradient() {
    for act in ["quadratic", "he3", "he4"] {
        let (t, proj) = orthonormal_teacher(31, 4, 24, 1.5, act);
        let c_hat = sample_c(4, CMode::Quantized, &mut SeedTree::new(2).stream("c", 0));
        let params = PopulationParams::from_teacher(&t, &c_hat).unwrap();
        let u = &t.pert.u;
        let z = complement_direction(&proj, &[u], 3);
        let m = 0.35;
        let u_hat = u * m + &z * (1.0 - m * m).sqrt();
        let grad = population_gradient(&params, u, &u_hat).unwrap();
        // One tangent with a large gradient component, one orthogonal to u.
        let along = (u - &u_hat * m).normalize();
        let across = complement_direction(&proj, &[u, &u_hat], 4);
        let step = 1e-5;
        for dir in [&along, &across] {
            let at = |s: f64| {
                let v = (&u_hat + dir * s).normalize();
                population_loss(&t, &c_hat, &v).unwrap().value
            };
            let fd = (at(step) - at(-step)) / (2.0 * step);
            let an = grad.dot(dir);
            let scale = grad.norm().max(1e-12);
            assert!((fd - an).abs() <= 1e-4 * scale, "{act}: fd {fd} vs analytic {an}");
        }
    }
}

/// `2 sum_l (l + 1) mu_{l+1}^2 m^l`, the single-index limit of `h`.
fn glm_limit(act: &Activation, m: f64) -> f64 {
    (1..=act.truncation_order())
        .map(|p| 2.0 * p as f64 * act.mu(p).powi(2) * m.powi(p as i32 - 1))
        .sum()
}

#[test]
fn large_xi_bar_approaches_the_glm_curve() {
    let k = 8;
    for act in ["relu", "quadratic", "he3"] {
        let act = Activation::from_name(act, 64).unwrap();
        let c = DVector::from_element(k, 1.0 / (k as f64).sqrt());
        let mut last = f64::INFINITY;
        for xi_bar in [10.0, 100.0, 1000.0] {
            let params = PopulationParams::new(
                DMatrix::identity(k, k),
                DVector::from_element(k, 1.0 / k as f64),
                c.clone(),
                c.clone(),
                xi_bar * (k as f64).sqrt(),
                act.clone(),
            )
            .unwrap();
            let dist = (0..=20)
                .map(|i| -1.0 + 0.1 * i as f64)
                .map(|m| (h_closed(&params, m).unwrap().value - glm_limit(&act, m)).abs())
                .fold(0.0, f64::max);
            assert!(dist < last, "{}: distance {dist} did not shrink from {last}", act.name());
            last = dist;
        }
        assert!(last < 1e-3, "{}: distance {last} at xi_bar = 1000", act.name());
    }
}

#[test]
fn small_xi_bar_keeps_the_sign_of_h0() {
    let k = 16;
    let xi = 0.3 * (k as f64).sqrt();
    let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    for act in ["relu", "sigmoid", "he3"] {
        let base = identity_gram_params(k, xi, Activation::from_name(act, 64).unwrap());
        let scale = base.h0_matrix().norm() / k as f64;
        let mut rng = SeedTree::new(8).stream("signs", 0);
        let (mut counted, mut good) = (0, 0);
        for _ in 0..1000 {
            let params = PopulationParams {
                c: sample_c(k, CMode::Quantized, &mut rng),
                c_hat: sample_c(k, CMode::Quantized, &mut rng),
                ..base.clone()
            };
            let h0 = h_closed(&params, 0.0).unwrap().value;
            // The bound is only claimed where h(0) is anti-concentrated; with
            // mu_1 = 0 it vanishes outright whenever sum_i c_i c_hat_i = 0.
            if h0.abs() <= 1e-9 * scale {
                continue;
            }
            counted += 1;
            let ok = grid
                .iter()
                .filter(|&&m| m * h0 >= 0.0)
                .all(|&m| h_closed(&params, m).unwrap().value * h0.signum() >= 0.5 * h0.abs());
            good += ok as usize;
        }
        assert!(counted >= 700, "{act}: only {counted} non-degenerate draws");
        assert!(good * 100 >= 95 * counted, "{act}: {good}/{counted}");
    }
}

/// With unit weights `sum_i c_i c_hat_i` lives on the lattice `2Z/k`, whose
/// spacing changes with `k`; graded weights remove the lattice.
#[test]
fn small_ball_probability_does_not_depend_on_k() {
    let gammas = [0.1, 0.4, 1.6];
    let tables: Vec<_> = [64, 256]
        .into_iter()
        .map(|k| {
            let mut p = identity_gram_params(k, 1.0, Activation::relu());
            p.lambda = DVector::from_fn(k, |i, _| 1.0 + i as f64 / k as f64);
            h0_anticoncentration(&p, 10_000, &gammas, &mut SeedTree::new(k as u64).stream("anticonc", 0))
        })
        .collect();
    for g in gammas {
        let a = tables[0].row(Statistic::WeightedInner, g).unwrap();
        let b = tables[1].row(Statistic::WeightedInner, g).unwrap();
        assert!(a.lower <= b.upper && b.lower <= a.upper, "gamma {g}: {a:?} vs {b:?}");
    }
}

#[test]
fn closed_and_series_forms_agree_on_random_instances() {
    let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    let tree = SeedTree::new(77);
    for n in 0..20u64 {
        let mut rng = tree.stream("instance", n);
        let k = 2 + (n as usize % 7);
        let d = 4 * k;
        // Alternate orthonormal and generic unit rows.
        let w = if n % 2 == 0 {
            make_orthonormal_weights(k, d, &mut rng).unwrap()
        } else {
            make_random_weights(k, d, &mut rng)
        };
        let xi = [0.5, 1.0, (k as f64).sqrt()][n as usize % 3];
        let lambda = DVector::from_fn(k, |i, _| 0.5 + 0.1 * i as f64);
        let c = sample_c(k, CMode::Quantized, &mut rng);
        let c_hat = sample_c(k, CMode::Quantized, &mut rng);
        let _ = unit_vector(&mut rng, d);
        for name in BUILTIN {
            let act = Activation::from_name(name, 64).unwrap();
            let exact = act.is_exact();
            let params = PopulationParams::new(w.clone() * w.transpose(), lambda.clone(), c.clone(), c_hat.clone(), xi, act)
                .unwrap();
            for &m in &grid {
                let a = h_closed(&params, m).unwrap();
                let b = h_series(&params, m, usize::MAX, usize::MAX).unwrap();
                let gap = (a.value - b.value).abs();
                if exact {
                    assert!(gap <= 1e-10 * a.value.abs().max(1.0), "{name} n={n} m={m}: gap {gap}");
                } else {
                    let allowed = a.truncation_bound + b.truncation_bound + 1e-10 * a.value.abs().max(1.0);
                    assert!(gap <= allowed, "{name} n={n} m={m}: gap {gap} > {allowed}");
                }
            }
        }
    }
}
