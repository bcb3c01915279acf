//! Named constructions with closed-form weights.

use nalgebra::{DMatrix, DVector};

use super::{perturbed_neurons, BaseModel, NeuronScaling, Perturbation, TeacherModel};
use crate::error::Result;
use crate::hermite::{Activation, ActivationKind};

/// Instance on which learning the teacher from scratch is hard for
/// correlational queries while fine-tuning from the base model is easy.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessInstance {
    pub w: DMatrix<f64>,
    pub c: DVector<f64>,
    pub u: DVector<f64>,
    pub d: usize,
}

impl HardnessInstance {
    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    /// Coordinate carrying the pair (i, j), i < j.
    pub fn pair_coordinate(k: usize, i: usize, j: usize) -> usize {
        assert!(i < j && j < k);
        // Pairs (0,1), (0,2), ..., (0,k-1), (1,2), ...
        k + i * (2 * k - i - 1) / 2 + (j - i - 1)
    }

    /// Rows `(w_i + c_i u) / ||w_i + c_i u||`.
    pub fn perturbed_directions(&self) -> DMatrix<f64> {
        perturbed_neurons(&self.w, 1.0, &self.c, &self.u, NeuronScaling::Normalized)
    }

    /// Teacher with xi = 1 and unit second layer.
    pub fn teacher(&self, activation: Activation) -> Result<TeacherModel> {
        let base = BaseModel::with_unit_lambda(self.w.clone(), activation)?;
        let pert = Perturbation::new(1.0, self.c.clone(), self.u.clone())?;
        TeacherModel::new(base, pert, NeuronScaling::Normalized)
    }
}

/// Builds the instance in dimension `d = 2 + k(k+1)/2`.
///
/// Coordinate `i < k` is private to row `i` (value `1/sqrt(k)`); each pair
/// `i < j` shares one coordinate where row `i` has `1/sqrt(k)` and row `j`
/// has `-sign(c_i c_j)/sqrt(k)`, so `<w_i, w_j> = -c_i c_j`. The signs
/// alternate, `c_i = (-1)^(i+1)/sqrt(k)` for zero-based `i`, and `u` is the
/// basis vector right after the pair block, untouched by every row.
pub fn hardness_instance(k: usize) -> Result<HardnessInstance> {
    if k < 2 {
        return Err(crate::Error::invalid(format!("hardness instance needs k >= 2, got {k}")));
    }
    let d = 2 + k * (k + 1) / 2;
    let a = 1.0 / (k as f64).sqrt();
    let c = DVector::from_fn(k, |i, _| if i % 2 == 0 { -a } else { a });
    let mut w = DMatrix::zeros(k, d);
    for i in 0..k {
        w[(i, i)] = a;
    }
    for i in 0..k {
        for j in i + 1..k {
            let p = HardnessInstance::pair_coordinate(k, i, j);
            w[(i, p)] = a;
            w[(j, p)] = -(c[i] * c[j]).signum() * a;
        }
    }
    let mut u = DVector::zeros(d);
    u[k * (k + 1) / 2] = 1.0;
    Ok(HardnessInstance { w, c, u, d })
}

/// Two unnormalized quadratic teachers in d = 2 with the same base rows and
/// equal-norm sign vectors, different perturbation directions, and the same
/// input-output map.
pub fn global_optima_example() -> Result<(TeacherModel, TeacherModel)> {
    let s2 = 2f64.sqrt();
    let s3 = 3f64.sqrt();
    let w = DMatrix::identity(2, 2);
    let u = DVector::from_vec(vec![1.0 / s2, 1.0 / s2]);
    let u_prime = DVector::from_vec(vec![1.0 / s3, 6f64.sqrt() / 3.0]);
    let c = DVector::from_vec(vec![-(1.0 + s2) * (2.0 + s3), (1.0 + s2) * (s2 + s3)]);
    let c_prime = -&c;
    let base = BaseModel::with_unit_lambda(w, Activation::new(ActivationKind::Quadratic, 2)?)?;
    let a = TeacherModel::new(base.clone(), Perturbation::new(1.0, c, u)?, NeuronScaling::Unnormalized)?;
    let b = TeacherModel::new(base, Perturbation::new(1.0, c_prime, u_prime)?, NeuronScaling::Unnormalized)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vector, SeedTree};

    #[test]
    fn pair_coordinates_are_lexicographic() {
        let k = 4;
        let coords: Vec<usize> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| HardnessInstance::pair_coordinate(k, i, j)))
            .collect();
        assert_eq!(coords, (4..10).collect::<Vec<_>>());
    }

    #[test]
    fn k4_support_pattern() {
        let inst = hardness_instance(4).unwrap();
        assert_eq!(inst.d, 12);
        // Every row touches its own coordinate plus its three pairs; the
        // direction coordinate and the spare one are empty.
        for i in 0..4 {
            let support: Vec<usize> = (0..12).filter(|&p| inst.w[(i, p)] != 0.0).collect();
            assert_eq!(support.len(), 4);
            assert!(support.contains(&i));
        }
        for p in [10, 11] {
            assert!(inst.w.column(p).iter().all(|v| *v == 0.0));
        }
        assert_eq!(inst.u[10], 1.0);
        // Alternating signs make every pair product negative for neighbours.
        assert_eq!(inst.c.as_slice(), &[-0.5, 0.5, -0.5, 0.5]);
    }

    #[test]
    fn k2_overlap() {
        let inst = hardness_instance(2).unwrap();
        let g = inst.w.row(0).dot(&inst.w.row(1));
        assert_eq!(g, -inst.c[0] * inst.c[1]);
        assert!((g - 0.5).abs() <= f64::EPSILON);
    }

    #[test]
    fn perturbed_directions_are_orthonormal() {
        for k in 2..=12 {
            let inst = hardness_instance(k).unwrap();
            for row in inst.w.row_iter() {
                assert!((row.norm() - 1.0).abs() < 1e-12);
            }
            assert_eq!((&inst.w * &inst.u).amax(), 0.0);
            let v = inst.perturbed_directions();
            let g = &v * v.transpose();
            assert!((g - DMatrix::identity(k, k)).amax() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn global_optima_are_equivalent_but_distinct() {
        let (a, b) = global_optima_example().unwrap();
        assert_eq!(a.pert.c.norm(), b.pert.c.norm());
        let mut rng = SeedTree::new(11).stream("x", 0);
        for _ in 0..1000 {
            let x = gaussian_vector(&mut rng, 2);
            let (fa, fb) = (a.forward(&x), b.forward(&x));
            assert!((fa - fb).abs() <= 1e-9, "{fa} vs {fb}");
        }
        let (va, vb) = (a.neurons(), b.neurons());
        let dist = |i: usize, j: usize| (va.row(i) - vb.row(j)).norm();
        let matched = dist(0, 0).max(dist(1, 1)).min(dist(0, 1).max(dist(1, 0)));
        assert!(matched > 0.1);
    }
}
