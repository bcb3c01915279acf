//! Step sizes and horizons prescribed by the convergence theorems.
//!
//! Each setting fixes a variance proxy `V_k`, a time scale `delta`, and a
//! horizon multiplier `alpha`; then `eta = delta / (d V_k)` and
//! `T = ceil(alpha d V_k)`. For the named settings `L = ln(lambda_max^4 d k^2)`
//! plays the role of `ln(d V_k)`, and the signal proxy is the value of `S_k`
//! for which the generic relation `alpha = 4 L / (epsilon delta S_k)` holds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Orthonormal rows, xi = 1.
    OrthXi1,
    /// Orthonormal rows, xi = xi_bar sqrt(k).
    OrthFrob,
    /// Angularly separated rows, xi = 1.
    Separated,
    /// Explicit `(S_k, V_k)`.
    Generic,
}

impl Setting {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "orth_xi1" | "orth_spectral" => Ok(Setting::OrthXi1),
            "orth_frob" => Ok(Setting::OrthFrob),
            "separated" => Ok(Setting::Separated),
            "generic" => Ok(Setting::Generic),
            _ => Err(Error::invalid(format!(
                "unknown schedule setting {name:?} (orth_xi1, orth_frob, separated, generic)"
            ))),
        }
    }
}

/// The absolute constants the theorems leave unspecified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConstants {
    pub c_delta: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Stand-in for mu_1 in the generic time scale.
    pub mu1_proxy: f64,
    /// Replaces the logarithm `L` (or `ln(d V_k)`) when set.
    pub log_factor: Option<f64>,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants {
            c_delta: 0.1,
            gamma: 0.1,
            beta: 1.0,
            mu1_proxy: 1.0,
            log_factor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    pub setting: Setting,
    pub k: usize,
    pub d: f64,
    pub epsilon: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Perturbation scale; `xi_bar = xi / sqrt(k)` in the Frobenius setting.
    pub xi: f64,
    pub mu1_nonzero: bool,
    /// Required for [`Setting::Generic`].
    pub s_k: Option<f64>,
    pub v_k: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta: f64,
    pub alpha: f64,
    pub v_k: f64,
    pub s_k: f64,
    pub eta: f64,
    /// `alpha d V_k` before rounding.
    pub horizon: f64,
    pub t: u64,
    pub t_weak: u64,
    pub constants: ScheduleConstants,
}

pub fn theorem_schedule(inputs: &ScheduleInputs, constants: &ScheduleConstants) -> Result<Schedule> {
    let ScheduleInputs {
        setting,
        k,
        d,
        epsilon,
        lambda_min,
        lambda_max,
        xi,
        mu1_nonzero,
        ..
    } = *inputs;
    if !(lambda_min > 0.0) {
        return Err(Error::invalid(format!("lambda_min must be positive, got {lambda_min}")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    if k == 0 || !(d > 0.0) || !(lambda_max >= lambda_min) {
        return Err(Error::invalid("need k >= 1, d > 0 and lambda_max >= lambda_min"));
    }
    let ScheduleConstants {
        c_delta, gamma, mu1_proxy, ..
    } = *constants;
    if !(c_delta > 0.0 && gamma > 0.0 && mu1_proxy > 0.0) {
        return Err(Error::invalid("schedule constants must be positive"));
    }
    let kf = k as f64;
    let sk = kf.sqrt();
    let l2 = lambda_min * lambda_min;
    let l4 = lambda_max.powi(4);
    let eps3 = epsilon.powi(3);
    let named_log = constants.log_factor.unwrap_or_else(|| (l4 * d * kf * kf).ln());

    let (delta, alpha, v_k, log) = match setting {
        Setting::OrthXi1 => {
            let (fd, fa) = if mu1_nonzero { (1.0, 1.0) } else { (1.0 / sk, sk) };
            let delta = c_delta * gamma * l2 * eps3 / named_log.powi(2) * fd;
            let alpha = named_log / (l2 * gamma * epsilon * delta) * fa;
            (delta, alpha, l4 * kf * kf, named_log)
        }
        Setting::OrthFrob => {
            if !(xi > 0.0) {
                return Err(Error::invalid("the Frobenius setting needs xi > 0"));
            }
            let xb2 = xi * xi / kf;
            let (fd, fa) = if mu1_nonzero { (sk, 1.0 / sk) } else { (1.0, 1.0) };
            let delta = (c_delta * xb2 * sk * gamma * l2 * eps3 / named_log.powi(2) * fd).min(1.0);
            let alpha = named_log / (xb2 * l2 * sk * gamma * epsilon * delta) * fa;
            (delta, alpha, xb2 * l4 * kf.powi(4), named_log)
        }
        Setting::Separated => {
            let delta = c_delta * gamma * l2 * eps3 / (named_log.powi(2) * sk);
            let alpha = named_log * sk / (l2 * gamma * epsilon * delta);
            (delta, alpha, l4 * kf * kf, named_log)
        }
        Setting::Generic => {
            let (Some(s_k), Some(v_k)) = (inputs.s_k, inputs.v_k) else {
                return Err(Error::invalid("the generic setting needs S_k and V_k"));
            };
            if !(s_k > 0.0 && v_k > 0.0) {
                return Err(Error::invalid("S_k and V_k must be positive"));
            }
            let log = constants.log_factor.unwrap_or_else(|| (d * v_k).ln());
            if !(log > 0.0) {
                return Err(Error::invalid("ln(d V_k) must be positive"));
            }
            let delta = (s_k * eps3 / (4.0 * mu1_proxy * log * log)).min(1.0);
            let alpha = 4.0 * log / (epsilon * delta * s_k);
            (delta, alpha, v_k, log)
        }
    };
    let s_k = match setting {
        Setting::Generic => inputs.s_k.unwrap_or(f64::NAN),
        _ => 4.0 * log / (epsilon * alpha * delta),
    };
    let horizon = alpha * d * v_k;
    let t_weak = (4.0 * d * v_k / (delta * s_k)).ceil();
    if !horizon.is_finite() || horizon > u64::MAX as f64 {
        return Err(Error::invalid(format!("horizon {horizon} is not representable")));
    }
    Ok(Schedule {
        delta,
        alpha,
        v_k,
        s_k,
        eta: delta / (d * v_k),
        horizon,
        t: horizon.ceil() as u64,
        t_weak: t_weak as u64,
        constants: *constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(setting: Setting, k: usize, d: f64, mu1: bool) -> ScheduleInputs {
        ScheduleInputs {
            setting,
            k,
            d,
            epsilon: 0.1,
            lambda_min: 1.0,
            lambda_max: 1.0,
            xi: 1.0,
            mu1_nonzero: mu1,
            s_k: None,
            v_k: None,
        }
    }

    #[test]
    fn generic_example() {
        let d = std::f64::consts::E;
        let mut inp = inputs(Setting::Generic, 1, d, true);
        inp.epsilon = 1.0;
        inp.s_k = Some(1.0);
        inp.v_k = Some(1.0);
        let s = theorem_schedule(&inp, &ScheduleConstants::default()).unwrap();
        assert!((s.delta - 0.25).abs() < 1e-15);
        assert!((s.eta - 1.0 / (4.0 * d)).abs() < 1e-15);
        assert!((s.alpha - 16.0).abs() < 1e-12);
        assert_eq!(s.t, (16.0 * d).ceil() as u64);
        assert!(s.t_weak <= s.t);
    }

    #[test]
    fn frobenius_mu1_branch_divides_horizon_by_k() {
        let k = 16;
        let mut inp = inputs(Setting::OrthFrob, k, 1000.0, true);
        inp.xi = (k as f64).sqrt();
        let c = ScheduleConstants::default();
        let a = theorem_schedule(&inp, &c).unwrap();
        inp.mu1_nonzero = false;
        let b = theorem_schedule(&inp, &c).unwrap();
        assert!((a.horizon / b.horizon - 1.0 / k as f64).abs() < 1e-12);
    }

    #[test]
    fn separated_scaling_in_d() {
        let c = ScheduleConstants {
            log_factor: Some(5.0),
            ..Default::default()
        };
        let a = theorem_schedule(&inputs(Setting::Separated, 9, 500.0, true), &c).unwrap();
        let b = theorem_schedule(&inputs(Setting::Separated, 9, 1000.0, true), &c).unwrap();
        assert!((b.horizon / a.horizon - 2.0).abs() < 1e-12);
        assert!((a.eta / b.eta - 2.0).abs() < 1e-12);
        // With the logarithm left free, T grows like d ln(d)^3.
        let c = ScheduleConstants::default();
        let a = theorem_schedule(&inputs(Setting::Separated, 9, 500.0, true), &c).unwrap();
        let b = theorem_schedule(&inputs(Setting::Separated, 9, 1000.0, true), &c).unwrap();
        let l = |d: f64| (d * 81.0f64).ln();
        let expected = 2.0 * (l(1000.0) / l(500.0)).powi(3);
        assert!((b.horizon / a.horizon - expected).abs() < 1e-9);
    }

    #[test]
    fn weak_time_precedes_horizon() {
        for setting in [Setting::OrthXi1, Setting::OrthFrob, Setting::Separated] {
            for mu1 in [true, false] {
                let s = theorem_schedule(&inputs(setting, 8, 256.0, mu1), &ScheduleConstants::default()).unwrap();
                assert!(s.t_weak < s.t, "{setting:?}");
                assert!((s.eta - s.delta / (256.0 * s.v_k)).abs() <= 1e-15 * s.eta);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut inp = inputs(Setting::OrthXi1, 4, 100.0, true);
        inp.lambda_min = 0.0;
        assert!(theorem_schedule(&inp, &ScheduleConstants::default()).is_err());
        let inp = inputs(Setting::Generic, 4, 100.0, true);
        assert!(theorem_schedule(&inp, &ScheduleConstants::default()).is_err());
    }
}
