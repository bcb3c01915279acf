use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    fit_decay, hermite_coeffs, hermite_coeffs_piecewise, hermite_poly, power_tail,
    quadrature::{GaussHermite, PiecewiseGaussian},
    DecayParams, QuadratureOptions,
};
use crate::error::{Error, Result};

/// Truncation order used when none is given.
pub const DEFAULT_ORDER: usize = 64;

/// Piecewise-linear activation tabulated on a strictly increasing grid,
/// extended linearly beyond the end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Table {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Format {
                what: "activation table",
                detail: "need at least two (a, sigma(a)) rows".into(),
            });
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Format {
                what: "activation table",
                detail: "non-finite entry".into(),
            });
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format {
                what: "activation table",
                detail: "grid must be strictly increasing".into(),
            });
        }
        Ok(Table { xs, ys })
    }

    /// Reads `a,sigma(a)` rows; a non-numeric first row is taken as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Format {
                    what: "activation table",
                    detail: format!("{other:?}"),
                },
            })?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                return Err(Error::Format {
                    what: "activation table",
                    detail: format!("row {} has {} fields", row + 1, record.len()),
                });
            }
            match (record[0].parse::<f64>(), record[1].parse::<f64>()) {
                (Ok(a), Ok(s)) => {
                    xs.push(a);
                    ys.push(s);
                }
                _ if row == 0 => continue,
                _ => {
                    return Err(Error::Format {
                        what: "activation table",
                        detail: format!("row {} is not numeric", row + 1),
                    })
                }
            }
        }
        Table::new(xs, ys)
    }

    fn segment(&self, a: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&x| x <= a) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    fn slope(&self, i: usize) -> f64 {
        (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
    }

    pub fn eval(&self, a: f64) -> f64 {
        let i = self.segment(a);
        self.ys[i] + self.slope(i) * (a - self.xs[i])
    }

    pub fn derivative(&self, a: f64) -> f64 {
        self.slope(self.segment(a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
    Quadratic,
    /// The normalized Hermite polynomial h_q.
    Hermite(usize),
    Tabulated(Arc<Table>),
}

impl ActivationKind {
    /// Accepts `relu`, `sigmoid`, `tanh`, `identity`, `quadratic`, and
    /// `he<q>` / `hermite<q>` / `hermite(<q>)` / `hermite:<q>`.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "relu" => ActivationKind::Relu,
            "sigmoid" => ActivationKind::Sigmoid,
            "tanh" => ActivationKind::Tanh,
            "identity" | "linear" => ActivationKind::Identity,
            "quadratic" | "square" => ActivationKind::Quadratic,
            other => {
                let rest = other
                    .strip_prefix("hermite")
                    .or_else(|| other.strip_prefix("he"))
                    .ok_or_else(|| Error::invalid(format!("unknown activation '{name}'")))?;
                let digits = rest.trim_matches(|c| c == '(' || c == ')' || c == ':' || c == '_');
                let q = digits
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("unknown activation '{name}'")))?;
                ActivationKind::Hermite(q)
            }
        };
        Ok(kind)
    }

    pub fn name(&self) -> String {
        match self {
            ActivationKind::Relu => "relu".into(),
            ActivationKind::Sigmoid => "sigmoid".into(),
            ActivationKind::Tanh => "tanh".into(),
            ActivationKind::Identity => "identity".into(),
            ActivationKind::Quadratic => "quadratic".into(),
            ActivationKind::Hermite(q) => format!("he{q}"),
            ActivationKind::Tabulated(_) => "custom".into(),
        }
    }

    #[inline]
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            ActivationKind::Relu => a.max(0.0),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-a).exp()),
            ActivationKind::Tanh => a.tanh(),
            ActivationKind::Identity => a,
            ActivationKind::Quadratic => a * a,
            ActivationKind::Hermite(3) => (a * a * a - 3.0 * a) / 6f64.sqrt(),
            ActivationKind::Hermite(q) => hermite_poly(*q, a),
            ActivationKind::Tabulated(t) => t.eval(a),
        }
    }

    /// sigma'(a); ReLU uses sigma'(0) = 0.
    #[inline]
    pub fn derivative(&self, a: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
            ActivationKind::Quadratic => 2.0 * a,
            ActivationKind::Hermite(0) => 0.0,
            ActivationKind::Hermite(3) => (3.0 * a * a - 3.0) / 6f64.sqrt(),
            ActivationKind::Hermite(q) => (*q as f64).sqrt() * hermite_poly(q - 1, a),
            ActivationKind::Tabulated(t) => t.derivative(a),
        }
    }

    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            ActivationKind::Identity => Some(1),
            ActivationKind::Quadratic => Some(2),
            ActivationKind::Hermite(q) => Some(*q),
            _ => None,
        }
    }

    fn breakpoints(&self) -> Option<Vec<f64>> {
        match self {
            ActivationKind::Relu => Some(vec![0.0]),
            ActivationKind::Tabulated(t) => Some(t.xs.clone()),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// An activation together with its Hermite coefficients up to a truncation
/// order and a fitted decay envelope. Immutable once built.
#[derive(Debug, Clone)]
pub struct Activation {
    kind: ActivationKind,
    coeffs: Vec<f64>,
    decay: DecayParams,
    second_moment: f64,
}

impl Activation {
    pub fn new(kind: ActivationKind, order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("truncation order P must be at least 1"));
        }
        let mut coeffs = vec![0.0; order + 1];
        let second_moment;
        match &kind {
            ActivationKind::Identity => {
                coeffs[1] = 1.0;
                second_moment = 1.0;
            }
            ActivationKind::Quadratic => {
                if order < 2 {
                    return Err(Error::invalid("quadratic activation needs P >= 2"));
                }
                coeffs[0] = 1.0;
                coeffs[2] = std::f64::consts::SQRT_2;
                second_moment = 3.0;
            }
            ActivationKind::Hermite(q) => {
                if *q > order {
                    return Err(Error::invalid(format!("he{q} needs P >= {q}, got {order}")));
                }
                coeffs[*q] = 1.0;
                second_moment = 1.0;
            }
            other => {
                let f = |a: f64| other.eval(a);
                coeffs = match other.breakpoints() {
                    Some(bp) => hermite_coeffs_piecewise(f, order, &bp, 1e-10)?,
                    None => hermite_coeffs(f, order, QuadratureOptions::default())?,
                };
                second_moment = match other.breakpoints() {
                    Some(bp) => PiecewiseGaussian::new(&bp, 38.0, 0.125, 16).expect(|a| f(a) * f(a)),
                    None => GaussHermite::cached(400)?.expect(|a| f(a) * f(a)),
                };
                // Quadrature noise on exact zeros (odd ReLU terms, even
                // sigmoid terms) is cleaned to keep decay fits honest.
                for c in coeffs.iter_mut() {
                    if c.abs() < 1e-13 {
                        *c = 0.0;
                    }
                }
            }
        }
        let decay = fit_decay(&coeffs, kind.polynomial_degree().is_some());
        Ok(Activation {
            kind,
            coeffs,
            decay,
            second_moment,
        })
    }

    pub fn from_name(name: &str, order: usize) -> Result<Self> {
        Activation::new(ActivationKind::parse(name)?, order)
    }

    pub fn tabulated(table: Table, order: usize) -> Result<Self> {
        Activation::new(ActivationKind::Tabulated(Arc::new(table)), order)
    }

    pub fn tabulated_from_csv(path: &Path, order: usize) -> Result<Self> {
        Activation::tabulated(Table::from_csv(path)?, order)
    }

    pub fn relu() -> Self {
        Activation::new(ActivationKind::Relu, DEFAULT_ORDER).expect("relu coefficients converge")
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn name(&self) -> String {
        self.kind.name()
    }

    #[inline]
    pub fn eval(&self, a: f64) -> f64 {
        self.kind.eval(a)
    }

    #[inline]
    pub fn derivative(&self, a: f64) -> f64 {
        self.kind.derivative(a)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// mu_p, treating coefficients beyond the truncation order as zero.
    pub fn mu(&self, p: usize) -> f64 {
        self.coeffs.get(p).copied().unwrap_or(0.0)
    }

    pub fn truncation_order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn decay(&self) -> DecayParams {
        self.decay
    }

    /// True when the Hermite expansion terminates at or before the
    /// truncation order, so truncated series are exact.
    pub fn is_exact(&self) -> bool {
        self.kind
            .polynomial_degree()
            .is_some_and(|deg| deg <= self.truncation_order())
    }

    /// E[sigma(g)^2].
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// ||sigma||^2 - sum_{p <= P} mu_p^2.
    pub fn parseval_gap(&self) -> f64 {
        self.second_moment - self.coeffs.iter().map(|c| c * c).sum::<f64>()
    }

    /// Bound on sum_{p > P} p^a mu_p^2 r^{p-1} from the decay envelope;
    /// zero for exact expansions.
    pub fn tail_bound(&self, r: f64, power_of_p: f64) -> f64 {
        if self.is_exact() {
            return 0.0;
        }
        let DecayParams { c, rho } = self.decay;
        c * c * power_tail(self.truncation_order(), r, 2.0 + 2.0 * rho - power_of_p)
    }

    /// Bound on the dropped mass sum_{p > P} p mu_p^2.
    pub fn tail_mass(&self) -> f64 {
        self.tail_bound(1.0, 1.0)
    }

    /// sum_p p mu_p^2 (= E[sigma'(g)^2]) over the retained coefficients.
    pub fn derivative_energy(&self) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(p, c)| p as f64 * c * c)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!(ActivationKind::parse("ReLU").unwrap(), ActivationKind::Relu);
        assert_eq!(ActivationKind::parse("he3").unwrap(), ActivationKind::Hermite(3));
        assert_eq!(ActivationKind::parse("hermite(4)").unwrap(), ActivationKind::Hermite(4));
        assert_eq!(ActivationKind::parse("hermite:2").unwrap(), ActivationKind::Hermite(2));
        assert!(ActivationKind::parse("softmax").is_err());
    }

    #[test]
    fn hermite_kind_has_exact_unit_coefficient() {
        let act = Activation::from_name("he3", 8).unwrap();
        for (p, c) in act.coeffs().iter().enumerate() {
            assert_eq!(*c, if p == 3 { 1.0 } else { 0.0 });
        }
        assert!(act.is_exact());
        assert_eq!(act.tail_mass(), 0.0);
        assert!(Activation::from_name("he5", 4).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for name in ["sigmoid", "tanh", "quadratic", "he3", "he5", "identity"] {
            let act = Activation::from_name(name, 8).unwrap();
            for &a in &[-1.7, -0.3, 0.4, 2.2] {
                let h = 1e-6;
                let fd = (act.eval(a + h) - act.eval(a - h)) / (2.0 * h);
                assert!((fd - act.derivative(a)).abs() < 1e-6, "{name} at {a}");
            }
        }
        let relu = Activation::relu();
        assert_eq!(relu.derivative(0.0), 0.0);
        assert_eq!(relu.derivative(1e-300), 1.0);
    }

    #[test]
    fn relu_coefficients_and_parseval() {
        let act = Activation::relu();
        assert!((act.mu(1) - 0.5).abs() < 1e-12);
        assert!((act.second_moment() - 0.5).abs() < 1e-13);
        let gap = act.parseval_gap();
        assert!((-1e-12..1e-3).contains(&gap), "gap {gap}");
        // The envelope covers every computed coefficient.
        let d = act.decay();
        assert!(super::super::check_decay(act.coeffs(), d.c, d.rho).passed());
        assert!(d.rho > 0.0 && d.rho < 0.3, "relu decays like p^-5/4, got rho {}", d.rho);
        // sum p mu_p^2 -> E[relu'(g)^2] = 1/2 from below.
        let e = act.derivative_energy();
        assert!(e < 0.5 && e + act.tail_mass() >= 0.5, "{e} {}", act.tail_mass());
    }

    #[test]
    fn tabulated_relu_matches_builtin() {
        let xs: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.max(0.0)).collect();
        let act = Activation::tabulated(Table::new(xs, ys).unwrap(), 12).unwrap();
        let relu = Activation::new(ActivationKind::Relu, 12).unwrap();
        for p in 0..=12 {
            assert!((act.mu(p) - relu.mu(p)).abs() < 1e-12, "p={p}");
        }
        assert_eq!(act.eval(-100.0), 0.0);
        assert_eq!(act.eval(100.0), 100.0);
    }

    #[test]
    fn table_rejects_non_monotone_grid() {
        assert!(Table::new(vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]).is_err());
        assert!(Table::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn table_from_csv_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("act.csv");
        std::fs::write(&path, "a,sigma\n-1,0\n0,0\n1,2\n").unwrap();
        let t = Table::from_csv(&path).unwrap();
        assert_eq!(t.eval(0.5), 1.0);
        assert_eq!(t.derivative(0.5), 2.0);
        std::fs::write(&path, "a,sigma\n-1,0\n0,x\n").unwrap();
        assert!(Table::from_csv(&path).is_err());
    }
}
