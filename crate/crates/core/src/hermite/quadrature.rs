//! Gaussian quadrature rules.
//!
//! Gauss–Hermite rules are built for the probabilist weight (the standard
//! normal density), obtained from the physicist rule for e^{-x^2} by the
//! change of variables x -> sqrt(2) x. Nodes start from the eigenvalues of the
//! Jacobi matrix and are polished by Newton steps on the orthonormal
//! recurrence; weights come from the Christoffel function, which stays
//! accurate where eigenvector-based weights lose relative precision.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Largest Gauss–Hermite rule we build. Beyond this h_p at the extreme nodes
/// can overflow for the orders we project onto.
pub const MAX_HERMITE_NODES: usize = 1000;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gauss–Hermite rule for E_{g ~ N(0,1)}[f(g)].
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_HERMITE_NODES {
            return Err(Error::invalid(format!(
                "Gauss-Hermite node count must be in 1..={MAX_HERMITE_NODES}, got {n}"
            )));
        }
        // Physicist Jacobi matrix: zero diagonal, off-diagonal sqrt(j/2).
        let mut diag = vec![0.0; n];
        let mut off: Vec<f64> = (1..=n)
            .map(|j| if j < n { (j as f64 / 2.0).sqrt() } else { 0.0 })
            .collect();
        tridiagonal_eigenvalues(&mut diag, &mut off)?;
        let mut nodes: Vec<f64> = diag.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
        nodes.sort_by(|a, b| a.total_cmp(b));

        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..8 {
                let sweep = HermiteSweep::run(n, *x);
                let step = sweep.last / ((n as f64).sqrt() * sweep.before_last);
                *x -= step;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            // Christoffel number 1 / sum_{j<n} h_j(x)^2.
            let sweep = HermiteSweep::run(n, *x);
            weights.push((-(sweep.sum_squares.ln() + 2.0 * sweep.log_scale)).exp());
        }
        // Symmetrize: the rule is exactly even.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -x;
            nodes[j] = x;
            let w = 0.5 * (weights[i] + weights[j]);
            weights[i] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(GaussHermite { nodes, weights })
    }

    /// Shared, lazily built rule.
    pub fn cached(n: usize) -> Result<Arc<GaussHermite>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(rule) = cache.lock().expect("quadrature cache poisoned").get(&n) {
            return Ok(rule.clone());
        }
        let rule = Arc::new(GaussHermite::new(n)?);
        cache
            .lock()
            .expect("quadrature cache poisoned")
            .insert(n, rule.clone());
        Ok(rule)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| if w == 0.0 { 0.0 } else { w * f(x) })
            .sum()
    }

    /// E[f(g) h_p(g)] for p = 0..=max_order.
    pub fn hermite_projections(&self, f: impl Fn(f64) -> f64, max_order: usize) -> Vec<f64> {
        let mut out = vec![0.0; max_order + 1];
        let mut h = vec![0.0; max_order + 1];
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let fx = f(x);
            if fx == 0.0 {
                continue;
            }
            super::hermite_values(x, &mut h);
            for (o, hp) in out.iter_mut().zip(&h) {
                *o += w * fx * hp;
            }
        }
        out
    }
}

/// One pass of the orthonormal recurrence up to degree n, rescaled on the
/// fly: true h_j = stored h_j * e^{log_scale}.
struct HermiteSweep {
    last: f64,
    before_last: f64,
    sum_squares: f64,
    log_scale: f64,
}

impl HermiteSweep {
    fn run(n: usize, x: f64) -> Self {
        const BIG: f64 = 1e150;
        let mut prev = 0.0;
        let mut cur = 1.0;
        let mut sum_squares = 0.0;
        let mut log_scale = 0.0;
        for j in 0..n {
            sum_squares += cur * cur;
            let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
            prev = cur;
            cur = next;
            if cur.abs() > BIG {
                cur /= BIG;
                prev /= BIG;
                sum_squares /= BIG * BIG;
                log_scale += BIG.ln();
            }
        }
        HermiteSweep {
            last: cur,
            before_last: prev,
            sum_squares,
            log_scale,
        }
    }
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with
/// Wilkinson shifts. `off[i]` couples rows i and i+1; the last entry is
/// ignored. Eigenvalues are left (unsorted) in `diag`.
pub(crate) fn tridiagonal_eigenvalues(diag: &mut [f64], off: &mut [f64]) -> Result<()> {
    let n = diag.len();
    if n == 0 {
        return Ok(());
    }
    off[n - 1] = 0.0;
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 100 {
                return Err(Error::invalid("tridiagonal QL failed to converge"));
            }
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
    Ok(())
}

/// n-point Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre rule for the standard normal measure over
/// [-limit, limit], with panel edges forced at every breakpoint so that kinks
/// of the integrand fall on panel boundaries.
#[derive(Debug, Clone)]
pub struct PiecewiseGaussian {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PiecewiseGaussian {
    pub fn new(breakpoints: &[f64], limit: f64, max_panel_width: f64, order: usize) -> Self {
        let mut edges: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|b| b.is_finite() && b.abs() < limit)
            .collect();
        edges.push(-limit);
        edges.push(limit);
        edges.sort_by(|a, b| a.total_cmp(b));
        edges.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

        let (gl_x, gl_w) = gauss_legendre(order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for seg in edges.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let panels = ((b - a) / max_panel_width).ceil().max(1.0) as usize;
            let h = (b - a) / panels as f64;
            for k in 0..panels {
                let lo = a + k as f64 * h;
                let mid = lo + 0.5 * h;
                for (&t, &w) in gl_x.iter().zip(&gl_w) {
                    let x = mid + 0.5 * h * t;
                    nodes.push(x);
                    weights.push(0.5 * h * w * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp());
                }
            }
        }
        PiecewiseGaussian { nodes, weights }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    pub fn hermite_projections(&self, f: impl Fn(f64) -> f64, max_order: usize) -> Vec<f64> {
        let mut out = vec![0.0; max_order + 1];
        let mut h = vec![0.0; max_order + 1];
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let fx = f(x);
            if fx == 0.0 || w == 0.0 {
                continue;
            }
            super::hermite_values(x, &mut h);
            for (o, hp) in out.iter_mut().zip(&h) {
                *o += w * fx * hp;
            }
        }
        out
    }
}
