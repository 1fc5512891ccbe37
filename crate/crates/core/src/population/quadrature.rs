//! Probability-weighted quadrature grids over the real line.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureScheme {
    GaussHermite,
    TanhSinh,
    QuantileMidpoint,
}

/// Nodes and probability weights approximating `E g(V)` by `sum w_i g(v_i)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub scheme: QuadratureScheme,
}

pub const MIN_NODES: usize = 64;

impl QuadratureGrid {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| w * g(v))
            .sum()
    }

    /// Rule for `N(mean, sd^2)`.
    pub fn gauss_hermite(mean: f64, sd: f64, n: usize) -> Self {
        let rule = standard_normal_rule(n);
        Self {
            nodes: rule.0.iter().map(|z| mean + sd * z).collect(),
            weights: rule.1.clone(),
            scheme: QuadratureScheme::GaussHermite,
        }
    }

    /// Double-exponential (sinh-sinh) rule for a density on the whole line,
    /// centred at `location` with spread `scale`. Suited to algebraic tails.
    pub fn tanh_sinh(density: impl Fn(f64) -> f64, location: f64, scale: f64, n: usize) -> Self {
        let half = n / 2;
        let t_max = 4.0;
        let h = t_max / half as f64;
        let mut nodes = Vec::with_capacity(2 * half + 1);
        let mut weights = Vec::with_capacity(2 * half + 1);
        for k in -(half as i64)..=(half as i64) {
            let t = k as f64 * h;
            let u = FRAC_PI_2 * t.sinh();
            let v = location + scale * u.sinh();
            let jac = scale * FRAC_PI_2 * t.cosh() * u.cosh();
            let w = h * jac * density(v);
            if w > 0.0 && w.is_finite() {
                nodes.push(v);
                weights.push(w);
            }
        }
        normalize(&mut weights);
        Self {
            nodes,
            weights,
            scheme: QuadratureScheme::TanhSinh,
        }
    }

    /// Equal-weight rule at the quantiles `(k - 1/2)/n`.
    pub fn quantile_midpoint(quantile: impl Fn(f64) -> f64, n: usize) -> Self {
        let nodes = (0..n).map(|k| quantile((k as f64 + 0.5) / n as f64)).collect();
        Self {
            nodes,
            weights: vec![1.0 / n as f64; n],
            scheme: QuadratureScheme::QuantileMidpoint,
        }
    }

    /// Concatenates component grids scaled by mixture probabilities.
    pub fn mixture(parts: Vec<(f64, QuadratureGrid)>) -> Self {
        let scheme = parts.first().map_or(QuadratureScheme::GaussHermite, |p| p.1.scheme);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (p, grid) in parts {
            nodes.extend(grid.nodes);
            weights.extend(grid.weights.into_iter().map(|w| p * w));
        }
        normalize(&mut weights);
        Self {
            nodes,
            weights,
            scheme,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn normalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// `n`-point Gauss-Hermite rule for the standard normal: `E g(Z) ~ sum w g(z)`.
///
/// Nodes whose weight underflows are dropped. Rules are cached per `n`.
pub fn standard_normal_rule(n: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(rule) = cache.lock().unwrap().get(&n) {
        return rule.clone();
    }
    let (x, w) = hermite_physicists(n);
    let (nodes, weights): (Vec<f64>, Vec<f64>) = x
        .into_iter()
        .zip(w)
        .filter(|(_, w)| *w > 0.0)
        .map(|(x, w)| (SQRT_2 * x, w / PI.sqrt()))
        .unzip();
    let mut weights = weights;
    normalize(&mut weights);
    let rule = Arc::new((nodes, weights));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

/// Nodes and weights for `int e^{-x^2} g(x) dx`, ascending.
///
/// Eigenvalues of the Jacobi matrix seed Newton's method on the orthonormal
/// Hermite recurrence; the weights come from the recurrence derivative, which
/// keeps the tiny tail weights accurate in relative terms.
fn hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut x: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    x.sort_by(f64::total_cmp);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut w = vec![0.0; n];
    for (z, w) in x.iter_mut().zip(w.iter_mut()) {
        let mut pp = 0.0;
        for _ in 0..10 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = *z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            *z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        *w = 2.0 / (pp * pp);
    }
    // exact symmetry
    for i in 0..n / 2 {
        let z = 0.5 * (x[n - 1 - i] - x[i]);
        let wi = 0.5 * (w[i] + w[n - 1 - i]);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn normal_moment(k: u32) -> f64 {
        // E Z^k = (k-1)!! for even k
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn hermite_rule_integrates_polynomials_exactly() {
        for &n in &[64, 256, 512] {
            let rule = standard_normal_rule(n);
            let (z, w) = (&rule.0, &rule.1);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for k in 0..=12 {
                let m: f64 = z.iter().zip(w).map(|(z, w)| w * z.powi(k as i32)).sum();
                assert_relative_eq!(m, normal_moment(k), epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn hermite_rule_nodes_are_symmetric_and_sorted() {
        let rule = standard_normal_rule(256);
        let z = &rule.0;
        assert_eq!(z.len(), 256);
        assert!(z.windows(2).all(|p| p[0] < p[1]));
        for i in 0..z.len() {
            assert!((z[i] + z[z.len() - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_expectation_of_smooth_function() {
        // E exp(Z) = e^{1/2}
        let grid = QuadratureGrid::gauss_hermite(0.0, 1.0, 256);
        assert_relative_eq!(grid.expect(f64::exp), 0.5f64.exp(), max_relative = 1e-12);
        let grid = QuadratureGrid::gauss_hermite(1.5, 2.0, 128);
        assert_relative_eq!(grid.expect(|v| v * v), 1.5 * 1.5 + 4.0, max_relative = 1e-12);
    }

    #[test]
    fn tanh_sinh_handles_student_t_tails() {
        let nu = 5.0_f64;
        let c = statrs::function::gamma::ln_gamma((nu + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(nu / 2.0)
            - 0.5 * (nu * PI).ln();
        let density = move |t: f64| (c - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln()).exp();
        let grid = QuadratureGrid::tanh_sinh(density, 0.0, 1.0, 256);
        assert!(grid.node_count() >= MIN_NODES);
        assert!((grid.total_weight() - 1.0).abs() < 1e-12);
        assert_relative_eq!(grid.expect(|v| v * v), nu / (nu - 2.0), max_relative = 1e-8);
    }

    #[test]
    fn quantile_midpoint_has_equal_weights() {
        let grid = QuadratureGrid::quantile_midpoint(|p| p, 100);
        assert_relative_eq!(grid.total_weight(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(grid.expect(|v| v), 0.5, epsilon = 1e-14);
    }
}
