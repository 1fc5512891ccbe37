use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use super::quadrature::{QuadratureGrid, QuadratureScheme};
use super::roots::{brent, RootOptions};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Exact one-dimensional law of the index `V = alpha0 + X'beta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IndexLaw {
    Normal { mean: f64, sd: f64 },
    /// `location + scale * T` with `T` Student-t on `dof` degrees of freedom.
    StudentT { location: f64, scale: f64, dof: f64 },
    NormalMixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        sds: Vec<f64>,
    },
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

fn normal_log_density(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

impl IndexLaw {
    pub fn density(&self, v: f64) -> f64 {
        match self {
            IndexLaw::Normal { mean, sd } => normal_log_density((v - mean) / sd).exp() / sd,
            IndexLaw::StudentT { location, scale, dof } => {
                let t = (v - location) / scale;
                let log_c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * PI).ln();
                (log_c - (dof + 1.0) / 2.0 * (t * t / dof).ln_1p()).exp() / scale
            }
            IndexLaw::NormalMixture { weights, means, sds } => weights
                .iter()
                .zip(means)
                .zip(sds)
                .map(|((w, m), s)| w * normal_log_density((v - m) / s).exp() / s)
                .sum(),
        }
    }

    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            IndexLaw::Normal { mean, sd } => normal_cdf((v - mean) / sd),
            IndexLaw::StudentT { location, scale, dof } => StudentsT::new(*location, *scale, *dof)
                .expect("validated t parameters")
                .cdf(v),
            IndexLaw::NormalMixture { weights, means, sds } => weights
                .iter()
                .zip(means)
                .zip(sds)
                .map(|((w, m), s)| w * normal_cdf((v - m) / s))
                .sum(),
        }
    }

    /// Inverse CDF on `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        assert!(p > 0.0 && p < 1.0, "quantile level {p} outside (0, 1)");
        match self {
            IndexLaw::Normal { mean, sd } => {
                mean - sd * std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
            }
            IndexLaw::StudentT { location, scale, dof } => StudentsT::new(*location, *scale, *dof)
                .expect("validated t parameters")
                .inverse_cdf(p),
            IndexLaw::NormalMixture { means, sds, .. } => {
                let lo = means.iter().zip(sds).map(|(m, s)| m - 40.0 * s).fold(f64::INFINITY, f64::min);
                let hi = means.iter().zip(sds).map(|(m, s)| m + 40.0 * s).fold(f64::NEG_INFINITY, f64::max);
                let f = |v: f64| Ok::<_, std::convert::Infallible>(self.cdf(v) - p);
                let opts = RootOptions {
                    f_tol: 1e-15,
                    x_tol: 1e-13,
                    max_iter: 300,
                };
                match brent(f, lo, hi, -p, 1.0 - p, opts) {
                    Ok(root) => root.x,
                    Err(never) => match never {},
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            IndexLaw::Normal { mean, .. } => *mean,
            IndexLaw::StudentT { location, .. } => *location,
            IndexLaw::NormalMixture { weights, means, .. } => {
                weights.iter().zip(means).map(|(w, m)| w * m).sum()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            IndexLaw::Normal { sd, .. } => sd * sd,
            IndexLaw::StudentT { scale, dof, .. } => {
                if *dof > 2.0 {
                    scale * scale * dof / (dof - 2.0)
                } else {
                    f64::INFINITY
                }
            }
            IndexLaw::NormalMixture { weights, means, sds } => {
                let mu = self.mean();
                weights
                    .iter()
                    .zip(means)
                    .zip(sds)
                    .map(|((w, m), s)| w * (s * s + (m - mu) * (m - mu)))
                    .sum()
            }
        }
    }

    pub fn moments(&self) -> (f64, f64) {
        (self.mean(), self.variance())
    }

    /// Default rule: Gauss-Hermite for Gaussian laws and mixtures, the
    /// double-exponential rule for Student-t.
    pub fn default_grid(&self, nodes: usize) -> QuadratureGrid {
        match self {
            IndexLaw::StudentT { .. } => self.grid(QuadratureScheme::TanhSinh, nodes),
            _ => self.grid(QuadratureScheme::GaussHermite, nodes),
        }
    }

    /// Builds a grid with the requested scheme. Gauss-Hermite on a t law
    /// falls back to the double-exponential rule.
    pub fn grid(&self, scheme: QuadratureScheme, nodes: usize) -> QuadratureGrid {
        match (scheme, self) {
            (QuadratureScheme::QuantileMidpoint, _) => {
                QuadratureGrid::quantile_midpoint(|p| self.quantile(p), nodes)
            }
            (QuadratureScheme::GaussHermite, IndexLaw::Normal { mean, sd }) => {
                QuadratureGrid::gauss_hermite(*mean, *sd, nodes)
            }
            (QuadratureScheme::GaussHermite, IndexLaw::NormalMixture { weights, means, sds }) => {
                QuadratureGrid::mixture(
                    weights
                        .iter()
                        .zip(means)
                        .zip(sds)
                        .map(|((w, m), s)| (*w, QuadratureGrid::gauss_hermite(*m, *s, nodes)))
                        .collect(),
                )
            }
            (_, IndexLaw::StudentT { location, scale, .. }) => {
                QuadratureGrid::tanh_sinh(|v| self.density(v), *location, *scale, nodes)
            }
            (QuadratureScheme::TanhSinh, _) => {
                let sd = self.variance().sqrt();
                QuadratureGrid::tanh_sinh(|v| self.density(v), self.mean(), sd, nodes)
            }
        }
    }
}
