//! Quasi-maximum likelihood fitting of `P(Y = 1 | X) = F(alpha + X'beta)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{Dataset, ModelParams};
use crate::links::LinkFamily;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("theta has {got} slopes, data has {expected} covariates")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no interior maximum: the sample is separated ({detail}); the quasi-likelihood increases without bound")]
    Separation { iterations: usize, detail: String },
    #[error("Hessian is singular: covariates are collinear ({0})")]
    Collinear(String),
    #[error("fit did not converge after {iterations} iterations (gradient sup-norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
}

/// Newton stopping and divergence rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Sup-norm of the gradient at convergence.
    pub grad_tol: f64,
    /// Euclidean norm of the last Newton step at convergence.
    pub step_tol: f64,
    pub max_iter: usize,
    /// `|theta|` beyond which the iterates are declared divergent.
    pub separation_norm: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            step_tol: 1e-10,
            max_iter: 200,
            separation_norm: 1e4,
        }
    }
}

/// Below this gradient sup-norm a step is accepted when it shrinks the
/// gradient even if rounding hides the objective increase.
const ROUNDING_FLOOR: f64 = 1e-7;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    /// `Q_n` at `theta_hat`.
    pub loglik: f64,
    /// Sup-norm of the gradient at `theta_hat`.
    pub gradient_norm: f64,
    #[serde(skip)]
    pub hessian: DMatrix<f64>,
    #[serde(skip)]
    pub sandwich_cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub n: usize,
}

impl FitResult {
    /// Sandwich standard errors of `(alpha, beta')`.
    pub fn se_sandwich(&self) -> Vec<f64> {
        self.sandwich_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// `-A^{-1} / n`, the usual covariance under correct specification.
    pub fn inverse_hessian_cov(&self) -> Result<DMatrix<f64>, FitError> {
        let inv = invert_negative_definite(&self.hessian)?;
        Ok(inv / self.n as f64)
    }
}

fn invert_negative_definite(h: &DMatrix<f64>) -> Result<DMatrix<f64>, FitError> {
    let neg = -h;
    neg.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| FitError::Collinear("negative Hessian is not positive definite".into()))
}

/// `Q_n` and its derivatives at one `theta`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// The (optionally weighted) sample quasi-log-likelihood
/// `(1/n) sum w_i [1{y_i = 1} log F(z_i) + 1{y_i = -1} log(1 - F(z_i))]`.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    data: &'a Dataset,
    link: &'a LinkFamily,
    weights: Option<&'a [f64]>,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a Dataset, link: &'a LinkFamily) -> Self {
        Self {
            data,
            link,
            weights: None,
        }
    }

    pub fn weighted(data: &'a Dataset, link: &'a LinkFamily, weights: &'a [f64]) -> Result<Self, FitError> {
        if weights.len() != data.n() {
            return Err(FitError::InvalidWeights(format!(
                "{} weights for {} observations",
                weights.len(),
                data.n()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(FitError::InvalidWeights(format!("weight {w} is not finite and positive")));
        }
        Ok(Self {
            data,
            link,
            weights: Some(weights),
        })
    }

    fn check(&self, theta: &ModelParams) -> Result<(), FitError> {
        if theta.dim() != self.data.m() {
            return Err(FitError::DimensionMismatch {
                expected: self.data.m(),
                got: theta.dim(),
            });
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn index(&self, theta: &ModelParams, i: usize) -> f64 {
        let x = self.data.x();
        let mut z = theta.alpha;
        for (j, b) in theta.beta.iter().enumerate() {
            z += x[(i, j)] * b;
        }
        z
    }

    pub fn value(&self, theta: &ModelParams) -> Result<f64, FitError> {
        self.check(theta)?;
        // Neumaier compensated sum
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for (i, &y) in self.data.y().iter().enumerate() {
            let z = self.index(theta, i);
            let term = self.weight(i)
                * if y > 0 {
                    self.link.log_cdf(z)
                } else {
                    self.link.log_sf(z)
                };
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        Ok((sum + comp) / self.data.n() as f64)
    }

    pub fn gradient(&self, theta: &ModelParams) -> Result<DVector<f64>, FitError> {
        Ok(self.evaluate(theta)?.gradient)
    }

    pub fn hessian(&self, theta: &ModelParams) -> Result<DMatrix<f64>, FitError> {
        Ok(self.evaluate(theta)?.hessian)
    }

    /// Value, gradient and Hessian in one pass.
    pub fn evaluate(&self, theta: &ModelParams) -> Result<Evaluation, FitError> {
        let value = self.value(theta)?;
        let p = self.data.m() + 1;
        let x = self.data.x();
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        let mut row = vec![1.0; p];
        for (i, &y) in self.data.y().iter().enumerate() {
            for j in 1..p {
                row[j] = x[(i, j - 1)];
            }
            let z = self.index(theta, i);
            let (_, d1, d2) = self.link.loglik_terms(y > 0, z);
            let w = self.weight(i);
            let (d1, d2) = (w * d1, w * d2);
            for a in 0..p {
                grad[a] += d1 * row[a];
                let ra = d2 * row[a];
                for b in a..p {
                    hess[a * p + b] += ra * row[b];
                }
            }
        }
        let n = self.data.n() as f64;
        let gradient = DVector::from_iterator(p, grad.into_iter().map(|g| g / n));
        let hessian = DMatrix::from_fn(p, p, |a, b| hess[a.min(b) * p + a.max(b)] / n);
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }

    /// Per-observation weighted scores `w_i d/dtheta l_i`, one row each.
    pub fn scores(&self, theta: &ModelParams) -> Result<DMatrix<f64>, FitError> {
        self.check(theta)?;
        let p = self.data.m() + 1;
        let x = self.data.x();
        let mut out = DMatrix::zeros(self.data.n(), p);
        for (i, &y) in self.data.y().iter().enumerate() {
            let z = self.index(theta, i);
            let d1 = self.weight(i)
                * if y > 0 {
                    self.link.lplus(z)
                } else {
                    -self.link.lminus(z)
                };
            out[(i, 0)] = d1;
            for j in 1..p {
                out[(i, j)] = d1 * x[(i, j - 1)];
            }
        }
        Ok(out)
    }

    /// `A^{-1} B A^{-1} / n` with `A` the Hessian and `B` the mean outer
    /// product of the per-observation scores. Weights are treated as fixed.
    pub fn sandwich(&self, theta: &ModelParams, hessian: &DMatrix<f64>) -> Result<DMatrix<f64>, FitError> {
        let scores = self.scores(theta)?;
        let n = self.data.n() as f64;
        let b = scores.transpose() * &scores / n;
        let a_inv = invert_negative_definite(hessian)?;
        let cov = &a_inv * b * &a_inv / n;
        Ok((&cov + cov.transpose()) * 0.5)
    }

    /// True when some `theta` gives `y_i z_i > 0` for every observation.
    fn separates(&self, theta: &ModelParams) -> bool {
        self.data
            .y()
            .iter()
            .enumerate()
            .all(|(i, &y)| f64::from(y) * self.index(theta, i) > 0.0)
    }
}

/// `Q_n(theta)`.
pub fn objective(data: &Dataset, link: &LinkFamily, theta: &ModelParams) -> Result<f64, FitError> {
    Objective::new(data, link).value(theta)
}

/// `grad Q_n(theta)`, ordered `(alpha, beta')`.
pub fn gradient(data: &Dataset, link: &LinkFamily, theta: &ModelParams) -> Result<DVector<f64>, FitError> {
    Objective::new(data, link).gradient(theta)
}

pub fn hessian(data: &Dataset, link: &LinkFamily, theta: &ModelParams) -> Result<DMatrix<f64>, FitError> {
    Objective::new(data, link).hessian(theta)
}

/// Maximizes `Q_n` from `init` (default `theta = 0`).
pub fn fit(data: &Dataset, link: &LinkFamily, init: Option<&ModelParams>) -> Result<FitResult, FitError> {
    fit_with(Objective::new(data, link), init, FitOptions::default())
}

/// Maximizes the weighted objective `(1/n) sum w_i l_i(theta)`.
pub fn fit_weighted(
    data: &Dataset,
    link: &LinkFamily,
    weights: &[f64],
    init: Option<&ModelParams>,
) -> Result<FitResult, FitError> {
    fit_with(Objective::weighted(data, link, weights)?, init, FitOptions::default())
}

/// Newton's method with step halving. A step is accepted only if it raises
/// the objective; near the rounding floor, also if it shrinks the gradient.
pub fn fit_with(obj: Objective<'_>, init: Option<&ModelParams>, opts: FitOptions) -> Result<FitResult, FitError> {
    let data = obj.data;
    let m = data.m();
    let mut theta = init.cloned().unwrap_or_else(|| ModelParams::zeros(m));
    obj.check(&theta)?;
    if !data.has_both_classes() {
        return Err(FitError::Separation {
            iterations: 0,
            detail: format!("all {} labels are equal", data.n()),
        });
    }

    let mut eval = obj.evaluate(&theta)?;
    let mut trace = vec![eval.value];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let g_norm = eval.gradient.amax();
        let neg_h = -&eval.hessian;
        let step = match neg_h.cholesky() {
            Some(chol) => chol.solve(&eval.gradient),
            None => {
                if obj.separates(&theta) {
                    return Err(separation(iterations, &theta));
                }
                return Err(FitError::Collinear(format!(
                    "Cholesky of the negative Hessian failed at iteration {iterations}"
                )));
            }
        };
        if g_norm < opts.grad_tol && step.norm() < opts.step_tol {
            converged = true;
            break;
        }

        let current = theta.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = ModelParams::from_vector(&(&current + &step * t));
            let cand = obj.evaluate(&candidate)?;
            let better = cand.value > eval.value
                || (g_norm < ROUNDING_FLOOR && cand.value >= eval.value - 1e-15 && cand.gradient.amax() < g_norm);
            if better {
                accepted = Some((candidate, cand));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some((next, next_eval)) = accepted else {
            // no representable ascent direction left
            converged = g_norm < opts.grad_tol;
            break;
        };
        theta = next;
        eval = next_eval;
        trace.push(eval.value);
        if theta.norm() > opts.separation_norm || obj.separates(&theta) {
            return Err(separation(iterations, &theta));
        }
    }

    let sandwich_cov = obj.sandwich(&theta, &eval.hessian)?;
    Ok(FitResult {
        gradient_norm: eval.gradient.amax(),
        loglik: eval.value,
        theta_hat: theta,
        hessian: eval.hessian,
        sandwich_cov,
        iterations,
        converged,
        objective_trace: trace,
        n: data.n(),
    })
}

fn separation(iterations: usize, theta: &ModelParams) -> FitError {
    FitError::Separation {
        iterations,
        detail: format!("|theta| = {:.3e} after {iterations} Newton steps", theta.norm()),
    }
}

/// `A^{-1} B A^{-1} / n` at `theta_hat`.
pub fn sandwich_covariance(data: &Dataset, link: &LinkFamily, theta_hat: &ModelParams) -> Result<DMatrix<f64>, FitError> {
    let obj = Objective::new(data, link);
    let h = obj.hessian(theta_hat)?;
    obj.sandwich(theta_hat, &h)
}

/// Hypotheses on the slopes that survive the unknown scale `c*`. Indices
/// are 1-based slope positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Hypothesis {
    /// `beta_j = 0`.
    Zero { j: usize },
    /// `beta_j = beta_k`.
    Equal { j: usize, k: usize },
    /// `beta_j = rho * beta_k`.
    Ratio { j: usize, k: usize, rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisResult {
    /// Wald statistic, chi-square with one degree of freedom under the null.
    pub statistic: f64,
    pub p_value: f64,
    pub hypothesis: Hypothesis,
}

fn check_slope(j: usize, m: usize) -> Result<(), FitError> {
    if j == 0 || j > m {
        return Err(FitError::InvalidHypothesis(format!("slope index {j} outside 1..={m}")));
    }
    Ok(())
}

/// Wald test of a linear restriction `r' theta = 0` with the sandwich covariance.
pub fn test_scale_invariant(fit: &FitResult, hypothesis: Hypothesis) -> Result<HypothesisResult, FitError> {
    if !fit.converged {
        return Err(FitError::NotConverged {
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
        });
    }
    let m = fit.theta_hat.dim();
    let mut r = DVector::zeros(m + 1);
    match hypothesis {
        Hypothesis::Zero { j } => {
            check_slope(j, m)?;
            r[j] = 1.0;
        }
        Hypothesis::Equal { j, k } | Hypothesis::Ratio { j, k, .. } => {
            check_slope(j, m)?;
            check_slope(k, m)?;
            if j == k {
                return Err(FitError::InvalidHypothesis(format!("indices must differ, got {j} twice")));
            }
            let rho = match hypothesis {
                Hypothesis::Ratio { rho, .. } => rho,
                _ => 1.0,
            };
            if !rho.is_finite() {
                return Err(FitError::InvalidHypothesis(format!("ratio {rho} is not finite")));
            }
            r[j] = 1.0;
            r[k] = -rho;
        }
    }
    let estimate = r.dot(&fit.theta_hat.to_vector());
    let variance = (r.transpose() * &fit.sandwich_cov * &r)[(0, 0)];
    if !(variance > 0.0) {
        return Err(FitError::Collinear(format!("restriction has variance {variance}")));
    }
    let statistic = estimate * estimate / variance;
    let p_value = libm::erfc((statistic / 2.0).sqrt()).clamp(0.0, 1.0);
    Ok(HypothesisResult {
        statistic,
        p_value,
        hypothesis,
    })
}

/// Delta-method interval for `beta_j / beta_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioInterval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RatioInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

pub fn ratio_confidence_interval(fit: &FitResult, j: usize, k: usize, level: f64) -> Result<RatioInterval, FitError> {
    let m = fit.theta_hat.dim();
    check_slope(j, m)?;
    check_slope(k, m)?;
    if j == k {
        return Err(FitError::InvalidHypothesis("ratio of a slope with itself".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(FitError::InvalidHypothesis(format!("confidence level {level} outside (0, 1)")));
    }
    let (bj, bk) = (fit.theta_hat.beta[j - 1], fit.theta_hat.beta[k - 1]);
    if bk == 0.0 {
        return Err(FitError::InvalidHypothesis("denominator slope estimate is zero".into()));
    }
    let estimate = bj / bk;
    let mut grad = DVector::zeros(m + 1);
    grad[j] = 1.0 / bk;
    grad[k] = -bj / (bk * bk);
    let se = (grad.transpose() * &fit.sandwich_cov * &grad)[(0, 0)].max(0.0).sqrt();
    let z = std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(level);
    Ok(RatioInterval {
        estimate,
        se,
        lower: estimate - z * se,
        upper: estimate + z * se,
    })
}
