//! Population first-order conditions of the restricted quasi-likelihood.
//!
//! Along the ray `theta = c * theta0 + (r, 0')'` the quasi-score collapses,
//! under index dependence and a linear `E(X | V)`, to two moments of the
//! index `V`:
//!
//! ```text
//! phi(c, r) = E[ Pi(V) l+(cV + r) - (1 - Pi(V)) l-(cV + r) ]
//! psi(c, r) = E[ ( ... ) V ]
//! ```
//!
//! with `Pi(v) = P{Y = 1 | V = v}`, `l+ = f/F`, `l- = f/(1-F)`. Both are
//! computed by quadrature over the exact law of `V`.
//!
//! The solver follows the constructive existence argument: for every `c >= 0`
//! `phi(c, .)` is strictly decreasing and has a unique root `r(c)`; the
//! profile `psi(c) = psi(c, r(c))` is positive at `c = 0` and negative for
//! large `c`, so a geometric bracket followed by Brent's method locates `c*`.

mod index_law;
pub mod quadrature;
pub mod roots;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::dgp::{self, Assumption, DgpError, DgpSpec, ModelParams};
use crate::links::LinkFamily;

pub use index_law::IndexLaw;
pub use quadrature::{QuadratureGrid, QuadratureScheme, MIN_NODES};
use roots::{brent, RootOptions};

/// Default node count per Gaussian component.
pub const DEFAULT_NODES: usize = 256;
/// Default tolerance on `|phi|` and `|psi|` at the solution.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Largest `c` tried before declaring that `psi` never turns negative.
pub const C_BRACKET_CAP: f64 = 1_152_921_504_606_846_976.0; // 2^60
const R_BRACKET_CAP: f64 = 1e6;
const BRACKET_WIDTH_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PopulationError {
    #[error("quadrature weights sum to {0}, not 1")]
    GridNotNormalized(f64),
    #[error("quadrature grid has {0} nodes; at least {MIN_NODES} required")]
    TooFewNodes(usize),
    #[error("quadrature grid mean {grid} does not match index law mean {law}")]
    GridLawMismatch { grid: f64, law: f64 },
    #[error("Pi({v}) = {value} is not a probability")]
    InvalidPi { v: f64, value: f64 },
    #[error("non-finite integrand at node v = {v} for (c, r) = ({c}, {r}); link tails failed")]
    NonFiniteIntegrand { c: f64, r: f64, v: f64 },
    #[error("no sign change of phi({c}, r) for |r| <= 1e6: phi has no finite root")]
    Integrability { c: f64 },
    #[error("psi(0) = {psi0} <= 0: requires E(V | U <= V) > E(V | U > V) and P(U <= V) > 0 ({detail})")]
    AssumptionViolation { psi0: f64, detail: String },
    #[error("psi(c) stayed positive up to c = 2^60 ({} evaluations traced)", trace.len())]
    BracketFailure { trace: Vec<PsiTraceRow> },
    #[error("conditional mean has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Dgp(#[from] DgpError),
}

/// `E(X | V = v)` as a function of the index.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConditionalMean {
    /// `E(X | V) = a V + b`.
    Linear { a: Vec<f64>, b: Vec<f64> },
    /// Gaussian mixture: linear within each component, mixed with the
    /// posterior component probabilities given `V = v`.
    NormalMixture { components: Vec<MixtureConditional> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureConditional {
    pub weight: f64,
    pub v_mean: f64,
    pub v_sd: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConditionalMean {
    pub fn dim(&self) -> usize {
        match self {
            ConditionalMean::Linear { a, .. } => a.len(),
            ConditionalMean::NormalMixture { components } => components[0].a.len(),
        }
    }

    pub fn eval(&self, v: f64) -> Vec<f64> {
        match self {
            ConditionalMean::Linear { a, b } => a.iter().zip(b).map(|(a, b)| a * v + b).collect(),
            ConditionalMean::NormalMixture { components } => {
                let dens: Vec<f64> = components
                    .iter()
                    .map(|k| {
                        let z = (v - k.v_mean) / k.v_sd;
                        k.weight * (-0.5 * z * z).exp() / k.v_sd
                    })
                    .collect();
                let total: f64 = dens.iter().sum();
                let mut out = vec![0.0; self.dim()];
                if total > 0.0 {
                    for (k, d) in components.iter().zip(&dens) {
                        for (o, (a, b)) in out.iter_mut().zip(k.a.iter().zip(&k.b)) {
                            *o += d / total * (a * v + b);
                        }
                    }
                } else {
                    // far tail: the component with the heaviest tail dominates
                    let k = components
                        .iter()
                        .max_by(|p, q| {
                            let lp = -0.5 * ((v - p.v_mean) / p.v_sd).powi(2) - p.v_sd.ln() + p.weight.ln();
                            let lq = -0.5 * ((v - q.v_mean) / q.v_sd).powi(2) - q.v_sd.ln() + q.weight.ln();
                            lp.total_cmp(&lq)
                        })
                        .expect("non-empty mixture");
                    for (o, (a, b)) in out.iter_mut().zip(k.a.iter().zip(&k.b)) {
                        *o = a * v + b;
                    }
                }
                out
            }
        }
    }

    /// Least-squares `(a, b)` from simulated draws: each column of `x` is
    /// regressed on `v` with an intercept.
    pub fn from_regression(x: &DMatrix<f64>, v: &[f64]) -> Self {
        let n = v.len() as f64;
        let v_mean = v.iter().sum::<f64>() / n;
        let v_var = v.iter().map(|t| (t - v_mean).powi(2)).sum::<f64>();
        let mut a = Vec::with_capacity(x.ncols());
        let mut b = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let x_mean = col.iter().sum::<f64>() / n;
            let cov: f64 = col.iter().zip(v).map(|(xi, vi)| (xi - x_mean) * (vi - v_mean)).sum();
            let slope = cov / v_var;
            a.push(slope);
            b.push(x_mean - slope * v_mean);
        }
        ConditionalMean::Linear { a, b }
    }
}

/// One evaluation of the profile `psi(c) = psi(c, r(c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiTraceRow {
    pub c: f64,
    pub r: f64,
    /// `r(c) / c`, undefined at `c = 0`.
    pub s: Option<f64>,
    pub psi: f64,
}

impl PsiTraceRow {
    fn new(c: f64, r: f64, psi: f64) -> Self {
        Self {
            c,
            r,
            s: (c > 0.0).then(|| r / c),
            psi,
        }
    }
}

/// Solution of the two-equation restricted first-order condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestrictedRoot {
    pub c_star: f64,
    pub r_star: f64,
    pub phi: f64,
    pub psi: f64,
    pub trace: Vec<PsiTraceRow>,
}

/// Pseudo-true parameter `theta* = (c* alpha0 + r*, c* beta0')'`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoTrue {
    pub c_star: f64,
    pub r_star: f64,
    pub theta_star: ModelParams,
    /// Sup-norm of the full `(m+1)`-dimensional population score at `(c*, r*)`.
    pub residual_full_foc: f64,
    pub phi: f64,
    pub psi: f64,
    pub bracket_history: Vec<PsiTraceRow>,
}

impl PseudoTrue {
    /// Writes the `psi` trace as CSV with header `c,r,s,psi`.
    pub fn psi_trace_csv(&self) -> String {
        let mut out = String::from("c,r,s,psi\n");
        for row in &self.bracket_history {
            let s = row.s.map_or(String::new(), |s| s.to_string());
            out.push_str(&format!("{},{},{},{}\n", row.c, row.r, s, row.psi));
        }
        out
    }
}

/// `Pi`, the index law, and the assumed link, discretized on a quadrature grid.
#[derive(Debug, Clone)]
pub struct PopulationProblem {
    link: LinkFamily,
    grid: QuadratureGrid,
    pi: Vec<f64>,
}

impl PopulationProblem {
    pub fn new(
        pi: impl Fn(f64) -> f64,
        law: &IndexLaw,
        link: LinkFamily,
        grid: QuadratureGrid,
    ) -> Result<Self, PopulationError> {
        if grid.node_count() < MIN_NODES {
            return Err(PopulationError::TooFewNodes(grid.node_count()));
        }
        let total = grid.total_weight();
        if (total - 1.0).abs() > 1e-10 || grid.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(PopulationError::GridNotNormalized(total));
        }
        let grid_mean = grid.expect(|v| v);
        let (law_mean, law_var) = law.moments();
        if (grid_mean - law_mean).abs() > 1e-6 * (1.0 + law_var.sqrt()) {
            return Err(PopulationError::GridLawMismatch {
                grid: grid_mean,
                law: law_mean,
            });
        }
        let pi: Vec<f64> = grid.nodes.iter().map(|&v| pi(v)).collect();
        if let Some((v, value)) = grid
            .nodes
            .iter()
            .zip(&pi)
            .find(|(_, p)| !(**p >= 0.0 && **p <= 1.0))
        {
            return Err(PopulationError::InvalidPi { v: *v, value: *value });
        }
        Ok(Self { link, grid, pi })
    }

    /// Problem for a data-generating spec: exact index law, its default grid
    /// with `nodes` points per Gaussian component, and `Pi` from the error model.
    pub fn from_spec(spec: &DgpSpec, link: LinkFamily, nodes: usize) -> Result<Self, PopulationError> {
        let law = dgp::index_distribution(spec)?;
        let pi = dgp::pi_function(spec)?;
        let grid = law.default_grid(nodes);
        Self::new(|v| pi.eval(v), &law, link, grid)
    }

    pub fn link(&self) -> &LinkFamily {
        &self.link
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// Quasi-score residual at a node, `Pi l+(z) - (1 - Pi) l-(z)`.
    #[inline]
    fn integrand(&self, i: usize, c: f64, r: f64) -> Result<f64, PopulationError> {
        let v = self.grid.nodes[i];
        let z = c * v + r;
        let p = self.pi[i];
        let g = p * self.link.lplus(z) - (1.0 - p) * self.link.lminus(z);
        if g.is_finite() {
            Ok(g)
        } else {
            Err(PopulationError::NonFiniteIntegrand { c, r, v })
        }
    }

    /// `(phi(c, r), psi(c, r))` in one pass.
    pub fn phi_psi(&self, c: f64, r: f64) -> Result<(f64, f64), PopulationError> {
        let mut phi = 0.0;
        let mut psi = 0.0;
        for i in 0..self.grid.nodes.len() {
            let g = self.integrand(i, c, r)?;
            let w = self.grid.weights[i];
            phi += w * g;
            psi += w * g * self.grid.nodes[i];
        }
        Ok((phi, psi))
    }

    pub fn phi(&self, c: f64, r: f64) -> Result<f64, PopulationError> {
        let mut phi = 0.0;
        for i in 0..self.grid.nodes.len() {
            phi += self.grid.weights[i] * self.integrand(i, c, r)?;
        }
        Ok(phi)
    }

    pub fn psi(&self, c: f64, r: f64) -> Result<f64, PopulationError> {
        Ok(self.phi_psi(c, r)?.1)
    }

    /// The unique `r(c)` with `phi(c, r(c)) = 0`.
    ///
    /// Expands `[-2^k, 2^k]` until `phi` changes sign, then runs Brent's
    /// method to `|phi| < tol`.
    pub fn solve_r_given_c(&self, c: f64, tol: f64) -> Result<f64, PopulationError> {
        let mut lo = -1.0;
        let mut f_lo = self.phi(c, lo)?;
        while f_lo <= 0.0 {
            lo *= 2.0;
            if lo < -R_BRACKET_CAP {
                return Err(PopulationError::Integrability { c });
            }
            f_lo = self.phi(c, lo)?;
        }
        let mut hi = 1.0;
        let mut f_hi = self.phi(c, hi)?;
        while f_hi >= 0.0 {
            hi *= 2.0;
            if hi > R_BRACKET_CAP {
                return Err(PopulationError::Integrability { c });
            }
            f_hi = self.phi(c, hi)?;
        }
        // shrink to the tighter of the two one-sided brackets
        if lo < -1.0 {
            let inner = lo / 2.0;
            let f_inner = self.phi(c, inner)?;
            if f_inner < 0.0 {
                hi = inner;
                f_hi = f_inner;
            }
        }
        if hi > 1.0 {
            let inner = hi / 2.0;
            let f_inner = self.phi(c, inner)?;
            if f_inner > 0.0 {
                lo = inner;
                f_lo = f_inner;
            }
        }
        let opts = RootOptions {
            f_tol: tol,
            x_tol: 1e-14,
            max_iter: 300,
        };
        Ok(brent(|r| self.phi(c, r), lo, hi, f_lo, f_hi, opts)?.x)
    }

    /// Evaluates the profile `psi(c) = psi(c, r(c))`.
    pub fn psi_profile(&self, c: f64, tol: f64) -> Result<PsiTraceRow, PopulationError> {
        // the inner root is solved tighter so that psi(c) is smooth at the outer tolerance
        let r = self.solve_r_given_c(c, tol * 1e-2)?;
        Ok(PsiTraceRow::new(c, r, self.psi(c, r)?))
    }

    /// Profile `psi(c)` over a list of `c` values.
    pub fn psi_curve(&self, cs: &[f64], tol: f64) -> Result<Vec<PsiTraceRow>, PopulationError> {
        cs.iter().map(|&c| self.psi_profile(c, tol)).collect()
    }

    /// Solves `phi = psi = 0` with `c* > 0`.
    pub fn solve_restricted(&self, tol: f64) -> Result<RestrictedRoot, PopulationError> {
        let mut trace = Vec::new();
        let start = self.psi_profile(0.0, tol)?;
        trace.push(start);
        if !(start.psi > 0.0) {
            return Err(PopulationError::AssumptionViolation {
                psi0: start.psi,
                detail: format!("r(0) = {}", start.r),
            });
        }

        let mut lower = start;
        let mut c = 1.0;
        let upper = loop {
            let row = self.psi_profile(c, tol)?;
            trace.push(row);
            if row.psi < 0.0 {
                break row;
            }
            // an exact zero is almost always underflow of a perfectly separated
            // integrand; keep expanding and let a genuine sign change decide
            if row.psi > 0.0 {
                lower = row;
            }
            c *= 2.0;
            if c > C_BRACKET_CAP {
                return Err(PopulationError::BracketFailure { trace });
            }
        };

        let opts = RootOptions {
            f_tol: tol,
            x_tol: BRACKET_WIDTH_TOL,
            max_iter: 200,
        };
        let root = brent(
            |c| {
                let row = self.psi_profile(c, tol)?;
                trace.push(row);
                Ok::<_, PopulationError>(row.psi)
            },
            lower.c,
            upper.c,
            lower.psi,
            upper.psi,
            opts,
        )?;
        let row = self.psi_profile(root.x, tol)?;
        self.finish(row, trace)
    }

    fn finish(&self, row: PsiTraceRow, trace: Vec<PsiTraceRow>) -> Result<RestrictedRoot, PopulationError> {
        let (phi, psi) = self.phi_psi(row.c, row.r)?;
        Ok(RestrictedRoot {
            c_star: row.c,
            r_star: row.r,
            phi,
            psi,
            trace,
        })
    }

    /// Solves the restricted problem and maps it back to `theta*`.
    pub fn solve_pseudo_true(
        &self,
        theta0: &ModelParams,
        cond_mean: &ConditionalMean,
        tol: f64,
    ) -> Result<PseudoTrue, PopulationError> {
        let root = self.solve_restricted(tol)?;
        let residual_full_foc = self.full_foc_residual(root.c_star, root.r_star, cond_mean)?;
        Ok(PseudoTrue {
            c_star: root.c_star,
            r_star: root.r_star,
            theta_star: ModelParams::new(
                root.c_star * theta0.alpha + root.r_star,
                theta0.beta.iter().map(|b| root.c_star * b).collect(),
            ),
            residual_full_foc,
            phi: root.phi,
            psi: root.psi,
            bracket_history: root.trace,
        })
    }

    /// The `(m+1)`-vector `E[ (Pi l+ - (1-Pi) l-)(cV + r) (1, E(X|V)')' ]`.
    pub fn full_foc(&self, c: f64, r: f64, cond_mean: &ConditionalMean) -> Result<Vec<f64>, PopulationError> {
        let m = cond_mean.dim();
        let mut out = vec![0.0; m + 1];
        for i in 0..self.grid.nodes.len() {
            let g = self.weight_integrand(i, c, r)?;
            out[0] += g;
            for (o, x) in out[1..].iter_mut().zip(cond_mean.eval(self.grid.nodes[i])) {
                *o += g * x;
            }
        }
        Ok(out)
    }

    #[inline]
    fn weight_integrand(&self, i: usize, c: f64, r: f64) -> Result<f64, PopulationError> {
        Ok(self.grid.weights[i] * self.integrand(i, c, r)?)
    }

    /// Sup-norm of [`PopulationProblem::full_foc`].
    pub fn full_foc_residual(&self, c: f64, r: f64, cond_mean: &ConditionalMean) -> Result<f64, PopulationError> {
        Ok(self
            .full_foc(c, r, cond_mean)?
            .into_iter()
            .fold(0.0, |acc, x| acc.max(x.abs())))
    }

    /// `E[ Pi log F(cV + r) + (1 - Pi) log(1 - F(cV + r)) ]`.
    pub fn restricted_population_loglik(&self, c: f64, r: f64) -> Result<f64, PopulationError> {
        let mut total = 0.0;
        for (i, (&v, &w)) in self.grid.nodes.iter().zip(&self.grid.weights).enumerate() {
            let z = c * v + r;
            let p = self.pi[i];
            let term = p * self.link.log_cdf(z) + (1.0 - p) * self.link.log_sf(z);
            if !term.is_finite() {
                return Err(PopulationError::NonFiniteIntegrand { c, r, v });
            }
            total += w * term;
        }
        Ok(total)
    }
}

/// Pseudo-true value for a data-generating spec with the closed-form
/// conditional mean of its covariate law.
pub fn pseudo_true(spec: &DgpSpec, link: &LinkFamily, nodes: usize) -> Result<PseudoTrue, PopulationError> {
    if !spec.satisfies(Assumption::IndexDependence) {
        // the score's X-part no longer factors through E(X | V)
        return Err(PopulationError::Dgp(DgpError::UnsupportedAnalysis(
            "errors depend on X beyond the index; only the restricted problem is available".into(),
        )));
    }
    let problem = PopulationProblem::from_spec(spec, link.clone(), nodes)?;
    let cond_mean = dgp::conditional_mean(spec)?;
    if cond_mean.dim() != spec.theta0().dim() {
        return Err(PopulationError::DimensionMismatch {
            expected: spec.theta0().dim(),
            got: cond_mean.dim(),
        });
    }
    problem.solve_pseudo_true(spec.theta0(), &cond_mean, DEFAULT_TOL)
}
