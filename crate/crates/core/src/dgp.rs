//! Data-generating processes for `Y = sgn(alpha0 + X'beta0 - U)`.
//!
//! A [`DgpSpec`] pairs a covariate law with an error law and records which
//! identification and slope-consistency assumptions the pair satisfies. The
//! flags are derived from the components and, when a config declares them,
//! checked against that declaration.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::population::{ConditionalMean, IndexLaw, MixtureConditional};

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("invalid data-generating spec: {0}")]
    InvalidSpec(String),
    #[error("declared assumptions {declared:?} do not match the components, which satisfy {derived:?}")]
    AssumptionMismatch {
        declared: BTreeSet<Assumption>,
        derived: BTreeSet<Assumption>,
    },
    #[error("unsupported analysis: {0}")]
    UnsupportedAnalysis(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// `PopulationError` derives `Clone + PartialEq`; io and csv errors are neither.
impl Clone for DgpError {
    fn clone(&self) -> Self {
        match self {
            DgpError::InvalidSpec(s) => DgpError::InvalidSpec(s.clone()),
            DgpError::AssumptionMismatch { declared, derived } => DgpError::AssumptionMismatch {
                declared: declared.clone(),
                derived: derived.clone(),
            },
            DgpError::UnsupportedAnalysis(s) => DgpError::UnsupportedAnalysis(s.clone()),
            DgpError::InvalidDataset(s) => DgpError::InvalidDataset(s.clone()),
            other => DgpError::InvalidDataset(other.to_string()),
        }
    }
}

impl PartialEq for DgpError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

/// Assumptions a data-generating process may satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumption {
    /// `med(U | X) = 0`.
    MedianZero,
    /// Nonzero slope on a continuously distributed covariate, `0 < P(Y=1|X) < 1`,
    /// and full-rank support.
    Identification,
    /// `L(U | X) = L(U | V)`.
    IndexDependence,
    /// `E(X | V) = aV + b`.
    LinearConditionalMean,
}

impl Assumption {
    pub fn all() -> BTreeSet<Assumption> {
        [
            Assumption::MedianZero,
            Assumption::Identification,
            Assumption::IndexDependence,
            Assumption::LinearConditionalMean,
        ]
        .into_iter()
        .collect()
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assumption::MedianZero => "median-zero",
            Assumption::Identification => "identification",
            Assumption::IndexDependence => "index-dependence",
            Assumption::LinearConditionalMean => "linear-conditional-mean",
        })
    }
}

/// `theta = (alpha, beta')'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl ModelParams {
    pub fn new(alpha: f64, beta: Vec<f64>) -> Self {
        Self { alpha, beta }
    }

    pub fn zeros(m: usize) -> Self {
        Self::new(0.0, vec![0.0; m])
    }

    /// Number of slopes `m`.
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Stacked `(alpha, beta')'`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim() + 1, std::iter::once(self.alpha).chain(self.beta.iter().copied()))
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self::new(v[0], v.iter().skip(1).copied().collect())
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn beta_norm(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    /// Cosine between the slope vectors of `self` and `other`.
    pub fn slope_cosine(&self, other: &ModelParams) -> f64 {
        let dot: f64 = self.beta.iter().zip(&other.beta).map(|(a, b)| a * b).sum();
        dot / (self.beta_norm() * other.beta_norm())
    }
}

fn one() -> f64 {
    1.0
}

/// Median-zero error distribution `epsilon`, optionally scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseError {
    Logistic {
        #[serde(default = "one")]
        scale: f64,
    },
    Normal {
        #[serde(default = "one")]
        scale: f64,
    },
    StudentT {
        dof: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Density has a kink at zero, so quadrature in node count converges
    /// more slowly than for the smooth laws.
    Laplace {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Point mass at zero. Test stub only: violates `0 < P(Y=1|X) < 1`.
    Degenerate,
}

impl BaseError {
    fn validate(&self) -> Result<(), DgpError> {
        let scale = match self {
            BaseError::Degenerate => return Ok(()),
            BaseError::StudentT { dof, scale } => {
                if !(*dof > 0.0 && dof.is_finite()) {
                    return Err(DgpError::InvalidSpec(format!("error dof must be positive, got {dof}")));
                }
                *scale
            }
            BaseError::Logistic { scale } | BaseError::Normal { scale } | BaseError::Laplace { scale } => *scale,
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DgpError::InvalidSpec(format!("error scale must be positive, got {scale}")));
        }
        Ok(())
    }

    pub fn cdf(&self, u: f64) -> f64 {
        match self {
            BaseError::Logistic { scale } => {
                let t = u / scale;
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }
            BaseError::Normal { scale } => 0.5 * libm::erfc(-u / scale * std::f64::consts::FRAC_1_SQRT_2),
            BaseError::StudentT { dof, scale } => StudentsT::new(0.0, *scale, *dof)
                .expect("validated t parameters")
                .cdf(u),
            BaseError::Laplace { scale } => {
                let t = u / scale;
                if t < 0.0 {
                    0.5 * t.exp()
                } else {
                    1.0 - 0.5 * (-t).exp()
                }
            }
            BaseError::Degenerate => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            BaseError::Logistic { scale } => {
                let u: f64 = rng.sample(Open01);
                scale * (u / (1.0 - u)).ln()
            }
            BaseError::Normal { scale } => {
                let z: f64 = rng.sample(StandardNormal);
                scale * z
            }
            BaseError::StudentT { dof, scale } => {
                scale * StudentT::new(*dof).expect("validated t parameters").sample(rng)
            }
            BaseError::Laplace { scale } => {
                let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            BaseError::Degenerate => 0.0,
        }
    }
}

/// Strictly positive scale function `sigma(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScaleFn {
    Constant { value: f64 },
    /// `intercept + curvature * t^2`.
    Quadratic { intercept: f64, curvature: f64 },
    /// `exp(rate * t)`.
    Exponential { rate: f64 },
}

impl ScaleFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScaleFn::Constant { value } => *value,
            ScaleFn::Quadratic { intercept, curvature } => intercept + curvature * t * t,
            ScaleFn::Exponential { rate } => (rate * t).exp(),
        }
    }

    fn validate(&self) -> Result<(), DgpError> {
        let ok = match self {
            ScaleFn::Constant { value } => *value > 0.0 && value.is_finite(),
            ScaleFn::Quadratic { intercept, curvature } => {
                *intercept > 0.0 && *curvature >= 0.0 && intercept.is_finite() && curvature.is_finite()
            }
            ScaleFn::Exponential { rate } => rate.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(DgpError::InvalidSpec(format!("scale function {self:?} is not strictly positive")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ErrorModel {
    /// `U = epsilon`, independent of `X`.
    Independent { base: BaseError },
    /// `U = sigma(V) * epsilon` with `epsilon` independent of `X`.
    IndexHeteroskedastic { base: BaseError, scale_fn: ScaleFn },
    /// `U = sigma(X_j) * epsilon`; the error law depends on `X` beyond the
    /// index. `covariate` is 1-based.
    CovariateHeteroskedastic {
        base: BaseError,
        scale_fn: ScaleFn,
        covariate: usize,
    },
}

impl ErrorModel {
    pub fn base(&self) -> &BaseError {
        match self {
            ErrorModel::Independent { base }
            | ErrorModel::IndexHeteroskedastic { base, .. }
            | ErrorModel::CovariateHeteroskedastic { base, .. } => base,
        }
    }
}

/// `P{U <= v | V = v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiFunction {
    base: BaseError,
    scale_fn: Option<ScaleFn>,
    mixing: Option<CovariateMixing>,
}

/// Gaussian law of the scale covariate given the index:
/// `X_j | V = v ~ N(slope v + intercept, sd^2)`.
#[derive(Debug, Clone, PartialEq)]
struct CovariateMixing {
    slope: f64,
    intercept: f64,
    sd: f64,
}

/// Gauss-Hermite points for averaging over `X_j | V`.
const MIXING_NODES: usize = 48;

impl PiFunction {
    pub fn eval(&self, v: f64) -> f64 {
        let scale_fn = self.scale_fn.as_ref();
        match &self.mixing {
            None => {
                let sigma = scale_fn.map_or(1.0, |s| s.eval(v));
                self.base.cdf(v / sigma)
            }
            Some(mix) => {
                let scale_fn = scale_fn.expect("mixing implies a scale function");
                let rule = crate::population::quadrature::standard_normal_rule(MIXING_NODES);
                let centre = mix.slope * v + mix.intercept;
                rule.0
                    .iter()
                    .zip(&rule.1)
                    .map(|(z, w)| w * self.base.cdf(v / scale_fn.eval(centre + mix.sd * z)))
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<Vec<f64>>,
}

/// Covariates from user code.
pub trait CovariateSampler: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    /// Exact law of `alpha0 + X'beta0`, when known.
    fn index_law(&self, _theta0: &ModelParams) -> Option<IndexLaw> {
        None
    }
    fn conditional_mean(&self, _theta0: &ModelParams) -> Option<ConditionalMean> {
        None
    }
    fn satisfies_linearity(&self) -> bool {
        false
    }
    /// Continuous, full-rank support (the identification conditions on `X`).
    fn identifying_support(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct CustomCovariates(pub Arc<dyn CovariateSampler>);

impl PartialEq for CustomCovariates {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateModel {
    Normal {
        mean: Vec<f64>,
        scale: Vec<Vec<f64>>,
    },
    /// Multivariate t: `mean + L z sqrt(dof / w)`, `w ~ chi^2(dof)`, `L L' = scale`.
    StudentT {
        mean: Vec<f64>,
        scale: Vec<Vec<f64>>,
        dof: f64,
    },
    /// Gaussian mixture. Not elliptical in general; the documented
    /// counter-example to a linear conditional mean.
    NormalMixture { components: Vec<MixtureComponent> },
    #[serde(skip)]
    Custom(CustomCovariates),
}

impl CovariateModel {
    /// Two-dimensional reference mixture whose `E(X | beta'X)` is not linear
    /// for slopes like `(1, 1)`:
    /// `0.7 N((-0.6, 0.3), 1.6 I) + 0.3 N((1.4, -0.7), 0.3 I)`.
    ///
    /// The broad component covers `N(0, I)` with room to spare, so
    /// density-ratio weights towards a standard normal stay bounded.
    pub fn skewed_mixture() -> Self {
        let diag = |v: f64| vec![vec![v, 0.0], vec![0.0, v]];
        CovariateModel::NormalMixture {
            components: vec![
                MixtureComponent {
                    weight: 0.7,
                    mean: vec![-0.6, 0.3],
                    scale: diag(1.6),
                },
                MixtureComponent {
                    weight: 0.3,
                    mean: vec![1.4, -0.7],
                    scale: diag(0.3),
                },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateModel::Normal { mean, .. } | CovariateModel::StudentT { mean, .. } => mean.len(),
            CovariateModel::NormalMixture { components } => components.first().map_or(0, |c| c.mean.len()),
            CovariateModel::Custom(c) => c.0.dim(),
        }
    }

    pub fn is_elliptical(&self) -> bool {
        match self {
            CovariateModel::Normal { .. } | CovariateModel::StudentT { .. } => true,
            CovariateModel::NormalMixture { components } => components.len() == 1,
            CovariateModel::Custom(_) => false,
        }
    }

    pub fn satisfies_linearity(&self) -> bool {
        match self {
            CovariateModel::Custom(c) => c.0.satisfies_linearity(),
            other => other.is_elliptical(),
        }
    }
}

fn to_matrix(rows: &[Vec<f64>], m: usize, what: &str) -> Result<DMatrix<f64>, DgpError> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(DgpError::InvalidSpec(format!("{what} must be {m}x{m}")));
    }
    let mat = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(DgpError::InvalidSpec(format!("{what} has non-finite entries")));
    }
    if (&mat - mat.transpose()).abs().max() > 1e-12 * (1.0 + mat.abs().max()) {
        return Err(DgpError::InvalidSpec(format!("{what} is not symmetric")));
    }
    Ok(mat)
}

fn cholesky(mat: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, DgpError> {
    mat.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| DgpError::InvalidSpec(format!("{what} is not positive definite")))
}

/// Lower Cholesky factors, computed once at construction.
#[derive(Debug, Clone, PartialEq)]
struct Prepared {
    factors: Vec<DMatrix<f64>>,
    cumulative_weights: Vec<f64>,
}

/// Raw config form of [`DgpSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DgpSpecConfig {
    theta0: ModelParams,
    covariates: CovariateModel,
    errors: ErrorModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assumptions: Option<BTreeSet<Assumption>>,
}

/// Covariate law, error law and true parameter of a binary choice model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DgpSpecConfig", into = "DgpSpecConfig")]
pub struct DgpSpec {
    covariates: CovariateModel,
    errors: ErrorModel,
    theta0: ModelParams,
    assumptions: BTreeSet<Assumption>,
    prepared: Prepared,
}

impl TryFrom<DgpSpecConfig> for DgpSpec {
    type Error = DgpError;

    fn try_from(cfg: DgpSpecConfig) -> Result<Self, DgpError> {
        let spec = DgpSpec::new(cfg.covariates, cfg.errors, cfg.theta0)?;
        if let Some(declared) = cfg.assumptions {
            if declared != spec.assumptions {
                return Err(DgpError::AssumptionMismatch {
                    declared,
                    derived: spec.assumptions,
                });
            }
        }
        Ok(spec)
    }
}

impl From<DgpSpec> for DgpSpecConfig {
    fn from(spec: DgpSpec) -> Self {
        DgpSpecConfig {
            theta0: spec.theta0,
            covariates: spec.covariates,
            errors: spec.errors,
            assumptions: Some(spec.assumptions),
        }
    }
}

impl DgpSpec {
    pub fn new(covariates: CovariateModel, errors: ErrorModel, theta0: ModelParams) -> Result<Self, DgpError> {
        let m = theta0.dim();
        if m == 0 {
            return Err(DgpError::InvalidSpec("beta0 must have at least one entry".into()));
        }
        if !theta0.alpha.is_finite() || theta0.beta.iter().any(|b| !b.is_finite()) {
            return Err(DgpError::InvalidSpec("theta0 has non-finite entries".into()));
        }
        if theta0.beta.iter().all(|b| *b == 0.0) {
            return Err(DgpError::InvalidSpec("beta0 must have a nonzero entry".into()));
        }
        if covariates.dim() != m {
            return Err(DgpError::InvalidSpec(format!(
                "covariates have dimension {}, theta0 has {m} slopes",
                covariates.dim()
            )));
        }
        let prepared = match &covariates {
            CovariateModel::Normal { mean, scale } | CovariateModel::StudentT { mean, scale, .. } => {
                if mean.iter().any(|v| !v.is_finite()) {
                    return Err(DgpError::InvalidSpec("covariate mean has non-finite entries".into()));
                }
                if let CovariateModel::StudentT { dof, .. } = &covariates {
                    if !(*dof > 2.0) {
                        return Err(DgpError::InvalidSpec(format!(
                            "covariate dof must exceed 2 for finite second moments, got {dof}"
                        )));
                    }
                }
                Prepared {
                    factors: vec![cholesky(to_matrix(scale, m, "covariate scale")?, "covariate scale")?],
                    cumulative_weights: vec![1.0],
                }
            }
            CovariateModel::NormalMixture { components } => {
                if components.is_empty() {
                    return Err(DgpError::InvalidSpec("mixture needs at least one component".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(DgpError::InvalidSpec("mixture weights must be positive and sum to 1".into()));
                }
                let mut factors = Vec::new();
                let mut cumulative_weights = Vec::new();
                let mut acc = 0.0;
                for (k, c) in components.iter().enumerate() {
                    if c.mean.len() != m {
                        return Err(DgpError::InvalidSpec(format!("mixture component {k} has wrong dimension")));
                    }
                    let what = format!("mixture component {k} scale");
                    factors.push(cholesky(to_matrix(&c.scale, m, &what)?, &what)?);
                    acc += c.weight / total;
                    cumulative_weights.push(acc);
                }
                Prepared {
                    factors,
                    cumulative_weights,
                }
            }
            CovariateModel::Custom(_) => Prepared {
                factors: Vec::new(),
                cumulative_weights: Vec::new(),
            },
        };
        match &errors {
            ErrorModel::Independent { base } => base.validate()?,
            ErrorModel::IndexHeteroskedastic { base, scale_fn } => {
                base.validate()?;
                scale_fn.validate()?;
            }
            ErrorModel::CovariateHeteroskedastic {
                base,
                scale_fn,
                covariate,
            } => {
                base.validate()?;
                scale_fn.validate()?;
                if *covariate == 0 || *covariate > m {
                    return Err(DgpError::InvalidSpec(format!(
                        "heteroskedastic covariate index {covariate} outside 1..={m}"
                    )));
                }
            }
        }
        let assumptions = derive_assumptions(&covariates, &errors);
        Ok(Self {
            covariates,
            errors,
            theta0,
            assumptions,
            prepared,
        })
    }

    pub fn covariates(&self) -> &CovariateModel {
        &self.covariates
    }

    pub fn errors(&self) -> &ErrorModel {
        &self.errors
    }

    pub fn theta0(&self) -> &ModelParams {
        &self.theta0
    }

    pub fn assumptions(&self) -> &BTreeSet<Assumption> {
        &self.assumptions
    }

    pub fn satisfies(&self, a: Assumption) -> bool {
        self.assumptions.contains(&a)
    }

    /// All four assumptions behind slope consistency hold.
    pub fn slope_consistency_guaranteed(&self) -> bool {
        self.assumptions == Assumption::all()
    }

    pub fn dim(&self) -> usize {
        self.theta0.dim()
    }

    /// Same spec with `theta0` replaced.
    pub fn with_theta0(&self, theta0: ModelParams) -> Result<Self, DgpError> {
        Self::new(self.covariates.clone(), self.errors.clone(), theta0)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DgpError> {
        toml::from_str(text).map_err(|e| DgpError::InvalidSpec(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, DgpError> {
        toml::to_string(self).map_err(|e| DgpError::InvalidSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DgpError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DgpError::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn sample_covariates<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let m = out.len();
        match &self.covariates {
            CovariateModel::Normal { mean, .. } => {
                let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                affine(&self.prepared.factors[0], mean, &z, 1.0, out);
            }
            CovariateModel::StudentT { mean, dof, .. } => {
                let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                let w: f64 = ChiSquared::new(*dof).expect("validated dof").sample(rng);
                affine(&self.prepared.factors[0], mean, &z, (dof / w).sqrt(), out);
            }
            CovariateModel::NormalMixture { components } => {
                let u: f64 = rng.random();
                let k = self
                    .prepared
                    .cumulative_weights
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(components.len() - 1);
                let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                affine(&self.prepared.factors[k], &components[k].mean, &z, 1.0, out);
            }
            CovariateModel::Custom(c) => c.0.sample_into(rng, out),
        }
    }
}

fn affine(factor: &DMatrix<f64>, mean: &[f64], z: &[f64], mult: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, zj) in z.iter().enumerate().take(i + 1) {
            acc += factor[(i, j)] * zj;
        }
        *o = mean[i] + mult * acc;
    }
}

fn derive_assumptions(covariates: &CovariateModel, errors: &ErrorModel) -> BTreeSet<Assumption> {
    let mut set = BTreeSet::new();
    // every base error is symmetric about zero
    set.insert(Assumption::MedianZero);
    let continuous_support = match covariates {
        CovariateModel::Custom(c) => c.0.identifying_support(),
        _ => true,
    };
    if continuous_support && !matches!(errors.base(), BaseError::Degenerate) {
        set.insert(Assumption::Identification);
    }
    if !matches!(errors, ErrorModel::CovariateHeteroskedastic { .. }) {
        set.insert(Assumption::IndexDependence);
    }
    if covariates.satisfies_linearity() {
        set.insert(Assumption::LinearConditionalMean);
    }
    set
}

fn quad_form(scale: &[Vec<f64>], beta: &[f64]) -> f64 {
    scale
        .iter()
        .zip(beta)
        .map(|(row, bi)| bi * row.iter().zip(beta).map(|(s, bj)| s * bj).sum::<f64>())
        .sum()
}

fn mat_vec(scale: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    scale
        .iter()
        .map(|row| row.iter().zip(beta).map(|(s, b)| s * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact law of `V = alpha0 + X'beta0`.
pub fn index_distribution(spec: &DgpSpec) -> Result<IndexLaw, DgpError> {
    let theta0 = &spec.theta0;
    match &spec.covariates {
        CovariateModel::Normal { mean, scale } => Ok(IndexLaw::Normal {
            mean: theta0.alpha + dot(&theta0.beta, mean),
            sd: quad_form(scale, &theta0.beta).sqrt(),
        }),
        CovariateModel::StudentT { mean, scale, dof } => Ok(IndexLaw::StudentT {
            location: theta0.alpha + dot(&theta0.beta, mean),
            scale: quad_form(scale, &theta0.beta).sqrt(),
            dof: *dof,
        }),
        CovariateModel::NormalMixture { components } => Ok(IndexLaw::NormalMixture {
            weights: components.iter().map(|c| c.weight).collect(),
            means: components.iter().map(|c| theta0.alpha + dot(&theta0.beta, &c.mean)).collect(),
            sds: components.iter().map(|c| quad_form(&c.scale, &theta0.beta).sqrt()).collect(),
        }),
        CovariateModel::Custom(c) => c.0.index_law(theta0).ok_or_else(|| {
            DgpError::UnsupportedAnalysis(
                "custom covariate sampler declares no index law; use Monte Carlo instead".into(),
            )
        }),
    }
}

/// `Pi(v) = P{U <= V | V = v}`.
pub fn pi_function(spec: &DgpSpec) -> Result<PiFunction, DgpError> {
    match &spec.errors {
        _ if matches!(spec.errors.base(), BaseError::Degenerate) => Err(DgpError::UnsupportedAnalysis(
            "degenerate errors have no conditional CDF with a density".into(),
        )),
        ErrorModel::Independent { base } => Ok(PiFunction {
            base: base.clone(),
            scale_fn: None,
            mixing: None,
        }),
        ErrorModel::IndexHeteroskedastic { base, scale_fn } => Ok(PiFunction {
            base: base.clone(),
            scale_fn: Some(scale_fn.clone()),
            mixing: None,
        }),
        ErrorModel::CovariateHeteroskedastic {
            base,
            scale_fn,
            covariate,
        } => match &spec.covariates {
            // X_j | V is normal, so Pi averages the error CDF over it
            CovariateModel::Normal { mean, scale } => {
                let j = covariate - 1;
                let beta = &spec.theta0.beta;
                let s_beta = mat_vec(scale, beta);
                let var_v = quad_form(scale, beta);
                let slope = s_beta[j] / var_v;
                let v_mean = spec.theta0.alpha + dot(beta, mean);
                Ok(PiFunction {
                    base: base.clone(),
                    scale_fn: Some(scale_fn.clone()),
                    mixing: Some(CovariateMixing {
                        slope,
                        intercept: mean[j] - slope * v_mean,
                        sd: (scale[j][j] - s_beta[j] * s_beta[j] / var_v).max(0.0).sqrt(),
                    }),
                })
            }
            _ => Err(DgpError::UnsupportedAnalysis(
                "errors scaled by a covariate: P(Y=1 | V) is only available for normal covariates".into(),
            )),
        },
    }
}

/// Closed-form `E(X | V)`: `a = S beta0 / (beta0' S beta0)`,
/// `b = mu - a (alpha0 + beta0' mu)` for elliptical laws, and the
/// posterior-weighted version of that for mixtures.
pub fn conditional_mean(spec: &DgpSpec) -> Result<ConditionalMean, DgpError> {
    let theta0 = &spec.theta0;
    let linear = |mean: &[f64], scale: &[Vec<f64>]| {
        let s_beta = mat_vec(scale, &theta0.beta);
        let var = dot(&theta0.beta, &s_beta);
        let v_mean = theta0.alpha + dot(&theta0.beta, mean);
        let a: Vec<f64> = s_beta.iter().map(|x| x / var).collect();
        let b: Vec<f64> = mean.iter().zip(&a).map(|(mu, a)| mu - a * v_mean).collect();
        (a, b, v_mean, var.sqrt())
    };
    match &spec.covariates {
        CovariateModel::Normal { mean, scale } | CovariateModel::StudentT { mean, scale, .. } => {
            let (a, b, ..) = linear(mean, scale);
            Ok(ConditionalMean::Linear { a, b })
        }
        CovariateModel::NormalMixture { components } => Ok(ConditionalMean::NormalMixture {
            components: components
                .iter()
                .map(|c| {
                    let (a, b, v_mean, v_sd) = linear(&c.mean, &c.scale);
                    MixtureConditional {
                        weight: c.weight,
                        v_mean,
                        v_sd,
                        a,
                        b,
                    }
                })
                .collect(),
        }),
        CovariateModel::Custom(c) => c.0.conditional_mean(theta0).ok_or_else(|| {
            DgpError::UnsupportedAnalysis("custom covariate sampler declares no conditional mean".into())
        }),
    }
}

/// Seeded stream: replication `stream` of a run seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Latent draws behind a dataset.
#[derive(Debug, Clone)]
pub struct LatentDraws {
    pub x: DMatrix<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

/// Draws `(X_i, V_i, U_i)` for `i = 1..n`.
pub fn simulate_latent(spec: &DgpSpec, n: usize, seed: u64, stream: u64) -> LatentDraws {
    let m = spec.dim();
    let mut rng = rng_for(seed, stream);
    let mut rows = vec![0.0; n * m];
    let mut v = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for row in rows.chunks_mut(m) {
        spec.sample_covariates(&mut rng, row);
        let vi = spec.theta0.alpha + dot(&spec.theta0.beta, row);
        let eps = spec.errors.base().sample(&mut rng);
        let ui = match &spec.errors {
            ErrorModel::Independent { .. } => eps,
            ErrorModel::IndexHeteroskedastic { scale_fn, .. } => scale_fn.eval(vi) * eps,
            ErrorModel::CovariateHeteroskedastic { scale_fn, covariate, .. } => {
                scale_fn.eval(row[covariate - 1]) * eps
            }
        };
        v.push(vi);
        u.push(ui);
    }
    LatentDraws {
        x: DMatrix::from_row_slice(n, m, &rows),
        v,
        u,
    }
}

/// `sgn(z)` with `sgn(0) = +1`.
#[inline]
pub fn sign_label(z: f64) -> i8 {
    if z >= 0.0 {
        1
    } else {
        -1
    }
}

/// Samples `n` observations from stream 0 of `seed`.
pub fn sample(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset, DgpError> {
    sample_stream(spec, n, seed, 0)
}

pub fn sample_stream(spec: &DgpSpec, n: usize, seed: u64, stream: u64) -> Result<Dataset, DgpError> {
    if n == 0 {
        return Err(DgpError::InvalidDataset("n must be at least 1".into()));
    }
    let latent = simulate_latent(spec, n, seed, stream);
    let y = latent.v.iter().zip(&latent.u).map(|(v, u)| sign_label(v - u)).collect();
    let mut data = Dataset::new(y, latent.x)?;
    data.meta = Some(DatasetMeta {
        seed,
        stream,
        spec: spec.clone(),
    });
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub stream: u64,
    pub spec: DgpSpec,
}

/// Observations `(Y_i, X_i)` with `Y_i` in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<i8>,
    x: DMatrix<f64>,
    meta: Option<DatasetMeta>,
}

impl Dataset {
    /// Checks labels, finiteness and `n >= m + 1`. Both classes are not
    /// required here; the estimator reports a one-class sample as separated.
    pub fn new(y: Vec<i8>, x: DMatrix<f64>) -> Result<Self, DgpError> {
        let (n, m) = x.shape();
        if y.len() != n {
            return Err(DgpError::InvalidDataset(format!("{} labels for {n} rows", y.len())));
        }
        if m == 0 {
            return Err(DgpError::InvalidDataset("no covariates".into()));
        }
        if n < m + 1 {
            return Err(DgpError::InvalidDataset(format!("n = {n} < m + 1 = {}", m + 1)));
        }
        if let Some(i) = y.iter().position(|&v| v != 1 && v != -1) {
            return Err(DgpError::InvalidDataset(format!("label {} at row {} is not -1 or 1", y[i], i + 1)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DgpError::InvalidDataset("non-finite covariate".into()));
        }
        Ok(Self { y, x, meta: None })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[i8] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.n()
    }

    /// Replaces the covariates (same `n`), keeping labels.
    pub fn with_covariates(&self, x: DMatrix<f64>) -> Result<Self, DgpError> {
        Dataset::new(self.y.clone(), x)
    }

    /// Condition number of the scaled design `[1, X]`; large values flag
    /// near-collinear covariates.
    pub fn condition_number(&self) -> f64 {
        let n = self.n();
        let mut design = DMatrix::from_element(n, self.m() + 1, 1.0);
        design.columns_mut(1, self.m()).copy_from(&self.x);
        let gram = design.transpose() * &design / n as f64;
        let d = DVector::from_iterator(gram.nrows(), gram.diagonal().iter().map(|v| 1.0 / v.sqrt()));
        let scaled = DMatrix::from_diagonal(&d) * gram * DMatrix::from_diagonal(&d);
        let eig = scaled.symmetric_eigen().eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            (max / min).sqrt()
        }
    }

    /// CSV with header `y,x1,...,xm`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DgpError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.m()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, y) in self.y.iter().enumerate() {
            let mut rec = vec![y.to_string()];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DgpError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let m = header.len().saturating_sub(1);
        let expected: Vec<String> = std::iter::once("y".to_string())
            .chain((1..=m).map(|j| format!("x{j}")))
            .collect();
        if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
            return Err(DgpError::InvalidDataset(format!(
                "header must be `{}`, got `{}`",
                expected.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    DgpError::InvalidDataset(format!("row {}: `{s}` is not a number", line + 1))
                })
            };
            let label = parse(&rec[0])?;
            y.push(match label {
                l if l == 1.0 => 1,
                l if l == -1.0 => -1,
                _ => {
                    return Err(DgpError::InvalidDataset(format!(
                        "row {}: label {label} is not -1 or 1",
                        line + 1
                    )))
                }
            });
            for field in rec.iter().skip(1) {
                rows.push(parse(field)?);
            }
        }
        let n = y.len();
        Dataset::new(y, DMatrix::from_row_slice(n, m, &rows))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DgpError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DgpError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Decile check of a linear `E(X | V)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearityDiagnostic {
    /// Largest `|mean(X_j | decile) - (a_j mean(V | decile) + b_j)|`.
    pub max_abs_deviation: f64,
    /// Same deviation in units of the decile-mean standard error.
    pub max_standardized_deviation: f64,
}

/// Compares (weighted) means of each covariate within the ten `V`-deciles
/// with the (weighted) least-squares line of that covariate on `V`.
pub fn linearity_diagnostic(x: &DMatrix<f64>, v: &[f64], weights: Option<&[f64]>) -> LinearityDiagnostic {
    let n = v.len();
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let wsum: f64 = w.iter().sum();
    let wmean = |f: &dyn Fn(usize) -> f64, idx: &mut dyn Iterator<Item = usize>| {
        let (mut s, mut t) = (0.0, 0.0);
        for i in idx {
            s += w[i] * f(i);
            t += w[i];
        }
        s / t
    };
    let v_bar = wmean(&|i| v[i], &mut (0..n));
    let v_var = wmean(&|i| (v[i] - v_bar).powi(2), &mut (0..n));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));

    // Deciles of the weighted law: cut where cumulative weight crosses k/10.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); 10];
    let mut acc = 0.0;
    for &i in &order {
        let d = ((10.0 * (acc + 0.5 * w[i]) / wsum) as usize).min(9);
        buckets[d].push(i);
        acc += w[i];
    }

    let mut max_abs = 0.0_f64;
    let mut max_std = 0.0_f64;
    for j in 0..x.ncols() {
        let col = x.column(j);
        let x_bar = wmean(&|i| col[i], &mut (0..n));
        let cov = wmean(&|i| (col[i] - x_bar) * (v[i] - v_bar), &mut (0..n));
        let slope = cov / v_var;
        let intercept = x_bar - slope * v_bar;
        for bucket in buckets.iter().filter(|b| b.len() > 1) {
            let vd = wmean(&|i| v[i], &mut bucket.iter().copied());
            let xd = wmean(&|i| col[i], &mut bucket.iter().copied());
            let var_d = wmean(&|i| (col[i] - xd).powi(2), &mut bucket.iter().copied());
            let (sw, sw2) = bucket.iter().fold((0.0, 0.0), |(a, b), &i| (a + w[i], b + w[i] * w[i]));
            let n_eff = sw * sw / sw2;
            let dev = (xd - (slope * vd + intercept)).abs();
            max_abs = max_abs.max(dev);
            max_std = max_std.max(dev / (var_d / n_eff).sqrt());
        }
    }
    LinearityDiagnostic {
        max_abs_deviation: max_abs,
        max_standardized_deviation: max_std,
    }
}
