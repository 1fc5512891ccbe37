//! Assumed error distributions for the quasi-likelihood.
//!
//! A [`LinkFamily`] carries the CDF `F`, its density `f`, and the score ratios
//! `f/F` and `f/(1-F)` that weight each observation in the quasi-score. All
//! evaluation goes through `log F` and `log(1-F)` so the ratios stay finite
//! far into the tails.

use std::fmt;
use std::sync::Arc;

use libm::erfc;
use thiserror::Error;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Probit arguments beyond this magnitude use the Mills-ratio expansion;
/// `erfc` underflows shortly after.
const PROBIT_ASYMPTOTIC_CUTOFF: f64 = 37.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("non-finite link argument {0}")]
    Domain(f64),
    #[error("unknown link `{0}` (expected one of: logistic, probit)")]
    Unknown(String),
    #[error("link `{name}` rejected: {violation}")]
    Invalid { name: String, violation: String },
}

/// Log-space primitives of a user-supplied link.
///
/// `dlog_pdf` is `f'(z)/f(z)`.
pub struct CustomLinkFns {
    pub log_cdf: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub log_sf: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub log_pdf: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub dlog_pdf: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

#[derive(Clone)]
enum Kind {
    Logistic,
    Probit,
    Custom(Arc<CustomLinkFns>),
}

/// An error CDF assumed by the quasi-likelihood.
///
/// Immutable and cheap to clone; custom links share their closures.
#[derive(Clone)]
pub struct LinkFamily {
    name: String,
    kind: Kind,
}

impl fmt::Debug for LinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkFamily").field("name", &self.name).finish()
    }
}

impl PartialEq for LinkFamily {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (Kind::Logistic, Kind::Logistic) | (Kind::Probit, Kind::Probit) => true,
            (Kind::Custom(a), Kind::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 - Phi(z))`.
fn probit_log_sf(z: f64) -> f64 {
    if z > PROBIT_ASYMPTOTIC_CUTOFF {
        // 1 - Phi(z) ~ phi(z)/z * (1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8)
        let w = 1.0 / (z * z);
        let series = 1.0 + w * (-1.0 + w * (3.0 + w * (-15.0 + w * 105.0)));
        -0.5 * z * z - LN_SQRT_2PI - z.ln() + series.ln()
    } else if z >= 0.0 {
        (0.5 * erfc(z * std::f64::consts::FRAC_1_SQRT_2)).ln()
    } else if z >= -PROBIT_ASYMPTOTIC_CUTOFF {
        (-0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)).ln_1p()
    } else {
        -probit_log_sf(-z).exp()
    }
}

impl LinkFamily {
    pub fn logistic() -> Self {
        Self {
            name: "logistic".to_string(),
            kind: Kind::Logistic,
        }
    }

    pub fn probit() -> Self {
        Self {
            name: "probit".to_string(),
            kind: Kind::Probit,
        }
    }

    /// Registers a user-supplied link after running [`LinkFamily::validate`].
    pub fn custom(name: impl Into<String>, fns: CustomLinkFns) -> Result<Self, LinkError> {
        let link = Self {
            name: name.into(),
            kind: Kind::Custom(Arc::new(fns)),
        };
        link.validate()?;
        Ok(link)
    }

    pub fn from_name(name: &str) -> Result<Self, LinkError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "logistic" | "logit" => Ok(Self::logistic()),
            "probit" | "normal" => Ok(Self::probit()),
            other => Err(LinkError::Unknown(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn log_cdf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => -softplus(-z),
            Kind::Probit => probit_log_sf(-z),
            Kind::Custom(c) => (c.log_cdf)(z),
        }
    }

    /// `log(1 - F(z))`.
    pub fn log_sf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => -softplus(z),
            Kind::Probit => probit_log_sf(z),
            Kind::Custom(c) => (c.log_sf)(z),
        }
    }

    pub fn log_pdf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => -z.abs() - 2.0 * (-z.abs()).exp().ln_1p(),
            Kind::Probit => -0.5 * z * z - LN_SQRT_2PI,
            Kind::Custom(c) => (c.log_pdf)(z),
        }
    }

    /// `f'(z) / f(z)`.
    pub fn dlog_pdf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => -(0.5 * z).tanh(),
            Kind::Probit => -z,
            Kind::Custom(c) => (c.dlog_pdf)(z),
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => sigmoid(z),
            _ => self.log_cdf(z).exp(),
        }
    }

    pub fn sf(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => sigmoid(-z),
            _ => self.log_sf(z).exp(),
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        self.log_pdf(z).exp()
    }

    pub fn pdf_derivative(&self, z: f64) -> f64 {
        self.pdf(z) * self.dlog_pdf(z)
    }

    /// `f(z)/F(z)`, the weight on a `Y = 1` observation in the quasi-score.
    pub fn score_plus(&self, z: f64) -> Result<f64, LinkError> {
        if !z.is_finite() {
            return Err(LinkError::Domain(z));
        }
        Ok(self.lplus(z))
    }

    /// `f(z)/(1-F(z))`, the weight on a `Y = -1` observation.
    pub fn score_minus(&self, z: f64) -> Result<f64, LinkError> {
        if !z.is_finite() {
            return Err(LinkError::Domain(z));
        }
        Ok(self.lminus(z))
    }

    /// Unchecked `f/F` for inner loops.
    #[inline]
    pub(crate) fn lplus(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => sigmoid(-z),
            _ => (self.log_pdf(z) - self.log_cdf(z)).exp(),
        }
    }

    /// Unchecked `f/(1-F)` for inner loops.
    #[inline]
    pub(crate) fn lminus(&self, z: f64) -> f64 {
        match &self.kind {
            Kind::Logistic => sigmoid(z),
            _ => (self.log_pdf(z) - self.log_sf(z)).exp(),
        }
    }

    /// Per-observation log-likelihood contribution and its first two
    /// derivatives in the index `z`.
    #[inline]
    pub(crate) fn loglik_terms(&self, positive: bool, z: f64) -> (f64, f64, f64) {
        if positive {
            let lp = self.lplus(z);
            (self.log_cdf(z), lp, lp * (self.dlog_pdf(z) - lp))
        } else {
            let lm = self.lminus(z);
            (self.log_sf(z), -lm, -lm * (self.dlog_pdf(z) + lm))
        }
    }

    /// Checks every structural property the estimators rely on.
    ///
    /// Runs over `[-10, 10]` with step `0.01`: strict monotonicity and range of
    /// the CDF, strict concavity of `log F` and `log(1-F)`, the density against
    /// a central difference of the CDF, `f'/f` against a central difference of
    /// `log f`, complementarity of the two log tails on `[-30, 30]`, and the
    /// `o(1/|z|)` tail decay of the score ratios at `|z| = 50`.
    pub fn validate(&self) -> Result<(), LinkError> {
        let fail = |violation: String| LinkError::Invalid {
            name: self.name.clone(),
            violation,
        };
        let grid: Vec<f64> = (0..=2000).map(|k| -10.0 + 0.01 * k as f64).collect();

        let mut prev_cdf = f64::NEG_INFINITY;
        for &z in &grid {
            let lc = self.log_cdf(z);
            let ls = self.log_sf(z);
            if !(lc.is_finite() && ls.is_finite() && lc < 0.0 && ls < 0.0) {
                return Err(fail(format!("F({z}) not strictly inside (0, 1)")));
            }
            if lc <= prev_cdf {
                return Err(fail(format!("F not strictly increasing at z = {z}")));
            }
            prev_cdf = lc;
        }

        for w in grid.windows(3) {
            let d2c = self.log_cdf(w[0]) - 2.0 * self.log_cdf(w[1]) + self.log_cdf(w[2]);
            let d2s = self.log_sf(w[0]) - 2.0 * self.log_sf(w[1]) + self.log_sf(w[2]);
            if !(d2c < 0.0) {
                return Err(fail(format!("log F not strictly concave near z = {}", w[1])));
            }
            if !(d2s < 0.0) {
                return Err(fail(format!("log(1-F) not strictly concave near z = {}", w[1])));
            }
        }

        let h = 1e-5;
        for &z in &grid {
            // difference the smaller tail so the step is resolvable
            let fd = if z <= 0.0 {
                (self.log_cdf(z + h).exp() - self.log_cdf(z - h).exp()) / (2.0 * h)
            } else {
                (self.log_sf(z - h).exp() - self.log_sf(z + h).exp()) / (2.0 * h)
            };
            let pdf = self.pdf(z);
            if !(pdf > 0.0) || ((fd - pdf) / pdf).abs() >= 1e-6 {
                return Err(fail(format!(
                    "density {pdf:e} does not match dF/dz {fd:e} at z = {z}"
                )));
            }
            let fd_log = (self.log_pdf(z + h) - self.log_pdf(z - h)) / (2.0 * h);
            let dl = self.dlog_pdf(z);
            if (fd_log - dl).abs() >= 1e-6 * (1.0 + dl.abs()) {
                return Err(fail(format!(
                    "f'/f = {dl:e} does not match d log f/dz = {fd_log:e} at z = {z}"
                )));
            }
        }

        for k in 0..=600 {
            let z = -30.0 + 0.1 * k as f64;
            let total = self.log_cdf(z).exp() + self.log_sf(z).exp();
            if (total - 1.0).abs() > 1e-12 {
                return Err(fail(format!("F + (1-F) = {total} at z = {z}")));
            }
        }

        let tail_plus = 50.0 * self.lplus(50.0);
        let tail_minus = 50.0 * self.lminus(-50.0);
        if !(tail_plus < 1e-10 && tail_minus < 1e-10) {
            return Err(fail(format!(
                "density tails not o(1/|z|): 50*f/F(50) = {tail_plus:e}, 50*f/(1-F)(-50) = {tail_minus:e}"
            )));
        }
        Ok(())
    }
}

/// The links shipped with the crate: logistic and probit.
pub fn builtin_links() -> Vec<LinkFamily> {
    vec![LinkFamily::logistic(), LinkFamily::probit()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // 50-digit reference: phi(2) / (1 - Phi(2)) with Phi by adaptive quadrature.
    const PROBIT_RATIO_AT_2: f64 = 2.373_215_532_822_840_867;

    #[test]
    fn scores_at_zero_equal_twice_density() {
        for link in builtin_links() {
            let p = link.score_plus(0.0).unwrap();
            let m = link.score_minus(0.0).unwrap();
            assert_relative_eq!(p, m, max_relative = 1e-15);
            assert_relative_eq!(p, 2.0 * link.pdf(0.0), max_relative = 1e-14);
        }
        assert_relative_eq!(LinkFamily::logistic().score_plus(0.0).unwrap(), 0.5);
    }

    #[test]
    fn logistic_plus_score_vanishes() {
        assert!(LinkFamily::logistic().score_plus(40.0).unwrap() < 1e-15);
    }

    #[test]
    fn probit_scores_match_high_precision_reference() {
        let probit = LinkFamily::probit();
        assert_relative_eq!(
            probit.score_plus(-2.0).unwrap(),
            PROBIT_RATIO_AT_2,
            max_relative = 1e-13
        );
        assert_relative_eq!(
            probit.score_minus(2.0).unwrap(),
            PROBIT_RATIO_AT_2,
            max_relative = 1e-13
        );
    }

    #[test]
    fn non_finite_argument_is_rejected() {
        let l = LinkFamily::probit();
        assert!(matches!(l.score_plus(f64::NAN), Err(LinkError::Domain(_))));
        assert!(matches!(l.score_plus(f64::INFINITY), Err(LinkError::Domain(_))));
        assert!(matches!(l.score_minus(f64::NEG_INFINITY), Err(LinkError::Domain(_))));
    }

    #[test]
    fn builtins_are_symmetric_and_valid() {
        let links = builtin_links();
        assert!(links.iter().any(|l| l.name() == "logistic"));
        assert!(links.iter().any(|l| l.name() == "probit"));
        for link in &links {
            assert_eq!(link.cdf(0.0), 0.5);
            link.validate().unwrap();
        }
    }

    #[test]
    fn scores_are_monotone_on_wide_grid() {
        for link in builtin_links() {
            let mut prev_p = f64::INFINITY;
            let mut prev_m = 0.0;
            for k in 0..=6000 {
                let z = -30.0 + 0.01 * k as f64;
                let p = link.lplus(z);
                let m = link.lminus(z);
                assert!(p < prev_p, "{} f/F not decreasing at {z}", link.name());
                assert!(m > prev_m, "{} f/(1-F) not increasing at {z}", link.name());
                prev_p = p;
                prev_m = m;
            }
        }
    }

    #[test]
    fn tail_products_are_bounded() {
        for link in builtin_links() {
            let sup_plus = (0..=10_000)
                .map(|k| 0.01 * k as f64)
                .map(|z| z * link.lplus(z))
                .fold(0.0, f64::max);
            let sup_minus = (0..=10_000)
                .map(|k| -0.01 * k as f64)
                .map(|z| -z * link.lminus(z))
                .fold(0.0, f64::max);
            assert!(sup_plus < 10.0 && sup_minus < 10.0);
            assert!(50.0 * link.lplus(50.0) < 1e-10);
            assert!(50.0 * link.lminus(-50.0) < 1e-10);
        }
    }

    #[test]
    fn probit_tails_are_continuous_across_cutoff() {
        let p = LinkFamily::probit();
        let below = p.log_sf(PROBIT_ASYMPTOTIC_CUTOFF - 1e-9);
        let above = p.log_sf(PROBIT_ASYMPTOTIC_CUTOFF + 1e-9);
        assert_relative_eq!(below, above, max_relative = 1e-9);
        // Mills ratio: f/(1-F) ~ z + 1/z
        let z = 200.0;
        assert_relative_eq!(p.score_minus(z).unwrap(), z + 1.0 / z, max_relative = 1e-8);
        assert!(p.log_cdf(-200.0).is_finite());
    }

    #[test]
    fn loglik_terms_match_finite_differences() {
        let h = 1e-6;
        for link in builtin_links() {
            for &positive in &[true, false] {
                for &z in &[-6.0, -1.3, 0.0, 0.4, 2.5, 7.0] {
                    let (v, d1, d2) = link.loglik_terms(positive, z);
                    let (vp, d1p, _) = link.loglik_terms(positive, z + h);
                    let (vm, d1m, _) = link.loglik_terms(positive, z - h);
                    assert!(v < 0.0);
                    assert_relative_eq!(d1, (vp - vm) / (2.0 * h), max_relative = 1e-6, epsilon = 1e-9);
                    assert_relative_eq!(d2, (d1p - d1m) / (2.0 * h), max_relative = 1e-6, epsilon = 1e-9);
                    assert!(d2 < 0.0);
                }
            }
        }
    }

    fn cauchy_fns() -> CustomLinkFns {
        use std::f64::consts::PI;
        CustomLinkFns {
            log_cdf: Box::new(|z: f64| (0.5 + z.atan() / PI).ln()),
            log_sf: Box::new(|z: f64| (0.5 - z.atan() / PI).ln()),
            log_pdf: Box::new(|z: f64| -(PI * (1.0 + z * z)).ln()),
            dlog_pdf: Box::new(|z: f64| -2.0 * z / (1.0 + z * z)),
        }
    }

    #[test]
    fn custom_link_without_log_concavity_is_rejected() {
        let err = LinkFamily::custom("cauchy", cauchy_fns()).unwrap_err();
        match err {
            LinkError::Invalid { name, violation } => {
                assert_eq!(name, "cauchy");
                assert!(violation.contains("concave"), "{violation}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_link_reproducing_logistic_is_accepted() {
        let fns = CustomLinkFns {
            log_cdf: Box::new(|z| -softplus(-z)),
            log_sf: Box::new(softplus_neg),
            log_pdf: Box::new(|z: f64| -z.abs() - 2.0 * (-z.abs()).exp().ln_1p()),
            dlog_pdf: Box::new(|z: f64| -(0.5 * z).tanh()),
        };
        fn softplus_neg(z: f64) -> f64 {
            -softplus(z)
        }
        let link = LinkFamily::custom("my-logit", fns).unwrap();
        let reference = LinkFamily::logistic();
        for &z in &[-3.0, 0.0, 1.7] {
            assert_relative_eq!(link.lplus(z), reference.lplus(z), max_relative = 1e-12);
            assert_relative_eq!(link.lminus(z), reference.lminus(z), max_relative = 1e-12);
        }
        assert_ne!(link, reference);
    }

    #[test]
    fn custom_link_with_wrong_density_is_rejected() {
        let fns = CustomLinkFns {
            log_cdf: Box::new(|z| -softplus(-z)),
            log_sf: Box::new(|z| -softplus(z)),
            // twice the true density
            log_pdf: Box::new(|z: f64| std::f64::consts::LN_2 - z.abs() - 2.0 * (-z.abs()).exp().ln_1p()),
            dlog_pdf: Box::new(|z: f64| -(0.5 * z).tanh()),
        };
        let err = LinkFamily::custom("bad", fns).unwrap_err();
        assert!(err.to_string().contains("density"), "{err}");
    }

    #[test]
    fn from_name_resolves_keys() {
        assert_eq!(LinkFamily::from_name("probit").unwrap(), LinkFamily::probit());
        assert_eq!(LinkFamily::from_name("Logistic").unwrap(), LinkFamily::logistic());
        assert!(matches!(LinkFamily::from_name("cloglog"), Err(LinkError::Unknown(_))));
    }
}
