use approx::assert_relative_eq;
use bcqmle::dgp::{self, BaseError, CovariateModel, ErrorModel, ScaleFn};
use bcqmle::population::{self, ConditionalMean, IndexLaw, PopulationError, QuadratureScheme};
use bcqmle::{DgpSpec, LinkFamily, ModelParams, PopulationProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn identity(m: usize) -> Vec<Vec<f64>> {
    (0..m).map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn normal_spec(errors: ErrorModel) -> DgpSpec {
    DgpSpec::new(
        CovariateModel::Normal {
            mean: vec![0.0, 0.0],
            scale: identity(2),
        },
        errors,
        ModelParams::new(0.5, vec![1.0, -1.0]),
    )
    .unwrap()
}

fn logistic_errors(scale: f64) -> ErrorModel {
    ErrorModel::Independent {
        base: BaseError::Logistic { scale },
    }
}

fn mixture_b() -> CovariateModel {
    CovariateModel::skewed_mixture()
}

/// Trapezoid rule for `E g(V)`, `V ~ N(mean, sd^2)`, on +-12 sd.
fn trapezoid_normal(mean: f64, sd: f64, g: impl Fn(f64) -> f64) -> f64 {
    let n = 200_000;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / n as f64;
    let mut total = 0.0;
    for k in 0..=n {
        let z = a + h * k as f64;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        total += w * (-0.5 * z * z).exp() * g(mean + sd * z);
    }
    total * h / (2.0 * std::f64::consts::PI).sqrt()
}

fn logistic_cdf(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn correct_specification_recovers_theta0() {
    let spec = normal_spec(logistic_errors(1.0));
    let pt = population::pseudo_true(&spec, &LinkFamily::logistic(), 256).unwrap();
    assert!((pt.c_star - 1.0).abs() < 1e-8, "c* = {}", pt.c_star);
    assert!(pt.r_star.abs() < 1e-8, "r* = {}", pt.r_star);
    assert!(pt.residual_full_foc < 1e-7);
    assert_relative_eq!(pt.theta_star.alpha, 0.5, epsilon = 1e-8);
}

#[test]
fn correct_specification_root_is_exact() {
    let spec = normal_spec(logistic_errors(1.0));
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::logistic(), 256).unwrap();
    let (phi, psi) = problem.phi_psi(1.0, 0.0).unwrap();
    assert!(phi.abs() < 1e-13 && psi.abs() < 1e-13, "{phi} {psi}");
}

#[test]
fn error_scale_maps_to_inverse_c_star() {
    // U = kappa * logistic: the logit fits theta0 / kappa exactly
    for kappa in [0.5, 2.0, 3.0] {
        let spec = normal_spec(logistic_errors(kappa));
        let pt = population::pseudo_true(&spec, &LinkFamily::logistic(), 256).unwrap();
        assert_relative_eq!(pt.c_star, 1.0 / kappa, max_relative = 1e-8);
        assert!(pt.r_star.abs() < 1e-8);
    }
    let spec = normal_spec(ErrorModel::Independent {
        base: BaseError::Normal { scale: 1.7 },
    });
    let pt = population::pseudo_true(&spec, &LinkFamily::probit(), 256).unwrap();
    assert_relative_eq!(pt.c_star, 1.0 / 1.7, max_relative = 1e-8);
}

#[test]
fn r_at_zero_matches_scalar_oracle() {
    // At c = 0 the restricted FOC reads l+(r) P = l-(r) (1 - P), P = P(Y = 1).
    let spec = normal_spec(logistic_errors(1.0));
    let sd = 2f64.sqrt();
    let p = trapezoid_normal(0.5, sd, logistic_cdf);
    for link in [LinkFamily::logistic(), LinkFamily::probit()] {
        let problem = PopulationProblem::from_spec(&spec, link.clone(), 256).unwrap();
        let r0 = problem.solve_r_given_c(0.0, 1e-13).unwrap();
        // scalar Newton with numerical derivative
        let g = |r: f64| link.score_plus(r).unwrap() * p - link.score_minus(r).unwrap() * (1.0 - p);
        let mut r = 0.0;
        for _ in 0..50 {
            let h = 1e-6;
            let step = g(r) / ((g(r + h) - g(r - h)) / (2.0 * h));
            r -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        assert!((r0 - r).abs() < 1e-9, "{}: {r0} vs {r}", link.name());
    }
    // logistic link: F(r0) = P in closed form
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::logistic(), 256).unwrap();
    let r0 = problem.solve_r_given_c(0.0, 1e-13).unwrap();
    assert!((r0 - (p / (1.0 - p)).ln()).abs() < 1e-9);
}

#[test]
fn phi_and_psi_agree_with_monte_carlo() {
    let spec = normal_spec(ErrorModel::IndexHeteroskedastic {
        base: BaseError::Logistic { scale: 1.0 },
        scale_fn: ScaleFn::Quadratic {
            intercept: 1.0,
            curvature: 1.0,
        },
    });
    let link = LinkFamily::probit();
    let problem = PopulationProblem::from_spec(&spec, link.clone(), 256).unwrap();
    let pi = dgp::pi_function(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 400_000;
    for &(c, r) in &[(0.6, 0.1), (1.3, -0.4)] {
        let (mut s1, mut s1q, mut s2, mut s2q) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let v = 0.5 + 2f64.sqrt() * z;
            let p = pi.eval(v);
            let t = p * link.score_plus(c * v + r).unwrap() - (1.0 - p) * link.score_minus(c * v + r).unwrap();
            s1 += t;
            s1q += t * t;
            s2 += t * v;
            s2q += t * t * v * v;
        }
        let nf = n as f64;
        let (m1, m2) = (s1 / nf, s2 / nf);
        let se1 = ((s1q / nf - m1 * m1) / nf).sqrt();
        let se2 = ((s2q / nf - m2 * m2) / nf).sqrt();
        let (phi, psi) = problem.phi_psi(c, r).unwrap();
        assert!((phi - m1).abs() < 4.0 * se1, "phi {phi} vs {m1} +- {se1}");
        assert!((psi - m2).abs() < 4.0 * se2, "psi {psi} vs {m2} +- {se2}");
    }
}

#[test]
fn phi_is_strictly_decreasing_in_r() {
    let spec = normal_spec(logistic_errors(1.0));
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::probit(), 256).unwrap();
    for c in [0.0, 0.5, 2.0] {
        let values: Vec<f64> = (-40..=40).map(|k| problem.phi(c, 0.1 * k as f64).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "c = {c}");
    }
}

#[test]
fn psi_at_zero_is_positive_and_sign_change_is_unique() {
    let spec = normal_spec(logistic_errors(1.0));
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::probit(), 256).unwrap();
    let root = problem.solve_restricted(1e-10).unwrap();
    assert!(problem.psi_profile(0.0, 1e-10).unwrap().psi > 0.0);
    let cs: Vec<f64> = (1..=400).map(|k| 4.0 * root.c_star * k as f64 / 400.0).collect();
    let curve = problem.psi_curve(&cs, 1e-10).unwrap();
    let changes = curve.windows(2).filter(|w| w[0].psi.signum() != w[1].psi.signum()).count();
    assert_eq!(changes, 1);
}

#[test]
fn restricted_root_maximizes_restricted_likelihood() {
    let spec = normal_spec(logistic_errors(1.0));
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::probit(), 256).unwrap();
    let root = problem.solve_restricted(1e-10).unwrap();
    let best = problem.restricted_population_loglik(root.c_star, root.r_star).unwrap();
    // coarse grid search oracle
    let mut grid_best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 1..=100 {
        for j in -50..=50 {
            let (c, r) = (0.02 * i as f64, 0.02 * j as f64);
            let l = problem.restricted_population_loglik(c, r).unwrap();
            if l > grid_best.0 {
                grid_best = (l, c, r);
            }
        }
    }
    assert!(best >= grid_best.0);
    assert!((grid_best.1 - root.c_star).abs() <= 0.02 && (grid_best.2 - root.r_star).abs() <= 0.02);
}

#[test]
fn restricted_loglik_at_truth_is_minus_expected_entropy() {
    let spec = normal_spec(logistic_errors(1.0));
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::logistic(), 256).unwrap();
    let entropy = trapezoid_normal(0.5, 2f64.sqrt(), |v| {
        let p = logistic_cdf(v);
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    });
    let l = problem.restricted_population_loglik(1.0, 0.0).unwrap();
    assert_relative_eq!(l, -entropy, max_relative = 1e-10);
}

#[test]
fn heteroskedastic_index_errors_keep_slope_direction() {
    let spec = normal_spec(ErrorModel::IndexHeteroskedastic {
        base: BaseError::Logistic { scale: 1.0 },
        scale_fn: ScaleFn::Quadratic {
            intercept: 1.0,
            curvature: 1.0,
        },
    });
    let pt = population::pseudo_true(&spec, &LinkFamily::probit(), 256).unwrap();
    assert!(pt.c_star > 0.0 && (pt.c_star - 1.0).abs() > 1e-3);
    assert!(pt.residual_full_foc < 1e-7, "{}", pt.residual_full_foc);
    let cm = dgp::conditional_mean(&spec).unwrap();
    let problem = PopulationProblem::from_spec(&spec, LinkFamily::probit(), 256).unwrap();
    let off = problem.full_foc_residual(pt.c_star, pt.r_star + 0.1, &cm).unwrap();
    assert!(off > 1e-3, "{off}");
}

#[test]
fn student_t_covariates_with_correct_link() {
    let spec = DgpSpec::new(
        CovariateModel::StudentT {
            mean: vec![0.2, -0.1],
            scale: vec![vec![1.0, 0.3], vec![0.3, 0.8]],
            dof: 5.0,
        },
        logistic_errors(1.0),
        ModelParams::new(-0.3, vec![0.7, 1.1]),
    )
    .unwrap();
    let pt = population::pseudo_true(&spec, &LinkFamily::logistic(), 256).unwrap();
    assert!((pt.c_star - 1.0).abs() < 1e-7 && pt.r_star.abs() < 1e-7);
    assert!(pt.residual_full_foc < 1e-7);
}

#[test]
fn nonlinear_conditional_mean_leaves_full_score_nonzero() {
    let spec = DgpSpec::new(
        mixture_b(),
        ErrorModel::Independent {
            base: BaseError::StudentT { dof: 1.0, scale: 0.3 },
        },
        ModelParams::new(0.0, vec![1.0, 1.0]),
    )
    .unwrap();
    let pt = population::pseudo_true(&spec, &LinkFamily::probit(), 256).unwrap();
    assert!(pt.c_star > 0.0);
    assert!(pt.residual_full_foc > 1e-3, "{}", pt.residual_full_foc);
}

#[test]
fn quadrature_converges_in_node_count() {
    let specs = [
        normal_spec(ErrorModel::IndexHeteroskedastic {
            base: BaseError::Logistic { scale: 1.0 },
            scale_fn: ScaleFn::Quadratic {
                intercept: 1.0,
                curvature: 1.0,
            },
        }),
        normal_spec(ErrorModel::Independent {
            base: BaseError::StudentT { dof: 3.0, scale: 1.0 },
        }),
        DgpSpec::new(
            CovariateModel::StudentT {
                mean: vec![0.0, 0.0],
                scale: identity(2),
                dof: 5.0,
            },
            logistic_errors(1.0),
            ModelParams::new(0.5, vec![1.0, -1.0]),
        )
        .unwrap(),
    ];
    for spec in &specs {
        let a = population::pseudo_true(spec, &LinkFamily::probit(), 256).unwrap();
        let b = population::pseudo_true(spec, &LinkFamily::probit(), 512).unwrap();
        assert!((a.c_star - b.c_star).abs() < 1e-6);
        assert!((a.r_star - b.r_star).abs() < 1e-6);
    }
}

#[test]
fn quantile_midpoint_grid_agrees_with_gauss_hermite() {
    let spec = normal_spec(logistic_errors(1.0));
    let law = dgp::index_distribution(&spec).unwrap();
    let pi = dgp::pi_function(&spec).unwrap();
    let grid = law.grid(QuadratureScheme::QuantileMidpoint, 20_000);
    let problem = PopulationProblem::new(|v| pi.eval(v), &law, LinkFamily::probit(), grid).unwrap();
    let coarse = problem.solve_restricted(1e-10).unwrap();
    let fine = PopulationProblem::from_spec(&spec, LinkFamily::probit(), 256)
        .unwrap()
        .solve_restricted(1e-10)
        .unwrap();
    assert!((coarse.c_star - fine.c_star).abs() < 1e-3);
}

#[test]
fn pseudo_true_trace_is_csv() {
    let spec = normal_spec(logistic_errors(1.0));
    let pt = population::pseudo_true(&spec, &LinkFamily::probit(), 256).unwrap();
    let csv = pt.psi_trace_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("c,r,s,psi"));
    assert_eq!(lines.count(), pt.bracket_history.len());
    assert!(pt.bracket_history.iter().any(|row| row.psi > 0.0));
    assert!(pt.bracket_history.iter().any(|row| row.psi < 0.0));
}

#[test]
fn rejects_bad_grids_and_pi() {
    let law = IndexLaw::Normal { mean: 0.0, sd: 1.0 };
    let small = law.default_grid(32);
    assert!(matches!(
        PopulationProblem::new(|_| 0.5, &law, LinkFamily::probit(), small),
        Err(PopulationError::TooFewNodes(32))
    ));
    let mut unnormalized = law.default_grid(128);
    unnormalized.weights[0] += 0.1;
    assert!(matches!(
        PopulationProblem::new(|_| 0.5, &law, LinkFamily::probit(), unnormalized),
        Err(PopulationError::GridNotNormalized(_))
    ));
    let shifted = IndexLaw::Normal { mean: 3.0, sd: 1.0 }.default_grid(128);
    assert!(matches!(
        PopulationProblem::new(|_| 0.5, &law, LinkFamily::probit(), shifted),
        Err(PopulationError::GridLawMismatch { .. })
    ));
    assert!(matches!(
        PopulationProblem::new(|v| v, &law, LinkFamily::probit(), law.default_grid(128)),
        Err(PopulationError::InvalidPi { .. })
    ));
}

#[test]
fn wrong_sign_index_violates_assumption() {
    // Pi decreasing in v: the data say the slope points the other way
    let law = IndexLaw::Normal { mean: 0.0, sd: 1.0 };
    let problem =
        PopulationProblem::new(|v| logistic_cdf(-v), &law, LinkFamily::logistic(), law.default_grid(128)).unwrap();
    assert!(matches!(
        problem.solve_restricted(1e-10),
        Err(PopulationError::AssumptionViolation { .. })
    ));
}

#[test]
fn deterministic_outcomes_fail_to_bracket() {
    // Pi is a step: the likelihood keeps increasing in c
    let law = IndexLaw::Normal { mean: 0.0, sd: 1.0 };
    let problem = PopulationProblem::new(
        |v| if v >= 0.0 { 1.0 } else { 0.0 },
        &law,
        LinkFamily::logistic(),
        law.default_grid(128),
    )
    .unwrap();
    assert!(problem.solve_restricted(1e-10).is_err());
}

#[test]
fn covariate_dependent_errors_are_unsupported() {
    let spec = normal_spec(ErrorModel::CovariateHeteroskedastic {
        base: BaseError::Logistic { scale: 1.0 },
        scale_fn: ScaleFn::Exponential { rate: 1.0 },
        covariate: 2,
    });
    assert!(matches!(
        population::pseudo_true(&spec, &LinkFamily::probit(), 256),
        Err(PopulationError::Dgp(_))
    ));
}

#[test]
fn regression_conditional_mean_matches_closed_form() {
    let spec = normal_spec(logistic_errors(1.0));
    let draws = dgp::simulate_latent(&spec, 200_000, 3, 0);
    let fitted = ConditionalMean::from_regression(&draws.x, &draws.v);
    let exact = dgp::conditional_mean(&spec).unwrap();
    for v in [-2.0, 0.0, 1.5] {
        for (a, b) in fitted.eval(v).iter().zip(exact.eval(v)) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }
}
