use bcqmle::dgp::{self, BaseError, CovariateModel, Dataset, DgpSpec, ErrorModel, ModelParams, ScaleFn};
use bcqmle::harness::{self, Execution, ExperimentConfig, Mode};
use bcqmle::links::LinkFamily;
use bcqmle::population::PopulationProblem;
use bcqmle::qmle;
use bcqmle::reweight::{self, WeightConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn link(probit: bool) -> LinkFamily {
    if probit {
        LinkFamily::probit()
    } else {
        LinkFamily::logistic()
    }
}

fn normal_x() -> CovariateModel {
    CovariateModel::Normal {
        mean: vec![0.0, 0.0],
        scale: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
    }
}

fn error_models() -> Vec<ErrorModel> {
    vec![
        ErrorModel::Independent {
            base: BaseError::Logistic { scale: 1.0 },
        },
        ErrorModel::Independent {
            base: BaseError::StudentT { dof: 3.0, scale: 0.7 },
        },
        ErrorModel::IndexHeteroskedastic {
            base: BaseError::Normal { scale: 1.0 },
            scale_fn: ScaleFn::Quadratic {
                intercept: 1.0,
                curvature: 1.0,
            },
        },
        ErrorModel::CovariateHeteroskedastic {
            base: BaseError::Logistic { scale: 1.0 },
            scale_fn: ScaleFn::Exponential { rate: 0.8 },
            covariate: 1,
        },
    ]
}

fn spec(errors: ErrorModel) -> DgpSpec {
    DgpSpec::new(normal_x(), errors, ModelParams::new(0.3, vec![1.0, -0.5])).unwrap()
}

fn csv_bytes(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    data.write_csv(&mut out).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_strictly_monotone(a in -30.0..30.0f64, gap in 1e-3..30.0f64, probit in any::<bool>()) {
        let l = link(probit);
        let b = (a + gap).min(30.0);
        prop_assume!(b > a);
        prop_assert!(l.score_plus(a).unwrap() > l.score_plus(b).unwrap());
        prop_assert!(l.score_minus(a).unwrap() < l.score_minus(b).unwrap());
    }

    #[test]
    fn pdf_is_derivative_of_cdf(z in -10.0..10.0f64, probit in any::<bool>()) {
        let l = link(probit);
        let h = 1e-5;
        // the upper tail is differenced through the survival function
        let fd = if z <= 0.0 {
            (l.cdf(z + h) - l.cdf(z - h)) / (2.0 * h)
        } else {
            (l.sf(z - h) - l.sf(z + h)) / (2.0 * h)
        };
        let pdf = l.pdf(z);
        prop_assert!((fd - pdf).abs() / pdf < 1e-6, "z = {z}: {fd} vs {pdf}");
    }

    #[test]
    fn pi_minus_half_has_sign_of_v(v in -5.0..5.0f64, which in 0usize..3) {
        prop_assume!(v.abs() > 1e-6);
        let pi = dgp::pi_function(&spec(error_models()[which].clone())).unwrap();
        let d = pi.eval(v) - 0.5;
        prop_assert!(d.signum() == v.signum(), "Pi({v}) - 1/2 = {d}");
    }

    #[test]
    fn covariate_scaled_pi_has_sign_of_v(v in -5.0..5.0f64) {
        prop_assume!(v.abs() > 1e-6);
        let pi = dgp::pi_function(&spec(error_models()[3].clone())).unwrap();
        prop_assert!((pi.eval(v) - 0.5).signum() == v.signum());
    }

    #[test]
    fn sampling_is_byte_identical_per_seed(seed in any::<u64>(), stream in 0u64..1000, which in 0usize..4) {
        let s = spec(error_models()[which].clone());
        let a = dgp::sample_stream(&s, 50, seed, stream).unwrap();
        let b = dgp::sample_stream(&s, 50, seed, stream).unwrap();
        prop_assert_eq!(csv_bytes(&a), csv_bytes(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn phi_is_strictly_decreasing_in_r(
        c_idx in 0usize..5, r1 in -8.0..8.0f64, gap in 1e-3..4.0f64, probit in any::<bool>(), which in 0usize..3,
    ) {
        let c = [0.0, 0.5, 1.0, 2.0, 5.0][c_idx];
        let problem = PopulationProblem::from_spec(&spec(error_models()[which].clone()), link(probit), 128).unwrap();
        let r2 = r1 + gap;
        prop_assert!(problem.phi(c, r1).unwrap() > problem.phi(c, r2).unwrap());
    }

    #[test]
    fn unit_weights_reproduce_unweighted_fit(seed in 0u64..10_000, probit in any::<bool>()) {
        let data = dgp::sample(&spec(error_models()[0].clone()), 300, seed).unwrap();
        let l = link(probit);
        let plain = qmle::fit(&data, &l, None);
        let weighted = qmle::fit_weighted(&data, &l, &vec![1.0; data.n()], None);
        match (plain, weighted) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.theta_hat, b.theta_hat);
                prop_assert_eq!(a.loglik, b.loglik);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn weights_follow_observation_relabeling(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let data = dgp::sample(&spec(error_models()[0].clone()), 400, seed).unwrap();
        let n = data.n();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = shuffle | 1;
        for i in (1..n).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            order.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let y: Vec<i8> = order.iter().map(|&i| data.y()[i]).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| data.x()[(order[i], j)]);
        let permuted = Dataset::new(y, x).unwrap();
        let cfg = WeightConfig::default();
        let w = reweight::compute_weights(&data, &cfg).unwrap().weights;
        let wp = reweight::compute_weights(&permuted, &cfg).unwrap().weights;
        for (i, &k) in order.iter().enumerate() {
            prop_assert!((wp[i] - w[k]).abs() <= 1e-12 * w[k].abs().max(1.0));
        }
    }

    #[test]
    fn parallel_and_serial_runs_agree(seed in any::<u64>(), reps in 1usize..6) {
        let cfg = ExperimentConfig {
            mode: Mode::Coverage,
            link: "probit".into(),
            sample_sizes: vec![200, 400],
            replications: reps,
            seed,
            level: 0.9,
            quadrature_nodes: 64,
            outputs: Default::default(),
            weights: Default::default(),
            dgp: spec(error_models()[0].clone()),
        };
        // small samples may separate; compare whatever both runs produce
        let a = harness::run_with(&cfg, Execution::Serial).map(|r| r.rows).map_err(|e| e.to_string());
        let b = harness::run_with(&cfg, Execution::Parallel).map(|r| r.rows).map_err(|e| e.to_string());
        prop_assert_eq!(a, b);
    }
}
