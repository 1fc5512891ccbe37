use bcqmle::dgp::{CovariateModel, DgpSpec};
use bcqmle::harness::{
    self, assumption_battery, battery_outcome, read_summary_csv, write_json, write_summary_csv, Execution,
    Expectation, ExperimentConfig, HarnessError, Mode, ReferenceSource, RowStatus,
};
use bcqmle::links::LinkFamily;

fn battery_spec(label: &str) -> DgpSpec {
    assumption_battery()
        .into_iter()
        .find(|c| c.label == label)
        .unwrap()
        .spec
}

fn config(mode: Mode, link: &str, spec: DgpSpec, sizes: &[usize], reps: usize) -> ExperimentConfig {
    let cfg = ExperimentConfig {
        mode,
        link: link.into(),
        sample_sizes: sizes.to_vec(),
        replications: reps,
        seed: 20240611,
        level: 0.95,
        quadrature_nodes: 256,
        outputs: Default::default(),
        weights: Default::default(),
        dgp: spec,
    };
    cfg.validate().unwrap();
    cfg
}

#[test]
fn correct_link_rmse_shrinks_with_n() {
    let cfg = config(Mode::Consistency, "logit", battery_spec("i"), &[1000, 10000, 100000], 200);
    let report = harness::run(&cfg).unwrap();
    assert_eq!(report.reference.source, ReferenceSource::PseudoTrue);
    assert!((report.reference.c_star.unwrap() - 1.0).abs() < 1e-6);
    let rmse: Vec<f64> = report.summary.iter().map(|s| s.rmse_total).collect();
    assert!(rmse.windows(2).all(|w| w[1] < w[0]), "{rmse:?}");
    assert!(rmse[2] < 0.05, "{rmse:?}");
    for s in &report.summary {
        assert_eq!(s.completed, 200);
        assert_eq!(s.failures, 0);
    }
}

#[test]
fn probit_on_logistic_matches_pseudo_true() {
    let cfg = config(Mode::PseudoTrue, "probit", battery_spec("i"), &[100000], 200);
    let report = harness::run(&cfg).unwrap();
    let c_star = report.reference.c_star.unwrap();
    assert!(report.reference.residual_full_foc.unwrap() < 1e-7);
    let s = &report.summary[0];
    let z = (s.mean_c_hat_projection - c_star) / s.se_c_hat_projection;
    assert!(z.abs() < 2.0, "mean {} c* {} se {}", s.mean_c_hat_projection, c_star, s.se_c_hat_projection);
    for c in s.mean_c_hat.iter().flatten() {
        assert!((c - c_star).abs() < 0.05 * c_star);
    }
}

#[test]
fn median_cosine_rises_with_n_for_guaranteed_cases() {
    for case in assumption_battery()
        .into_iter()
        .filter(|c| c.expectation == Expectation::SlopeConsistent)
    {
        let cfg = config(Mode::Consistency, "probit", case.spec, &[500, 5000, 50000], 60);
        let report = harness::run(&cfg).unwrap();
        let med: Vec<f64> = report.summary.iter().map(|s| s.median_cosine).collect();
        assert!(med.windows(2).all(|w| w[1] > w[0]), "{}: {med:?}", case.label);
    }
}

#[test]
fn pseudo_true_mode_requires_a_solvable_population() {
    let mut cfg = config(Mode::Consistency, "logit", battery_spec("iv"), &[500], 3);
    let report = harness::run(&cfg).unwrap();
    assert_eq!(report.reference.source, ReferenceSource::Theta0);
    assert!(report.reference.note.is_some());
    cfg.mode = Mode::PseudoTrue;
    let err = harness::run(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Population(_)), "{err}");
    assert!(!err.is_config());
}

fn json_bytes(cfg: &ExperimentConfig, execution: Execution) -> Vec<u8> {
    let report = harness::run_with(cfg, execution).unwrap();
    let mut out = Vec::new();
    write_json(&report, &mut out).unwrap();
    out
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let cfg = config(Mode::Coverage, "probit", battery_spec("iii"), &[400, 800], 12);
    let serial = json_bytes(&cfg, Execution::Serial);
    assert_eq!(serial, json_bytes(&cfg, Execution::Serial));
    assert_eq!(serial, json_bytes(&cfg, Execution::Parallel));

    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(serial, json_bytes(&other, Execution::Serial));

    let text = String::from_utf8(serial).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["schema_version"], 1);
    assert_eq!(value["config"]["seed"], 20240611);
    assert_eq!(value["rows"].as_array().unwrap().len(), 24);
}

#[test]
fn single_replication_report_is_byte_identical() {
    let cfg = config(Mode::Consistency, "logit", battery_spec("i"), &[100], 1);
    assert_eq!(json_bytes(&cfg, Execution::Parallel), json_bytes(&cfg, Execution::Parallel));
}

#[test]
fn adding_sample_sizes_keeps_earlier_rows() {
    let small = config(Mode::Consistency, "logit", battery_spec("i"), &[300], 5);
    let big = config(Mode::Consistency, "logit", battery_spec("i"), &[300, 600], 5);
    let a = harness::run(&small).unwrap();
    let b = harness::run(&big).unwrap();
    assert_eq!(a.rows[..], b.rows[..5]);
}

#[test]
fn summary_csv_round_trips() {
    let cfg = config(Mode::Coverage, "logit", battery_spec("i"), &[500, 1000], 10);
    let report = harness::run(&cfg).unwrap();
    let mut buf = Vec::new();
    write_summary_csv(&report.summary, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("n,quantity,value\n"));
    assert!(text.contains("500,coverage.ratio,"));
    assert!(text.contains("500,rejection.equal_1_2,"));
    let back = read_summary_csv(&buf[..]).unwrap();
    assert_eq!(back, report.summary);
    assert_eq!(
        harness::summarize(&report.rows, &cfg.sample_sizes, &report.reference.theta, &report.hypotheses),
        report.summary
    );

    let mut rows = Vec::new();
    harness::write_rows_csv(&report, &mut rows).unwrap();
    let rows = String::from_utf8(rows).unwrap();
    let header = rows.lines().next().unwrap();
    assert_eq!(
        header,
        harness::row_columns(Mode::Coverage, 2, &report.hypotheses).join(",")
    );
    assert_eq!(rows.lines().count(), 21);
}

#[test]
fn emit_writes_configured_paths() {
    let dir = std::env::temp_dir().join(format!("bcqmle-harness-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = config(Mode::Consistency, "logit", battery_spec("i"), &[300], 4);
    cfg.outputs.rows_csv = Some(dir.join("rows.csv"));
    cfg.outputs.summary_csv = Some(dir.join("summary.csv"));
    cfg.outputs.json = Some(dir.join("report.json"));
    let report = harness::run(&cfg).unwrap();
    let csv = harness::emit(&report, harness::Format::Csv, &cfg.outputs).unwrap();
    let json = harness::emit(&report, harness::Format::Json, &cfg.outputs).unwrap();
    assert_eq!(csv.len(), 2);
    assert_eq!(json.len(), 1);
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(text.contains("\"seed\": 20240611"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn coverage_near_nominal_under_correct_link() {
    let cfg = config(Mode::Coverage, "logit", battery_spec("i"), &[3000], 300);
    let report = harness::run(&cfg).unwrap();
    let s = &report.summary[0];
    // Binomial SE at 300 replications is about 0.0126.
    for c in s.coverage.as_ref().unwrap() {
        assert!((c - 0.95).abs() < 0.04, "{:?}", s.coverage);
    }
    assert!((s.ratio_coverage.unwrap() - 0.95).abs() < 0.04);
    assert_eq!(s.rejection_rates.len(), 1);
    assert!(s.rejection_rates[0].rate < 0.09);
}

#[test]
fn reweight_compare_records_both_fits() {
    let cfg = config(Mode::ReweightCompare, "probit", battery_spec("iii"), &[4000], 6);
    let report = harness::run(&cfg).unwrap();
    for row in &report.rows {
        assert_eq!(row.status, RowStatus::Ok);
        let w = row.weighted.as_ref().unwrap();
        assert!(w.trimmed_mass >= 0.0 && w.trimmed_mass <= 0.2);
        assert!(w.cosine > 0.9);
    }
    let s = &report.summary[0];
    assert!(s.share_weighted_better.is_some());
    assert!(s.weighted_mean_cosine.is_some());
}

#[test]
fn failure_budget_aborts_runs_dominated_by_separation() {
    let mut spec = battery_spec("i");
    let text = spec.to_toml_string().unwrap().replace("beta = [1.0, 1.0]", "beta = [40.0, 40.0]");
    spec = DgpSpec::from_toml_str(&text).unwrap();
    let cfg = config(Mode::Consistency, "logit", spec, &[20], 20);
    match harness::run(&cfg) {
        Err(HarnessError::FailureBudget { n, failures, budget, .. }) => {
            assert_eq!(n, 20);
            assert_eq!(budget, 1);
            assert!(failures > budget);
        }
        other => panic!("expected a failure-budget error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_config_errors() {
    let base = config(Mode::Consistency, "logit", battery_spec("i"), &[500], 3);
    let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
        Box::new(|c| c.replications = 0),
        Box::new(|c| c.sample_sizes = vec![]),
        Box::new(|c| c.sample_sizes = vec![500, 500]),
        Box::new(|c| c.level = 1.0),
        Box::new(|c| c.link = "gompit".into()),
        Box::new(|c| c.quadrature_nodes = 8),
        Box::new(|c| {
            c.mode = Mode::ReweightCompare;
            c.sample_sizes = vec![60];
        }),
    ];
    for edit in cases {
        let mut cfg = base.clone();
        edit(&mut cfg);
        let err = harness::run(&cfg).unwrap_err();
        assert!(err.is_config(), "{err}");
    }
    let unknown = format!("bogus = 1\n{}", base.to_toml_string().unwrap());
    assert!(ExperimentConfig::from_toml_str(&unknown).unwrap_err().is_config());
    let again = ExperimentConfig::from_toml_str(&base.to_toml_string().unwrap()).unwrap();
    assert_eq!(again, base);
}

#[test]
fn battery_matches_declared_expectations() {
    let battery = assumption_battery();
    assert_eq!(battery.len(), 4);
    assert_eq!(battery[0].spec.assumptions(), &bcqmle::dgp::Assumption::all());
    let link = LinkFamily::from_name("probit").unwrap();
    for case in &battery {
        assert_eq!(
            case.spec.slope_consistency_guaranteed(),
            case.expectation == Expectation::SlopeConsistent,
            "{}",
            case.label
        );
        let out = battery_outcome(case, &link, 256);
        assert!(out.error.is_none(), "{}: {:?}", case.label, out.error);
        assert!(out.c_star.unwrap() > 0.0 && out.c_star.unwrap().is_finite());
        assert!(out.psi_at_zero.unwrap() > 0.0, "{}", case.label);
        assert_eq!(out.phi_decreasing, Some(true), "{}", case.label);
        match case.label {
            "i" | "ii" => assert!(out.residual_full_foc.unwrap() < 1e-7, "{}: {:?}", case.label, out.residual_full_foc),
            "iii" => assert!(out.residual_full_foc.unwrap() > 1e-3, "{:?}", out.residual_full_foc),
            "iv" => assert!(out.residual_full_foc.is_none()),
            _ => unreachable!(),
        }
    }
    assert!(matches!(battery[2].spec.covariates(), CovariateModel::NormalMixture { .. }));
}
