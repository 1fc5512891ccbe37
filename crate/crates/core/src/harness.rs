//! Config-driven Monte Carlo experiments and the assumption battery.
//!
//! An [`ExperimentConfig`] names a data-generating spec, an assumed link, a
//! list of sample sizes and a replication count. [`run`] samples, fits and
//! records one [`ReplicationRow`] per `(n, replication)`, then summarizes each
//! sample size against the pseudo-true parameter (or `theta0` when the
//! population problem is not available for the data-generating process).
//!
//! Replication `r` at the `k`-th sample size draws from ChaCha stream
//! `(k << 32) | r` of the configured seed, so rows do not depend on the order
//! or the thread they were computed on.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{
    self, Assumption, BaseError, CovariateModel, DgpError, DgpSpec, ErrorModel, ModelParams, ScaleFn,
};
use crate::links::{LinkError, LinkFamily};
use crate::population::{self, PopulationError, PopulationProblem, DEFAULT_NODES, DEFAULT_TOL};
use crate::qmle::{self, FitError, FitResult, Hypothesis};
use crate::reweight::{self, WeightConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Share of replications per sample size allowed to fail before a run aborts.
pub const FAILURE_BUDGET: f64 = 0.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("population problem: {0}")]
    Population(#[from] PopulationError),
    #[error("{failures} of {replications} replications failed at n = {n}, over the budget of {budget}; first failure: {first}")]
    FailureBudget {
        n: usize,
        failures: usize,
        replications: usize,
        budget: usize,
        first: String,
    },
    #[error("summary csv: {0}")]
    Summary(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// Errors in the experiment description rather than in the numerics.
    pub fn is_config(&self) -> bool {
        match self {
            HarnessError::Config(_) | HarnessError::Parse(_) | HarnessError::Link(_) => true,
            HarnessError::Dgp(e) => !matches!(e, DgpError::UnsupportedAnalysis(_)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Track `theta_hat` against the reference as `n` grows.
    Consistency,
    /// Same rows, but the population solver must succeed.
    PseudoTrue,
    /// Adds Wald interval coverage and the size of tests that hold under the DGP.
    Coverage,
    /// Adds a density-ratio weighted fit of every sample.
    ReweightCompare,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub rows_csv: Option<PathBuf>,
    pub summary_csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

fn default_level() -> f64 {
    0.95
}

fn default_nodes() -> usize {
    DEFAULT_NODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub link: String,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Confidence level for intervals; tests run at `1 - level`.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub outputs: Outputs,
    /// Used by `reweight-compare` only.
    #[serde(default)]
    pub weights: WeightConfig,
    pub dgp: DgpSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if self.sample_sizes.is_empty() {
            return bad("sample_sizes is empty".into());
        }
        if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("sample_sizes {:?} are not strictly increasing", self.sample_sizes));
        }
        let m = self.dgp.dim();
        let smallest = self.sample_sizes[0];
        if smallest < m + 2 {
            return bad(format!("n = {smallest} is too small for {m} covariates"));
        }
        if self.mode == Mode::ReweightCompare && smallest < 50 * m {
            return bad(format!("reweight-compare needs n >= {} for the kernel density", 50 * m));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        if self.quadrature_nodes < population::quadrature::MIN_NODES {
            return bad(format!(
                "quadrature_nodes must be at least {}",
                population::quadrature::MIN_NODES
            ));
        }
        LinkFamily::from_name(&self.link)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    Separation,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedOutcome {
    pub theta_hat: ModelParams,
    pub cosine: f64,
    pub trimmed_mass: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub n: usize,
    pub replication: usize,
    pub status: RowStatus,
    pub iterations: usize,
    pub theta_hat: Option<ModelParams>,
    /// Cosine between `beta_hat` and `beta0`.
    pub cosine: Option<f64>,
    /// `beta_hat_j / beta0_j`, `None` where `beta0_j = 0`.
    pub c_hat: Vec<Option<f64>>,
    /// `beta_hat' beta0 / |beta0|^2`.
    pub c_hat_projection: Option<f64>,
    /// Per component of theta: does the Wald interval cover the reference?
    pub covered: Option<Vec<bool>>,
    /// Does the delta-method interval for `beta_1 / beta_2` cover `beta0_1 / beta0_2`?
    pub ratio_covered: Option<bool>,
    /// Rejections of the report's true hypotheses, in order.
    pub rejections: Vec<bool>,
    pub weighted: Option<WeightedOutcome>,
    pub error: Option<String>,
}

/// Where the bias and RMSE are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    PseudoTrue,
    Theta0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub source: ReferenceSource,
    pub theta: ModelParams,
    pub c_star: Option<f64>,
    pub r_star: Option<f64>,
    pub residual_full_foc: Option<f64>,
    /// Why the population solver was not used.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRate {
    pub hypothesis: String,
    pub rate: f64,
}

/// Per-sample-size summary over the successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub completed: usize,
    pub failures: usize,
    /// Per component of `(alpha, beta')'`.
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Root mean squared Euclidean error of the whole vector.
    pub rmse_total: f64,
    pub mean_cosine: f64,
    pub median_cosine: f64,
    pub mean_c_hat: Vec<Option<f64>>,
    pub mean_c_hat_projection: f64,
    /// Monte Carlo standard error of `mean_c_hat_projection`.
    pub se_c_hat_projection: f64,
    pub coverage: Option<Vec<f64>>,
    pub ratio_coverage: Option<f64>,
    pub rejection_rates: Vec<RejectionRate>,
    pub weighted_mean_cosine: Option<f64>,
    pub weighted_median_cosine: Option<f64>,
    /// Share of replications where the weighted cosine beats the plain one.
    pub share_weighted_better: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub reference: Reference,
    pub hypotheses: Vec<Hypothesis>,
    pub rows: Vec<ReplicationRow>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Serial,
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_with(config, Execution::Parallel)
}

pub fn run_with(config: &ExperimentConfig, execution: Execution) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let link = LinkFamily::from_name(&config.link)?;
    let reference = reference_for(config, &link)?;
    let hypotheses = true_hypotheses(config.dgp.theta0());

    let tasks: Vec<(usize, usize)> = (0..config.sample_sizes.len())
        .flat_map(|k| (0..config.replications).map(move |r| (k, r)))
        .collect();
    let one = |&(k, r): &(usize, usize)| replicate(config, &link, &reference, &hypotheses, k, r);
    let rows: Vec<ReplicationRow> = match execution {
        Execution::Parallel => tasks.par_iter().map(one).collect(),
        Execution::Serial => tasks.iter().map(one).collect(),
    };

    let budget = (FAILURE_BUDGET * config.replications as f64).floor() as usize;
    for &n in &config.sample_sizes {
        let failed: Vec<&ReplicationRow> = rows
            .iter()
            .filter(|row| row.n == n && row.status != RowStatus::Ok)
            .collect();
        if failed.len() > budget {
            return Err(HarnessError::FailureBudget {
                n,
                failures: failed.len(),
                replications: config.replications,
                budget,
                first: failed[0].error.clone().unwrap_or_default(),
            });
        }
    }

    let summary = summarize(&rows, &config.sample_sizes, &reference.theta, &hypotheses);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        reference,
        hypotheses,
        rows,
        summary,
    })
}

fn reference_for(config: &ExperimentConfig, link: &LinkFamily) -> Result<Reference, HarnessError> {
    let theta0 = config.dgp.theta0().clone();
    match population::pseudo_true(&config.dgp, link, config.quadrature_nodes) {
        Ok(pt) => Ok(Reference {
            source: ReferenceSource::PseudoTrue,
            theta: pt.theta_star,
            c_star: Some(pt.c_star),
            r_star: Some(pt.r_star),
            residual_full_foc: Some(pt.residual_full_foc),
            note: None,
        }),
        Err(e) if config.mode == Mode::PseudoTrue => Err(e.into()),
        Err(e) => Ok(Reference {
            source: ReferenceSource::Theta0,
            theta: theta0,
            c_star: None,
            r_star: None,
            residual_full_foc: None,
            note: Some(e.to_string()),
        }),
    }
}

/// Scale-invariant restrictions that hold for `beta0`: `beta_j = 0` for
/// zero slopes and `beta_j = beta_k` for equal nonzero slopes.
pub fn true_hypotheses(theta0: &ModelParams) -> Vec<Hypothesis> {
    let beta = &theta0.beta;
    let mut out = Vec::new();
    for (j, b) in beta.iter().enumerate() {
        if *b == 0.0 {
            out.push(Hypothesis::Zero { j: j + 1 });
        }
    }
    for j in 0..beta.len() {
        for k in j + 1..beta.len() {
            if beta[j] == beta[k] && beta[j] != 0.0 {
                out.push(Hypothesis::Equal { j: j + 1, k: k + 1 });
            }
        }
    }
    out
}

fn hypothesis_label(h: &Hypothesis) -> String {
    match h {
        Hypothesis::Zero { j } => format!("zero_{j}"),
        Hypothesis::Equal { j, k } => format!("equal_{j}_{k}"),
        Hypothesis::Ratio { j, k, rho } => format!("ratio_{j}_{k}_{rho}"),
    }
}

fn stream_id(k: usize, r: usize) -> u64 {
    ((k as u64) << 32) | r as u64
}

fn replicate(
    config: &ExperimentConfig,
    link: &LinkFamily,
    reference: &Reference,
    hypotheses: &[Hypothesis],
    k: usize,
    r: usize,
) -> ReplicationRow {
    let n = config.sample_sizes[k];
    let theta0 = config.dgp.theta0();
    let mut row = ReplicationRow {
        n,
        replication: r,
        status: RowStatus::Failed,
        iterations: 0,
        theta_hat: None,
        cosine: None,
        c_hat: vec![None; theta0.dim()],
        c_hat_projection: None,
        covered: None,
        ratio_covered: None,
        rejections: Vec::new(),
        weighted: None,
        error: None,
    };
    let data = match dgp::sample_stream(&config.dgp, n, config.seed, stream_id(k, r)) {
        Ok(d) => d,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let fit = match qmle::fit(&data, link, None) {
        Ok(f) => f,
        Err(e) => {
            row.status = match e {
                FitError::Separation { .. } => RowStatus::Separation,
                FitError::NotConverged { .. } => RowStatus::NotConverged,
                _ => RowStatus::Failed,
            };
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.iterations = fit.iterations;
    if !fit.converged {
        row.status = RowStatus::NotConverged;
        row.error = Some(format!(
            "no convergence after {} iterations (gradient {:.3e})",
            fit.iterations, fit.gradient_norm
        ));
        return row;
    }

    let beta = &fit.theta_hat.beta;
    row.cosine = Some(theta0.slope_cosine(&fit.theta_hat));
    row.c_hat = beta
        .iter()
        .zip(&theta0.beta)
        .map(|(b, b0)| (*b0 != 0.0).then(|| b / b0))
        .collect();
    let b0_sq: f64 = theta0.beta.iter().map(|b| b * b).sum();
    row.c_hat_projection = Some(beta.iter().zip(&theta0.beta).map(|(b, b0)| b * b0).sum::<f64>() / b0_sq);

    match config.mode {
        Mode::Coverage => {
            if let Err(e) = coverage(&mut row, &fit, theta0, &reference.theta, hypotheses, config.level) {
                row.error = Some(e.to_string());
                return row;
            }
        }
        Mode::ReweightCompare => match weighted_outcome(&data, link, &config.weights, theta0) {
            Ok(w) => row.weighted = Some(w),
            Err(e) => {
                row.error = Some(format!("weighted fit: {e}"));
                return row;
            }
        },
        Mode::Consistency | Mode::PseudoTrue => {}
    }
    row.theta_hat = Some(fit.theta_hat);
    row.status = RowStatus::Ok;
    row
}

fn coverage(
    row: &mut ReplicationRow,
    fit: &FitResult,
    theta0: &ModelParams,
    reference: &ModelParams,
    hypotheses: &[Hypothesis],
    level: f64,
) -> Result<(), FitError> {
    let z = std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(level);
    let se = fit.se_sandwich();
    let est = fit.theta_hat.to_vector();
    let target = reference.to_vector();
    row.covered = Some((0..est.len()).map(|i| (est[i] - target[i]).abs() <= z * se[i]).collect());
    if theta0.dim() >= 2 && theta0.beta[1] != 0.0 {
        let ci = qmle::ratio_confidence_interval(fit, 1, 2, level)?;
        row.ratio_covered = Some(ci.contains(theta0.beta[0] / theta0.beta[1]));
    }
    row.rejections = hypotheses
        .iter()
        .map(|h| qmle::test_scale_invariant(fit, *h).map(|t| t.p_value < 1.0 - level))
        .collect::<Result<_, _>>()?;
    Ok(())
}

fn weighted_outcome(
    data: &dgp::Dataset,
    link: &LinkFamily,
    config: &WeightConfig,
    theta0: &ModelParams,
) -> Result<WeightedOutcome, reweight::ReweightError> {
    let plan = reweight::compute_weights(data, config)?;
    let fit = reweight::fit_weighted(data, link, &plan)?;
    if !fit.converged {
        return Err(reweight::ReweightError::Fit(FitError::NotConverged {
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
        }));
    }
    Ok(WeightedOutcome {
        cosine: theta0.slope_cosine(&fit.theta_hat),
        theta_hat: fit.theta_hat,
        trimmed_mass: plan.trimmed_mass,
        max_ratio: plan.max_ratio,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Summary rows recomputed from replication rows.
pub fn summarize(
    rows: &[ReplicationRow],
    sample_sizes: &[usize],
    reference: &ModelParams,
    hypotheses: &[Hypothesis],
) -> Vec<SummaryRow> {
    let target = reference.to_vector();
    let dim = target.len();
    sample_sizes
        .iter()
        .map(|&n| {
            let at_n: Vec<&ReplicationRow> = rows.iter().filter(|r| r.n == n).collect();
            let ok: Vec<&ReplicationRow> = at_n.iter().copied().filter(|r| r.status == RowStatus::Ok).collect();
            let thetas: Vec<Vec<f64>> = ok
                .iter()
                .filter_map(|r| r.theta_hat.as_ref())
                .map(|t| t.to_vector().iter().copied().collect())
                .collect();
            let component = |i: usize| -> Vec<f64> { thetas.iter().map(|t| t[i]).collect() };
            let bias = (0..dim).map(|i| mean(&component(i)) - target[i]).collect();
            let rmse = (0..dim)
                .map(|i| mean(&component(i).iter().map(|v| (v - target[i]).powi(2)).collect::<Vec<_>>()).sqrt())
                .collect();
            let sq_err: Vec<f64> = thetas
                .iter()
                .map(|t| t.iter().zip(target.iter()).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let cosines: Vec<f64> = ok.iter().filter_map(|r| r.cosine).collect();
            let projections: Vec<f64> = ok.iter().filter_map(|r| r.c_hat_projection).collect();
            let proj_mean = mean(&projections);
            let proj_var = projections.iter().map(|p| (p - proj_mean).powi(2)).sum::<f64>()
                / (projections.len() as f64 - 1.0).max(1.0);
            let mean_c_hat = (0..dim - 1)
                .map(|j| {
                    let vals: Vec<f64> = ok.iter().filter_map(|r| r.c_hat[j]).collect();
                    (!vals.is_empty()).then(|| mean(&vals))
                })
                .collect();
            let share = |flags: Vec<bool>| flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;

            let covered: Vec<&Vec<bool>> = ok.iter().filter_map(|r| r.covered.as_ref()).collect();
            let coverage = (!covered.is_empty())
                .then(|| (0..dim).map(|i| share(covered.iter().map(|c| c[i]).collect())).collect());
            let ratio: Vec<bool> = ok.iter().filter_map(|r| r.ratio_covered).collect();
            let ratio_coverage = (!ratio.is_empty()).then(|| share(ratio));
            let tested: Vec<&ReplicationRow> = ok.iter().copied().filter(|r| !r.rejections.is_empty()).collect();
            let rejection_rates = if tested.is_empty() {
                Vec::new()
            } else {
                hypotheses
                    .iter()
                    .enumerate()
                    .map(|(h, hyp)| RejectionRate {
                        hypothesis: hypothesis_label(hyp),
                        rate: share(tested.iter().map(|r| r.rejections[h]).collect()),
                    })
                    .collect()
            };

            let weighted: Vec<(&WeightedOutcome, f64)> = ok
                .iter()
                .filter_map(|r| r.weighted.as_ref().zip(r.cosine))
                .collect();
            let (weighted_mean_cosine, weighted_median_cosine, share_weighted_better) = if weighted.is_empty() {
                (None, None, None)
            } else {
                let wc: Vec<f64> = weighted.iter().map(|(w, _)| w.cosine).collect();
                (
                    Some(mean(&wc)),
                    Some(median(&wc)),
                    Some(share(weighted.iter().map(|(w, c)| w.cosine > *c).collect())),
                )
            };

            SummaryRow {
                n,
                completed: ok.len(),
                failures: at_n.len() - ok.len(),
                bias,
                rmse,
                rmse_total: mean(&sq_err).sqrt(),
                mean_cosine: mean(&cosines),
                median_cosine: median(&cosines),
                mean_c_hat,
                mean_c_hat_projection: proj_mean,
                se_c_hat_projection: (proj_var / projections.len() as f64).sqrt(),
                coverage,
                ratio_coverage,
                rejection_rates,
                weighted_mean_cosine,
                weighted_median_cosine,
                share_weighted_better,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

/// Writes the report files of one format to the paths in `outputs` and
/// returns the paths written. CSV means the rows file and the summary file.
pub fn emit(report: &ExperimentReport, format: Format, outputs: &Outputs) -> Result<Vec<PathBuf>, HarnessError> {
    let create = |path: &Path| -> Result<BufWriter<File>, HarnessError> {
        File::create(path)
            .map(BufWriter::new)
            .map_err(|e| HarnessError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    };
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            if let Some(path) = &outputs.rows_csv {
                write_rows_csv(report, create(path)?)?;
                written.push(path.clone());
            }
            if let Some(path) = &outputs.summary_csv {
                write_summary_csv(&report.summary, create(path)?)?;
                written.push(path.clone());
            }
        }
        Format::Json => {
            if let Some(path) = &outputs.json {
                let mut w = create(path)?;
                write_json(report, &mut w)?;
                w.flush()?;
                written.push(path.clone());
            }
        }
    }
    Ok(written)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<W: Write>(report: &ExperimentReport, mut writer: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(&mut writer, report)?;
    writer.write_all(b"\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn flag(v: Option<bool>) -> String {
    v.map_or(String::new(), |b| u8::from(b).to_string())
}

/// Column names of the rows CSV for a report's mode, dimension and hypotheses.
///
/// Always: `n, replication, status, iterations, alpha_hat, beta_hat_1..m,
/// cosine, c_hat_1..m, c_hat_projection`. Coverage mode adds `covered_alpha,
/// covered_beta_1..m, ratio_covered` and one `reject_<hypothesis>` per true
/// hypothesis; reweight-compare adds `w_alpha_hat, w_beta_hat_1..m, w_cosine,
/// trimmed_mass, max_ratio`. The last column is `error`. Flags are 0/1 and
/// missing values are empty.
pub fn row_columns(mode: Mode, m: usize, hypotheses: &[Hypothesis]) -> Vec<String> {
    let mut cols: Vec<String> = ["n", "replication", "status", "iterations", "alpha_hat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((1..=m).map(|j| format!("beta_hat_{j}")));
    cols.push("cosine".into());
    cols.extend((1..=m).map(|j| format!("c_hat_{j}")));
    cols.push("c_hat_projection".into());
    match mode {
        Mode::Coverage => {
            cols.push("covered_alpha".into());
            cols.extend((1..=m).map(|j| format!("covered_beta_{j}")));
            cols.push("ratio_covered".into());
            cols.extend(hypotheses.iter().map(|h| format!("reject_{}", hypothesis_label(h))));
        }
        Mode::ReweightCompare => {
            cols.push("w_alpha_hat".into());
            cols.extend((1..=m).map(|j| format!("w_beta_hat_{j}")));
            cols.extend(["w_cosine", "trimmed_mass", "max_ratio"].iter().map(|s| s.to_string()));
        }
        Mode::Consistency | Mode::PseudoTrue => {}
    }
    cols.push("error".into());
    cols
}

pub fn write_rows_csv<W: Write>(report: &ExperimentReport, writer: W) -> Result<(), HarnessError> {
    let m = report.config.dgp.dim();
    let mode = report.config.mode;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(row_columns(mode, m, &report.hypotheses))?;
    for row in &report.rows {
        let status = serde_json::to_value(row.status)?;
        let mut rec = vec![
            row.n.to_string(),
            row.replication.to_string(),
            status.as_str().unwrap_or_default().to_string(),
            row.iterations.to_string(),
        ];
        match &row.theta_hat {
            Some(t) => {
                rec.push(t.alpha.to_string());
                rec.extend(t.beta.iter().map(f64::to_string));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), m + 1)),
        }
        rec.push(opt(row.cosine));
        rec.extend(row.c_hat.iter().map(|c| opt(*c)));
        rec.push(opt(row.c_hat_projection));
        match mode {
            Mode::Coverage => {
                match &row.covered {
                    Some(c) => rec.extend(c.iter().map(|b| flag(Some(*b)))),
                    None => rec.extend(std::iter::repeat_n(String::new(), m + 1)),
                }
                rec.push(flag(row.ratio_covered));
                if row.rejections.is_empty() {
                    rec.extend(std::iter::repeat_n(String::new(), report.hypotheses.len()));
                } else {
                    rec.extend(row.rejections.iter().map(|b| flag(Some(*b))));
                }
            }
            Mode::ReweightCompare => match &row.weighted {
                Some(wo) => {
                    rec.push(wo.theta_hat.alpha.to_string());
                    rec.extend(wo.theta_hat.beta.iter().map(f64::to_string));
                    rec.push(wo.cosine.to_string());
                    rec.push(wo.trimmed_mass.to_string());
                    rec.push(wo.max_ratio.to_string());
                }
                None => rec.extend(std::iter::repeat_n(String::new(), m + 4)),
            },
            Mode::Consistency | Mode::PseudoTrue => {}
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn component_name(i: usize) -> String {
    if i == 0 {
        "alpha".into()
    } else {
        format!("beta_{i}")
    }
}

/// Long-format summary: one `n,quantity,value` line per statistic.
///
/// Quantities: `completed`, `failures`, `bias.<c>`, `rmse.<c>` for
/// `c` in `alpha, beta_1..m`, `rmse.total`, `cosine.mean`, `cosine.median`,
/// `c_hat.beta_<j>.mean`, `c_hat.projection.mean`, `c_hat.projection.se`,
/// `coverage.<c>`, `coverage.ratio`, `rejection.<hypothesis>`,
/// `weighted.cosine.mean`, `weighted.cosine.median`, `weighted.better_share`.
/// Statistics that do not apply are omitted.
pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "quantity", "value"])?;
    for s in summary {
        let mut put = |q: String, v: f64| w.write_record([s.n.to_string(), q, v.to_string()]);
        put("completed".into(), s.completed as f64)?;
        put("failures".into(), s.failures as f64)?;
        for (i, v) in s.bias.iter().enumerate() {
            put(format!("bias.{}", component_name(i)), *v)?;
        }
        for (i, v) in s.rmse.iter().enumerate() {
            put(format!("rmse.{}", component_name(i)), *v)?;
        }
        put("rmse.total".into(), s.rmse_total)?;
        put("cosine.mean".into(), s.mean_cosine)?;
        put("cosine.median".into(), s.median_cosine)?;
        for (j, v) in s.mean_c_hat.iter().enumerate() {
            if let Some(v) = v {
                put(format!("c_hat.beta_{}.mean", j + 1), *v)?;
            }
        }
        put("c_hat.projection.mean".into(), s.mean_c_hat_projection)?;
        put("c_hat.projection.se".into(), s.se_c_hat_projection)?;
        if let Some(cov) = &s.coverage {
            for (i, v) in cov.iter().enumerate() {
                put(format!("coverage.{}", component_name(i)), *v)?;
            }
        }
        if let Some(v) = s.ratio_coverage {
            put("coverage.ratio".into(), v)?;
        }
        for r in &s.rejection_rates {
            put(format!("rejection.{}", r.hypothesis), r.rate)?;
        }
        if let Some(v) = s.weighted_mean_cosine {
            put("weighted.cosine.mean".into(), v)?;
        }
        if let Some(v) = s.weighted_median_cosine {
            put("weighted.cosine.median".into(), v)?;
        }
        if let Some(v) = s.share_weighted_better {
            put("weighted.better_share".into(), v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn component_index(name: &str) -> Option<usize> {
    if name == "alpha" {
        Some(0)
    } else {
        name.strip_prefix("beta_")?.parse().ok()
    }
}

/// Parses the output of [`write_summary_csv`].
pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<SummaryRow>, HarnessError> {
    let bad = |msg: String| HarnessError::Summary(msg);
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["n", "quantity", "value"] {
        return Err(bad("expected header n,quantity,value".into()));
    }
    let mut by_n: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let n: usize = rec[0].parse().map_err(|_| bad(format!("bad n `{}`", &rec[0])))?;
        let value: f64 = rec[2].parse().map_err(|_| bad(format!("bad value `{}`", &rec[2])))?;
        if !by_n.contains_key(&n) {
            order.push(n);
        }
        by_n.entry(n).or_default().push((rec[1].to_string(), value));
    }

    let mut out = Vec::new();
    for n in order {
        let entries = &by_n[&n];
        let get = |q: &str| entries.iter().find(|(k, _)| k == q).map(|(_, v)| *v);
        let need = |q: &str| get(q).ok_or_else(|| bad(format!("n = {n}: missing {q}")));
        let indexed = |prefix: &str| -> Vec<(usize, f64)> {
            entries
                .iter()
                .filter_map(|(k, v)| Some((component_index(k.strip_prefix(prefix)?)?, *v)))
                .collect()
        };
        let dense = |items: Vec<(usize, f64)>, what: &str| -> Result<Vec<f64>, HarnessError> {
            items
                .iter()
                .enumerate()
                .map(|(pos, (i, v))| if *i == pos { Ok(*v) } else { Err(bad(format!("n = {n}: {what} out of order"))) })
                .collect()
        };
        let bias = dense(indexed("bias."), "bias")?;
        let dim = bias.len();
        if dim < 2 {
            return Err(bad(format!("n = {n}: no bias entries")));
        }
        let mut mean_c_hat = vec![None; dim - 1];
        for (k, v) in entries {
            if let Some(j) = k
                .strip_prefix("c_hat.beta_")
                .and_then(|r| r.strip_suffix(".mean"))
                .and_then(|j| j.parse::<usize>().ok())
            {
                if j == 0 || j >= dim {
                    return Err(bad(format!("n = {n}: {k} out of range")));
                }
                mean_c_hat[j - 1] = Some(*v);
            }
        }
        let coverage = indexed("coverage.");
        out.push(SummaryRow {
            n,
            completed: need("completed")? as usize,
            failures: need("failures")? as usize,
            bias,
            rmse: dense(indexed("rmse."), "rmse")?,
            rmse_total: need("rmse.total")?,
            mean_cosine: need("cosine.mean")?,
            median_cosine: need("cosine.median")?,
            mean_c_hat,
            mean_c_hat_projection: need("c_hat.projection.mean")?,
            se_c_hat_projection: need("c_hat.projection.se")?,
            coverage: if coverage.is_empty() { None } else { Some(dense(coverage, "coverage")?) },
            ratio_coverage: get("coverage.ratio"),
            rejection_rates: entries
                .iter()
                .filter_map(|(k, v)| {
                    Some(RejectionRate {
                        hypothesis: k.strip_prefix("rejection.")?.to_string(),
                        rate: *v,
                    })
                })
                .collect(),
            weighted_mean_cosine: get("weighted.cosine.mean"),
            weighted_median_cosine: get("weighted.cosine.median"),
            share_weighted_better: get("weighted.better_share"),
        });
    }
    Ok(out)
}

/// What the theory says about a battery case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Index dependence and a linear `E(X | V)` both hold: the slope
    /// converges to a positive multiple of `beta0`.
    SlopeConsistent,
    /// At least one of the two fails; behaviour is observed, not predicted.
    NotGuaranteed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryCase {
    pub label: &'static str,
    pub description: &'static str,
    pub spec: DgpSpec,
    pub expectation: Expectation,
}

/// The four reference designs, all with `theta0 = (0.25, 1, 1)`:
///
/// 1. correlated normal `X`, logistic errors independent of `X`;
/// 2. the same `X`, errors `(1 + V^2) e` with `e` logistic;
/// 3. [`CovariateModel::skewed_mixture`] `X`, logistic errors;
/// 4. correlated normal `X`, errors `exp(0.8 X_1) e` with `e` logistic.
pub fn assumption_battery() -> Vec<BatteryCase> {
    let theta0 = ModelParams::new(0.25, vec![1.0, 1.0]);
    let normal_x = CovariateModel::Normal {
        mean: vec![0.0, 0.0],
        scale: vec![vec![1.0, 0.3], vec![0.3, 1.0]],
    };
    let logistic = BaseError::Logistic { scale: 1.0 };
    let spec = |x: CovariateModel, errors: ErrorModel| {
        DgpSpec::new(x, errors, theta0.clone()).expect("battery specs are valid")
    };
    let cases = vec![
        BatteryCase {
            label: "i",
            description: "elliptical X, independent errors",
            spec: spec(normal_x.clone(), ErrorModel::Independent { base: logistic.clone() }),
            expectation: Expectation::SlopeConsistent,
        },
        BatteryCase {
            label: "ii",
            description: "elliptical X, index-heteroskedastic errors",
            spec: spec(
                normal_x.clone(),
                ErrorModel::IndexHeteroskedastic {
                    base: logistic.clone(),
                    scale_fn: ScaleFn::Quadratic {
                        intercept: 1.0,
                        curvature: 1.0,
                    },
                },
            ),
            expectation: Expectation::SlopeConsistent,
        },
        BatteryCase {
            label: "iii",
            description: "skewed mixture X, independent errors",
            spec: spec(
                CovariateModel::skewed_mixture(),
                ErrorModel::Independent { base: logistic.clone() },
            ),
            expectation: Expectation::NotGuaranteed,
        },
        BatteryCase {
            label: "iv",
            description: "elliptical X, errors scaled by a covariate",
            spec: spec(
                normal_x,
                ErrorModel::CovariateHeteroskedastic {
                    base: logistic,
                    scale_fn: ScaleFn::Exponential { rate: 0.8 },
                    covariate: 1,
                },
            ),
            expectation: Expectation::NotGuaranteed,
        },
    ];
    debug_assert!(cases.iter().all(|c| {
        c.spec.slope_consistency_guaranteed() == (c.expectation == Expectation::SlopeConsistent)
    }));
    cases
}

/// Population-side behaviour of one battery case under an assumed link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryOutcome {
    pub label: String,
    pub description: String,
    pub expectation: Expectation,
    pub assumptions: Vec<Assumption>,
    /// `psi(0, r(0))`.
    pub psi_at_zero: Option<f64>,
    pub c_star: Option<f64>,
    pub r_star: Option<f64>,
    /// `phi(c, .)` strictly decreasing on the checked `(c, r)` grid.
    pub phi_decreasing: Option<bool>,
    /// Full score residual at `(c*, r*)`; only defined under index dependence.
    pub residual_full_foc: Option<f64>,
    pub error: Option<String>,
}

/// `c` multiples of `c*` and the `r` offsets around `r*` where monotonicity
/// of `phi` is checked.
const PHI_C_FACTORS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];
const PHI_R_HALF_WIDTH: f64 = 6.0;
const PHI_R_STEPS: usize = 240;

/// Solves the restricted population problem for one case.
pub fn battery_outcome(case: &BatteryCase, link: &LinkFamily, nodes: usize) -> BatteryOutcome {
    let mut out = BatteryOutcome {
        label: case.label.to_string(),
        description: case.description.to_string(),
        expectation: case.expectation,
        assumptions: case.spec.assumptions().iter().copied().collect(),
        psi_at_zero: None,
        c_star: None,
        r_star: None,
        phi_decreasing: None,
        residual_full_foc: None,
        error: None,
    };
    let result = (|| -> Result<(), PopulationError> {
        let problem = PopulationProblem::from_spec(&case.spec, link.clone(), nodes)?;
        out.psi_at_zero = Some(problem.psi_profile(0.0, DEFAULT_TOL)?.psi);
        let root = problem.solve_restricted(DEFAULT_TOL)?;
        out.c_star = Some(root.c_star);
        out.r_star = Some(root.r_star);

        let mut decreasing = true;
        for f in PHI_C_FACTORS {
            let c = f * root.c_star;
            let mut prev = f64::INFINITY;
            for k in 0..=PHI_R_STEPS {
                let r = root.r_star - PHI_R_HALF_WIDTH + 2.0 * PHI_R_HALF_WIDTH * k as f64 / PHI_R_STEPS as f64;
                let phi = problem.phi(c, r)?;
                decreasing &= phi < prev;
                prev = phi;
            }
        }
        out.phi_decreasing = Some(decreasing);

        if case.spec.satisfies(Assumption::IndexDependence) {
            let cond_mean = dgp::conditional_mean(&case.spec)?;
            out.residual_full_foc = Some(problem.full_foc_residual(root.c_star, root.r_star, &cond_mean)?);
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.error = Some(e.to_string());
    }
    out
}
