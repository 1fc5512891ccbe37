//! `bcqmle` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical
//! failure (separation, singular Hessian, non-convergence, population solver
//! failure). `BCQMLE_THREADS` sets the worker count for Monte Carlo runs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcqmle::dgp::{self, Dataset, DgpError, DgpSpec, ModelParams};
use bcqmle::harness::{self, ExperimentConfig, Format, HarnessError};
use bcqmle::links::LinkFamily;
use bcqmle::population::{self, PopulationError, DEFAULT_NODES};
use bcqmle::qmle::{self, FitError, FitResult};
use bcqmle::reweight::{self, Bandwidth, ReweightError, TargetDensity, WeightConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

const THREADS_VAR: &str = "BCQMLE_THREADS";

#[derive(Parser)]
#[command(name = "bcqmle", version, about = "Quasi-maximum likelihood for binary choice models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit theta by QMLE and print a JSON summary.
    Fit {
        /// CSV with header `y,x1,...,xm`, y in {-1, 1}.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        link: String,
        /// Starting value `alpha,beta1,...,betam`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
        /// Weights CSV with header `w`, one row per observation.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Solve for the pseudo-true (c*, r*) of a data-generating spec.
    PseudoTrue {
        /// TOML data-generating spec.
        #[arg(long)]
        dgp: PathBuf,
        #[arg(long)]
        link: String,
        #[arg(long, default_value_t = DEFAULT_NODES)]
        grid_nodes: usize,
    },
    /// Run a Monte Carlo experiment from a TOML config.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        /// Which configured outputs to write.
        #[arg(long, value_enum, default_value_t = Emit::All)]
        emit: Emit,
    },
    /// Density-ratio weights towards a target covariate law, as CSV.
    Reweight {
        #[arg(long)]
        data: PathBuf,
        /// `normal` (standard normal) or `moment-matched-normal`.
        #[arg(long, default_value = "normal")]
        target: String,
        #[arg(long, default_value_t = 0.01)]
        trim: f64,
        /// Multiple of the normal-reference bandwidth.
        #[arg(long, default_value_t = 0.5)]
        bandwidth_scale: f64,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Population-side checks on the built-in assumption battery.
    Battery {
        #[arg(long, default_value = "probit")]
        link: String,
        #[arg(long, default_value_t = DEFAULT_NODES)]
        grid_nodes: usize,
    },
    /// Draw a dataset from a spec and write it as CSV.
    Simulate {
        #[arg(long)]
        dgp: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    All,
    Csv,
    Json,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl From<DgpError> for Failure {
    fn from(e: DgpError) -> Self {
        match e {
            DgpError::UnsupportedAnalysis(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::DimensionMismatch { .. } | FitError::InvalidWeights(_) | FitError::InvalidHypothesis(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<PopulationError> for Failure {
    fn from(e: PopulationError) -> Self {
        match e {
            PopulationError::TooFewNodes(_) => Failure::Config(e.to_string()),
            PopulationError::Dgp(d) => d.into(),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<ReweightError> for Failure {
    fn from(e: ReweightError) -> Self {
        match e {
            ReweightError::DegenerateCoordinate(_) | ReweightError::SupportMismatch { .. } => {
                Failure::Numerical(e.to_string())
            }
            ReweightError::Fit(f) => f.into(),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn link(name: &str) -> Result<LinkFamily, Failure> {
    LinkFamily::from_name(name).map_err(|e| Failure::Config(e.to_string()))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| io_failure(path, e))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json(value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Failure::Config(format!("stdout: {e}")))
}

fn fit_json(fit: &FitResult) -> serde_json::Value {
    json!({
        "theta_hat": fit.theta_hat,
        "se_sandwich": fit.se_sandwich(),
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "gradient_norm": fit.gradient_norm,
        "n": fit.n,
    })
}

fn run_fit(data: &Path, link_name: &str, init: Option<Vec<f64>>, weights: Option<&Path>) -> Result<(), Failure> {
    let link = link(link_name)?;
    let data = Dataset::read_csv(open(data)?)?;
    let init = match init {
        Some(v) if v.len() != data.m() + 1 => {
            return Err(Failure::Config(format!(
                "--init needs {} values (alpha and {} slopes), got {}",
                data.m() + 1,
                data.m(),
                v.len()
            )))
        }
        Some(v) => Some(ModelParams::new(v[0], v[1..].to_vec())),
        None => None,
    };
    let fit = match weights {
        Some(path) => {
            let w = reweight::read_weights_csv(open(path)?)?;
            if w.len() != data.n() {
                return Err(ReweightError::LengthMismatch {
                    weights: w.len(),
                    n: data.n(),
                }
                .into());
            }
            qmle::fit_weighted(&data, &link, &w, init.as_ref())?
        }
        None => qmle::fit(&data, &link, init.as_ref())?,
    };
    print_json(&fit_json(&fit))?;
    if !fit.converged {
        return Err(Failure::Numerical(format!(
            "no convergence after {} iterations (gradient sup-norm {:e})",
            fit.iterations, fit.gradient_norm
        )));
    }
    Ok(())
}

fn run_pseudo_true(dgp_path: &Path, link_name: &str, nodes: usize) -> Result<(), Failure> {
    let link = link(link_name)?;
    let spec = DgpSpec::load(dgp_path)?;
    let pt = population::pseudo_true(&spec, &link, nodes)?;
    print_json(&json!({
        "c_star": pt.c_star,
        "r_star": pt.r_star,
        "theta_star": pt.theta_star,
        "residual_full_foc": pt.residual_full_foc,
        "phi": pt.phi,
        "psi": pt.psi,
        "psi_trace_csv": pt.psi_trace_csv(),
    }))
}

fn run_montecarlo(path: &Path, emit: Emit) -> Result<(), Failure> {
    let config = ExperimentConfig::load(path)?;
    let report = harness::run(&config)?;
    let outputs = &config.outputs;
    let formats: &[Format] = match emit {
        Emit::All => &[Format::Csv, Format::Json],
        Emit::Csv => &[Format::Csv],
        Emit::Json => &[Format::Json],
    };
    let mut written = Vec::new();
    for f in formats {
        written.extend(harness::emit(&report, *f, outputs)?);
    }
    if written.is_empty() {
        // nothing configured: the report goes to stdout
        let mut out = io::stdout().lock();
        harness::write_json(&report, &mut out)?;
    } else {
        for p in written {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn run_reweight(data: &Path, target: &str, trim: f64, scale: f64, output: Option<&Path>) -> Result<(), Failure> {
    let data = Dataset::read_csv(open(data)?)?;
    let config = WeightConfig {
        target: TargetDensity::from_name(target)?,
        bandwidth: Bandwidth::Scaled(scale),
        trim_quantile: trim,
        ..WeightConfig::default()
    };
    let plan = reweight::compute_weights(&data, &config)?;
    eprintln!(
        "trimmed mass {:.4}, max/mean weight {:.3}, bandwidth {:?}",
        plan.trimmed_mass, plan.max_ratio, plan.bandwidth
    );
    reweight::write_weights_csv(&plan.weights, sink(output)?)?;
    Ok(())
}

fn run_battery(link_name: &str, nodes: usize) -> Result<(), Failure> {
    let link = link(link_name)?;
    if nodes < population::quadrature::MIN_NODES {
        return Err(PopulationError::TooFewNodes(nodes).into());
    }
    let outcomes: Vec<_> = harness::assumption_battery()
        .iter()
        .map(|case| harness::battery_outcome(case, &link, nodes))
        .collect();
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.error.as_ref().map(|e| format!("case {}: {e}", o.label)))
        .collect();
    print_json(&json!({ "link": link.name(), "grid_nodes": nodes, "cases": outcomes }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(failed.join("; ")))
    }
}

fn run_simulate(dgp_path: &Path, n: usize, seed: u64, stream: u64, output: Option<&Path>) -> Result<(), Failure> {
    let spec = DgpSpec::load(dgp_path)?;
    let data = dgp::sample_stream(&spec, n, seed, stream)?;
    data.write_csv(sink(output)?)?;
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|t| *t >= 1)
        .ok_or_else(|| Failure::Config(format!("{THREADS_VAR} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Fit {
            data,
            link,
            init,
            weights,
        } => run_fit(&data, &link, init, weights.as_deref()),
        Command::PseudoTrue { dgp, link, grid_nodes } => run_pseudo_true(&dgp, &link, grid_nodes),
        Command::Montecarlo { config, emit } => run_montecarlo(&config, emit),
        Command::Reweight {
            data,
            target,
            trim,
            bandwidth_scale,
            output,
        } => run_reweight(&data, &target, trim, bandwidth_scale, output.as_deref()),
        Command::Battery { link, grid_nodes } => run_battery(&link, grid_nodes),
        Command::Simulate {
            dgp,
            n,
            seed,
            stream,
            output,
        } => run_simulate(&dgp, n, seed, stream, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(msg) | Failure::Numerical(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
