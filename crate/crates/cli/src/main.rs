use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use coda_match::coda::Metric;
use coda_match::gps::FitOptions;
use coda_match::io::{load_csv, write_csv, ColumnRoles};
use coda_match::pipeline::{
    att_stage, fit_stage, match_stage, run, BootstrapOptions, FitArtifact, MatchArtifact,
    MatchOptions, PipelineError, RunConfig,
};
use coda_match::synth::{generate, DgpConfig};

#[derive(Parser)]
#[command(
    name = "coda-match",
    version,
    about = "Propensity score matching for multiple treatment levels"
)]
struct Cli {
    /// Worker threads for bootstrap and matching (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the propensity model and write a fit artifact.
    Fit(FitCmd),
    /// Match treatment pairs from a fit artifact.
    Match(MatchCmd),
    /// Estimate ATTs from a match artifact.
    Att(AttCmd),
    /// Run the full pipeline and write the JSON report.
    Report(ReportCmd),
    /// Generate a synthetic dataset with known effects as CSV.
    Synth(SynthCmd),
}

#[derive(Args)]
struct InputArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "id")]
    id: String,
    #[arg(long, default_value = "treatment")]
    treatment: String,
    #[arg(long, default_value = "outcome")]
    outcome: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
}

impl InputArgs {
    fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            id: self.id.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
    /// Fit on the raw covariate scale.
    #[arg(long)]
    no_standardize: bool,
    /// Continue when the Newton iterations did not converge.
    #[arg(long)]
    allow_unconverged: bool,
}

impl FitArgs {
    fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            ridge: self.ridge,
            standardize: !self.no_standardize,
        }
    }
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long, default_value = "aitchison")]
    metric: Metric,
    /// Neighbours per treated unit.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Use each comparison unit at most once (greedy by distance).
    #[arg(long)]
    no_replacement: bool,
    /// Maximum match distance, in units of the metric.
    #[arg(long)]
    caliper: Option<f64>,
    /// Drop units with any score entry below this before matching.
    #[arg(long)]
    trim: Option<f64>,
}

impl MatchArgs {
    fn options(&self) -> MatchOptions {
        MatchOptions {
            metric: self.metric,
            k: self.k,
            replacement: !self.no_replacement,
            caliper: self.caliper,
            trim: self.trim,
        }
    }
}

#[derive(Args)]
struct BootstrapArgs {
    /// Bootstrap replicates for standard errors (off when absent).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl BootstrapArgs {
    fn options(&self) -> Option<BootstrapOptions> {
        self.bootstrap.map(|replicates| BootstrapOptions {
            replicates,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct FitCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Output path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchCmd {
    /// Fit artifact written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Treatment label of the treated group (all ordered pairs when absent).
    #[arg(long, requires = "comparison")]
    target: Option<String>,
    /// Treatment label of the comparison group.
    #[arg(long, requires = "target")]
    comparison: Option<String>,
    #[command(flatten)]
    matching: MatchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttCmd {
    /// Match artifact written by `match`.
    #[arg(long)]
    matches: PathBuf,
    #[command(flatten)]
    bootstrap: BootstrapArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    matching: MatchArgs,
    #[command(flatten)]
    bootstrap: BootstrapArgs,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of covariates.
    #[arg(long, default_value_t = 3)]
    covariates: usize,
    /// Number of treatment levels.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Row-major (levels−1)×(covariates+1) propensity coefficients, intercept
    /// first. Defaults to a moderate-selection pattern.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    /// Effect of each level (defaults to 0, 1, 2, …).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Level `j` loads +0.6 on covariate `j mod K` and −0.3 on the next one.
fn default_beta(levels: usize, covariates: usize) -> Vec<f64> {
    let width = covariates + 1;
    let mut beta = vec![0.0; (levels - 1) * width];
    if covariates == 0 {
        return beta;
    }
    for j in 0..levels - 1 {
        beta[j * width + 1 + j % covariates] += 0.6;
        beta[j * width + 1 + (j + 1) % covariates] -= 0.3;
    }
    beta
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn input_failure(message: impl ToString) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

fn write_output(out: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, contents)
            .map_err(|e| input_failure(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(contents.as_bytes()).map_err(input_failure)
        }
    }
}

fn write_json(out: Option<&Path>, value: &impl Serialize) -> Result<(), Failure> {
    let mut json = serde_json::to_string_pretty(value).map_err(input_failure)?;
    json.push('\n');
    write_output(out, &json)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| input_failure(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| input_failure(format!("{} is not a valid artifact: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Fit(cmd) => {
            let data =
                load_csv(&cmd.input.input, &cmd.input.roles()).map_err(PipelineError::from)?;
            let options = cmd.fit.options();
            let fitted = fit_stage(&data, &options, cmd.fit.allow_unconverged)?;
            write_json(cmd.out.as_deref(), &FitArtifact::new(data, options, fitted))
        }
        Command::Match(cmd) => {
            let artifact: FitArtifact = read_json(&cmd.fit)?;
            let pairs = match (&cmd.target, &cmd.comparison) {
                (Some(t), Some(s)) => {
                    let level = |label: &str| {
                        artifact.dataset.level_of_label(label).ok_or_else(|| {
                            input_failure(format!("unknown treatment label '{label}'"))
                        })
                    };
                    Some(vec![(level(t)?, level(s)?)])
                }
                _ => None,
            };
            let matched = match_stage(&artifact, &cmd.matching.options(), pairs)?;
            write_json(cmd.out.as_deref(), &matched)
        }
        Command::Att(cmd) => {
            let matched: MatchArtifact = read_json(&cmd.matches)?;
            let estimates = att_stage(&matched, cmd.bootstrap.options().as_ref())?;
            write_json(cmd.out.as_deref(), &estimates)
        }
        Command::Report(cmd) => {
            let config = RunConfig {
                input: cmd.input.input.clone(),
                roles: cmd.input.roles(),
                matching: cmd.matching.options(),
                fit: cmd.fit.options(),
                bootstrap: cmd.bootstrap.options(),
                allow_unconverged: cmd.fit.allow_unconverged,
            };
            let report = run(&config)?;
            if let Some(path) = cmd.out.as_deref() {
                write_json(Some(path), &report)?;
            }
            write_output(None, &report.summary())
        }
        Command::Synth(cmd) => {
            if cmd.levels < 2 {
                return Err(input_failure("at least 2 levels are required"));
            }
            let config = DgpConfig {
                n: cmd.n,
                n_covariates: cmd.covariates,
                n_levels: cmd.levels,
                beta: cmd
                    .beta
                    .unwrap_or_else(|| default_beta(cmd.levels, cmd.covariates)),
                tau: cmd
                    .tau
                    .unwrap_or_else(|| (0..cmd.levels).map(|t| t as f64).collect()),
                noise_sd: cmd.noise_sd,
                seed: cmd.seed,
            };
            let (data, _) = generate(&config).map_err(input_failure)?;
            let mut buf = Vec::new();
            write_csv(&data, &mut buf).map_err(input_failure)?;
            write_output(
                cmd.out.as_deref(),
                std::str::from_utf8(&buf).expect("csv output is utf-8"),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
