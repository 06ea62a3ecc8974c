//! End-to-end orchestration: fit → match → effects → diagnostics, plus the
//! JSON artifacts exchanged between the CLI stages.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::Metric;
use crate::data::Dataset;
use crate::diagnostics::{balance_report, trim, BalanceReport, DiagnosticsError};
use crate::effects::{
    att, bootstrap_replicates, ordered_pairs, with_bootstrap, AttEstimate, BootstrapConfig,
    EffectsError,
};
use crate::gps::{fit, FitOptions, FittedGps, GpsError};
use crate::io::{load_csv, ColumnRoles, InputError};
use crate::matcher::{match_pair, MatchError, MatchSet, MatchSpec, PropensityTable};

pub const TOOL_NAME: &str = "coda-match";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("propensity model: {0}")]
    Estimation(#[from] GpsError),
    #[error("matching: {0}")]
    Match(#[from] MatchError),
    #[error("effects: {0}")]
    Effects(#[from] EffectsError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] DiagnosticsError),
}

impl PipelineError {
    /// 1 for input and configuration problems, 2 for estimation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) | PipelineError::Config(_) => 1,
            PipelineError::Match(MatchError::InvalidSpec(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

/// Matching options shared by every treatment pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub metric: Metric,
    pub k: usize,
    pub replacement: bool,
    pub caliper: Option<f64>,
    /// Drop units with any score entry below this before matching.
    pub trim: Option<f64>,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Aitchison,
            k: 1,
            replacement: true,
            caliper: None,
            trim: None,
        }
    }
}

impl MatchOptions {
    pub fn spec(&self, target: usize, comparison: usize) -> MatchSpec {
        MatchSpec {
            target,
            comparison,
            metric: self.metric,
            k: self.k,
            replacement: self.replacement,
            caliper: self.caliper,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if let Some(c) = self.caliper {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(PipelineError::Config(format!("invalid caliper {c}")));
            }
        }
        if let Some(t) = self.trim {
            if !(t > 0.0 && t < 1.0) {
                return Err(PipelineError::Config(format!(
                    "trim threshold must lie in (0, 1), got {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
}

/// Everything `run` needs. Thread count is a property of the process, not of
/// the analysis, and is not part of this config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub roles: ColumnRoles,
    pub matching: MatchOptions,
    pub fit: FitOptions,
    pub bootstrap: Option<BootstrapOptions>,
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCoefficients {
    pub level: usize,
    pub label: String,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub log_likelihood: f64,
    pub reference_level: usize,
    pub reference_label: String,
    pub coefficients: Vec<LevelCoefficients>,
}

impl ModelSummary {
    pub fn new(data: &Dataset, fitted: &FittedGps) -> Self {
        let names: Vec<String> = std::iter::once("(intercept)".to_string())
            .chain(data.covariate_names().iter().cloned())
            .collect();
        let width = names.len();
        let coefficients = (1..data.n_levels())
            .map(|level| LevelCoefficients {
                level,
                label: data.level_label(level).to_string(),
                terms: names
                    .iter()
                    .enumerate()
                    .map(|(k, name)| {
                        let idx = (level - 1) * width + k;
                        let se = fitted.std_errors[idx];
                        Term {
                            name: name.clone(),
                            estimate: fitted.coefficients.values()[idx],
                            std_error: se.is_finite().then_some(se),
                        }
                    })
                    .collect(),
            })
            .collect();
        Self {
            converged: fitted.converged,
            separation: fitted.separation,
            iterations: fitted.iterations,
            final_gradient_norm: fitted.final_gradient_norm,
            log_likelihood: fitted.log_likelihood,
            reference_level: data.n_levels(),
            reference_label: data.level_label(data.n_levels()).to_string(),
            coefficients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_units: usize,
    pub n_levels: usize,
    pub level_labels: Vec<String>,
    pub level_counts: Vec<usize>,
    pub covariates: Vec<String>,
}

impl DataSummary {
    pub fn new(data: &Dataset) -> Self {
        Self {
            n_units: data.len(),
            n_levels: data.n_levels(),
            level_labels: data.level_labels().to_vec(),
            level_counts: data.level_counts(),
            covariates: data.covariate_names().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub target: usize,
    pub comparison: usize,
    pub target_label: String,
    pub comparison_label: String,
    pub n_treated: usize,
    pub n_matched: usize,
    pub n_dropped: usize,
    pub n_distinct_comparisons: usize,
    pub att: Option<AttEstimate>,
    pub error: Option<String>,
    pub balance: Option<BalanceReport>,
    pub matches: Option<MatchSet>,
}

/// Full analysis report; `generated_at` is the only field that varies
/// between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub generated_at: u64,
    pub config: RunConfig,
    pub data: DataSummary,
    pub model: ModelSummary,
    pub trimmed_ids: Vec<i64>,
    pub pairs: Vec<PairReport>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Fits the propensity model and enforces the convergence policy.
pub fn fit_stage(
    data: &Dataset,
    options: &FitOptions,
    allow_unconverged: bool,
) -> Result<FittedGps, PipelineError> {
    let fitted = fit(data, options)?;
    if !allow_unconverged {
        fitted.require_converged()?;
    }
    Ok(fitted)
}

/// Builds the score table, trimming when asked. Returns the trimmed ids.
pub fn table_stage(
    data: &Dataset,
    fitted: &FittedGps,
    trim_threshold: Option<f64>,
) -> Result<(PropensityTable, Vec<i64>), PipelineError> {
    let table = PropensityTable::from_fit(data, fitted)?;
    Ok(match trim_threshold {
        Some(t) => trim(&table, t),
        None => (table, Vec::new()),
    })
}

/// Runs the full pipeline on an already loaded dataset.
pub fn analyze(data: &Dataset, config: &RunConfig) -> Result<Report, PipelineError> {
    config.matching.validate()?;
    let fitted = fit_stage(data, &config.fit, config.allow_unconverged)?;
    let (table, trimmed_ids) = table_stage(data, &fitted, config.matching.trim)?;

    let pairs = ordered_pairs(data.n_levels());
    let specs: Vec<MatchSpec> = pairs
        .iter()
        .map(|&(t, s)| config.matching.spec(t, s))
        .collect();
    let draws = match &config.bootstrap {
        Some(b) => Some(bootstrap_replicates(
            data,
            &config.fit,
            &specs,
            &BootstrapConfig {
                replicates: b.replicates,
                seed: b.seed,
                trim: config.matching.trim,
            },
        )?),
        None => None,
    };

    let mut reports = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let n_treated = table
            .treatments()
            .iter()
            .filter(|&&t| t == spec.target)
            .count();
        let mut report = PairReport {
            target: spec.target,
            comparison: spec.comparison,
            target_label: data.level_label(spec.target).to_string(),
            comparison_label: data.level_label(spec.comparison).to_string(),
            n_treated,
            n_matched: 0,
            n_dropped: n_treated,
            n_distinct_comparisons: 0,
            att: None,
            error: None,
            balance: None,
            matches: None,
        };
        let matches = match match_pair(&table, spec) {
            Ok(m) => m,
            Err(e @ MatchError::EmptyGroup(_)) => {
                report.error = Some(e.to_string());
                reports.push(report);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        report.n_matched = matches.matches.len();
        report.n_dropped = matches.dropped.len();
        report.n_distinct_comparisons = matches.multiplicity.len();
        report.balance = Some(balance_report(data, &table, &matches)?);
        match att(&matches, data) {
            Ok(estimate) => {
                report.att = Some(match &draws {
                    Some(d) => with_bootstrap(estimate, &d[i])?,
                    None => estimate,
                });
            }
            Err(e @ EffectsError::NoMatches { .. }) => report.error = Some(e.to_string()),
            Err(e) => return Err(e.into()),
        }
        report.matches = Some(matches);
        reports.push(report);
    }

    Ok(Report {
        tool: ToolInfo::default(),
        generated_at: unix_now(),
        config: config.clone(),
        data: DataSummary::new(data),
        model: ModelSummary::new(data, &fitted),
        trimmed_ids,
        pairs: reports,
    })
}

/// Loads the CSV named in `config` and runs the full pipeline.
pub fn run(config: &RunConfig) -> Result<Report, PipelineError> {
    let data = load_csv(&config.input, &config.roles)?;
    analyze(&data, config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    /// Serialized report with `generated_at` zeroed.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.generated_at = 0;
        serde_json::to_string_pretty(&r).expect("report is always serializable")
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let d = &self.data;
        let m = &self.model;
        let _ = writeln!(
            out,
            "{} {}: {} units, {} treatment levels ({}), metric {}",
            self.tool.name,
            self.tool.version,
            d.n_units,
            d.n_levels,
            d.level_labels.join(", "),
            self.config.matching.metric
        );
        let _ = writeln!(
            out,
            "propensity model: {} after {} iterations (gradient norm {:.2e}, log-likelihood {:.4}), reference level {}",
            if m.converged { "converged" } else { "NOT converged" },
            m.iterations,
            m.final_gradient_norm,
            m.log_likelihood,
            m.reference_label
        );
        if !self.trimmed_ids.is_empty() {
            let _ = writeln!(
                out,
                "trimmed {} units outside overlap",
                self.trimmed_ids.len()
            );
        }
        let _ = writeln!(
            out,
            "\n{:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>20}  flagged",
            "target", "comparison", "ATT", "SE", "matched", "dropped", "95% CI"
        );
        for p in &self.pairs {
            let (est, se, ci) = match &p.att {
                Some(a) => (
                    format!("{:.4}", a.estimate),
                    fmt_opt(a.se),
                    a.ci95
                        .map_or_else(|| "-".into(), |c| format!("[{:.3}, {:.3}]", c[0], c[1])),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let flagged: Vec<&str> = p
                .balance
                .iter()
                .flat_map(|b| &b.covariates)
                .filter(|c| c.flagged)
                .map(|c| c.name.as_str())
                .collect();
            let _ = writeln!(
                out,
                "{:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>20}  {}",
                p.target_label,
                p.comparison_label,
                est,
                se,
                p.n_matched,
                p.n_dropped,
                ci,
                if flagged.is_empty() {
                    "-".into()
                } else {
                    flagged.join(",")
                }
            );
            if let Some(e) = &p.error {
                let _ = writeln!(out, "{:>10} {}", "", e);
            }
        }
        out
    }
}

/// Output of the `fit` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub tool: ToolInfo,
    pub fit_options: FitOptions,
    pub dataset: Dataset,
    pub model: ModelSummary,
    pub fitted: FittedGps,
}

impl FitArtifact {
    pub fn new(data: Dataset, fit_options: FitOptions, fitted: FittedGps) -> Self {
        Self {
            tool: ToolInfo::default(),
            model: ModelSummary::new(&data, &fitted),
            fit_options,
            dataset: data,
            fitted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatches {
    pub target: usize,
    pub comparison: usize,
    pub matches: Option<MatchSet>,
    pub error: Option<String>,
}

/// Output of the `match` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchArtifact {
    pub tool: ToolInfo,
    pub fit_options: FitOptions,
    pub matching: MatchOptions,
    pub dataset: Dataset,
    pub table: PropensityTable,
    pub trimmed_ids: Vec<i64>,
    pub pairs: Vec<PairMatches>,
}

/// Matches the requested pairs (all ordered pairs when `pairs` is `None`).
pub fn match_stage(
    fit: &FitArtifact,
    matching: &MatchOptions,
    pairs: Option<Vec<(usize, usize)>>,
) -> Result<MatchArtifact, PipelineError> {
    matching.validate()?;
    let (table, trimmed_ids) = table_stage(&fit.dataset, &fit.fitted, matching.trim)?;
    let pairs = pairs.unwrap_or_else(|| ordered_pairs(fit.dataset.n_levels()));
    let mut out = Vec::with_capacity(pairs.len());
    for (t, s) in pairs {
        let spec = matching.spec(t, s);
        spec.validate(fit.dataset.n_levels())?;
        out.push(match match_pair(&table, &spec) {
            Ok(m) => PairMatches {
                target: t,
                comparison: s,
                matches: Some(m),
                error: None,
            },
            Err(e) => PairMatches {
                target: t,
                comparison: s,
                matches: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(MatchArtifact {
        tool: ToolInfo::default(),
        fit_options: fit.fit_options.clone(),
        matching: matching.clone(),
        dataset: fit.dataset.clone(),
        table,
        trimmed_ids,
        pairs: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttRow {
    pub target: usize,
    pub comparison: usize,
    pub target_label: String,
    pub comparison_label: String,
    pub att: Option<AttEstimate>,
    pub error: Option<String>,
}

/// Output of the `att` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttArtifact {
    pub tool: ToolInfo,
    pub bootstrap: Option<BootstrapOptions>,
    pub estimates: Vec<AttRow>,
}

pub fn att_stage(
    matched: &MatchArtifact,
    bootstrap: Option<&BootstrapOptions>,
) -> Result<AttArtifact, PipelineError> {
    let data = &matched.dataset;
    let draws = match bootstrap {
        Some(b) => {
            let specs: Vec<MatchSpec> = matched
                .pairs
                .iter()
                .map(|p| matched.matching.spec(p.target, p.comparison))
                .collect();
            Some(bootstrap_replicates(
                data,
                &matched.fit_options,
                &specs,
                &BootstrapConfig {
                    replicates: b.replicates,
                    seed: b.seed,
                    trim: matched.matching.trim,
                },
            )?)
        }
        None => None,
    };
    let mut estimates = Vec::with_capacity(matched.pairs.len());
    for (i, p) in matched.pairs.iter().enumerate() {
        let mut row = AttRow {
            target: p.target,
            comparison: p.comparison,
            target_label: data.level_label(p.target).to_string(),
            comparison_label: data.level_label(p.comparison).to_string(),
            att: None,
            error: p.error.clone(),
        };
        if let Some(m) = &p.matches {
            match att(m, data) {
                Ok(e) => {
                    row.att = Some(match &draws {
                        Some(d) => with_bootstrap(e, &d[i])?,
                        None => e,
                    })
                }
                Err(e @ EffectsError::NoMatches { .. }) => row.error = Some(e.to_string()),
                Err(e) => return Err(e.into()),
            }
        }
        estimates.push(row);
    }
    Ok(AttArtifact {
        tool: ToolInfo::default(),
        bootstrap: bootstrap.cloned(),
        estimates,
    })
}
