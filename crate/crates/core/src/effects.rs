//! Average treatment effect on the treated for ordered treatment pairs.
//!
//! For a pair `(t, s)` the estimate is the mean over matched units of level
//! `t` of `Yᵢ − mean(Y of i's matched comparisons)`. Each treated unit counts
//! once; its `k` comparisons count `1/k` each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Unit};
use crate::diagnostics::trim;
use crate::gps::{fit, FitOptions, GpsError};
use crate::matcher::{match_pair, MatchError, MatchSet, MatchSpec, PropensityTable};

/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EffectsError {
    #[error("no treated unit of level {target} was matched to level {comparison}")]
    NoMatches { target: usize, comparison: usize },
    #[error("unit {0} is in the match set but not in the dataset")]
    UnknownId(i64),
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error(
        "{failed} of {replicates} bootstrap replicates failed for pair ({target}, {comparison})"
    )]
    TooManyFailures {
        target: usize,
        comparison: usize,
        failed: usize,
        replicates: usize,
    },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Gps(#[from] GpsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttEstimate {
    pub target: usize,
    pub comparison: usize,
    pub estimate: f64,
    pub n_treated_used: usize,
    pub n_dropped: usize,
    pub se: Option<f64>,
    pub ci95: Option<[f64; 2]>,
    pub replicate_failures: Option<usize>,
}

pub fn att(matches: &MatchSet, data: &Dataset) -> Result<AttEstimate, EffectsError> {
    let spec = &matches.spec;
    if matches.matches.is_empty() {
        return Err(EffectsError::NoMatches {
            target: spec.target,
            comparison: spec.comparison,
        });
    }
    let outcome = data.outcome_by_id();
    let y = |id: i64| outcome.get(&id).copied().ok_or(EffectsError::UnknownId(id));
    let mut total = 0.0;
    for m in &matches.matches {
        let mut counterfactual = 0.0;
        for n in &m.neighbours {
            counterfactual += y(n.id)?;
        }
        total += y(m.treated_id)? - counterfactual / m.neighbours.len() as f64;
    }
    Ok(AttEstimate {
        target: spec.target,
        comparison: spec.comparison,
        estimate: total / matches.matches.len() as f64,
        n_treated_used: matches.matches.len(),
        n_dropped: matches.dropped.len(),
        se: None,
        ci95: None,
        replicate_failures: None,
    })
}

/// Every ordered pair `(t, s)` with `t ≠ s`, in lexicographic order.
pub fn ordered_pairs(n_levels: usize) -> Vec<(usize, usize)> {
    (1..=n_levels)
        .flat_map(|t| (1..=n_levels).filter(move |&s| s != t).map(move |s| (t, s)))
        .collect()
}

/// One cell of the all-pairs table; a pair that could not be estimated keeps
/// its error message instead of failing the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub target: usize,
    pub comparison: usize,
    pub estimate: Option<AttEstimate>,
    pub error: Option<String>,
}

pub fn att_all_pairs(
    table: &PropensityTable,
    data: &Dataset,
    template: &MatchSpec,
) -> Vec<PairEstimate> {
    ordered_pairs(table.n_levels())
        .into_iter()
        .map(|(t, s)| {
            let result = match_pair(table, &template.for_pair(t, s))
                .map_err(EffectsError::from)
                .and_then(|m| att(&m, data));
            match result {
                Ok(e) => PairEstimate {
                    target: t,
                    comparison: s,
                    estimate: Some(e),
                    error: None,
                },
                Err(e) => PairEstimate {
                    target: t,
                    comparison: s,
                    estimate: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Trimming threshold re-applied inside every replicate.
    pub trim: Option<f64>,
}

/// Replicate estimates for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub target: usize,
    pub comparison: usize,
    pub estimates: Vec<f64>,
    pub failures: usize,
}

/// Resamples `data` for replicate `index`. The stream is ChaCha8 seeded with
/// `seed` on stream `index`, so a replicate does not depend on scheduling.
/// Resampled units are re-numbered `0..n` in draw order.
pub fn resample(data: &Dataset, seed: u64, index: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = data.len();
    let units = (0..n)
        .map(|i| {
            let src = &data.units()[rng.random_range(0..n)];
            Unit {
                id: i as i64,
                ..src.clone()
            }
        })
        .collect();
    Dataset::new(units, data.n_levels())?
        .with_covariate_names(data.covariate_names().to_vec())?
        .with_level_labels(data.level_labels().to_vec())
}

fn replicate(
    data: &Dataset,
    options: &FitOptions,
    specs: &[MatchSpec],
    config: &BootstrapConfig,
    index: u64,
) -> Vec<Option<f64>> {
    let fitted = resample(data, config.seed, index).ok().and_then(|d| {
        fit(&d, options)
            .ok()
            .filter(|f| f.converged)
            .map(|f| (d, f))
    });
    let Some((sample, fitted)) = fitted else {
        return vec![None; specs.len()];
    };
    let Ok(mut table) = PropensityTable::from_fit(&sample, &fitted) else {
        return vec![None; specs.len()];
    };
    if let Some(threshold) = config.trim {
        table = trim(&table, threshold).0;
    }
    specs
        .iter()
        .map(|spec| {
            match_pair(&table, spec)
                .ok()
                .and_then(|m| att(&m, &sample).ok())
                .map(|e| e.estimate)
        })
        .collect()
}

/// Runs `config.replicates` bootstrap replicates, re-fitting the propensity
/// model and re-matching inside each one, for every spec at once.
pub fn bootstrap_replicates(
    data: &Dataset,
    options: &FitOptions,
    specs: &[MatchSpec],
    config: &BootstrapConfig,
) -> Result<Vec<BootstrapDraws>, EffectsError> {
    if config.replicates < 2 {
        return Err(EffectsError::TooFewReplicates(config.replicates));
    }
    let per_replicate: Vec<Vec<Option<f64>>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| replicate(data, options, specs, config, r))
        .collect();
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let column = per_replicate.iter().map(|r| r[i]);
            BootstrapDraws {
                target: spec.target,
                comparison: spec.comparison,
                estimates: column.clone().flatten().collect(),
                failures: column.filter(Option::is_none).count(),
            }
        })
        .collect())
}

/// Type-7 (linear interpolation) sample quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Adds the bootstrap standard error and percentile interval to `estimate`.
pub fn with_bootstrap(
    mut estimate: AttEstimate,
    draws: &BootstrapDraws,
) -> Result<AttEstimate, EffectsError> {
    let replicates = draws.estimates.len() + draws.failures;
    if draws.failures as f64 > MAX_FAILED_SHARE * replicates as f64 || draws.estimates.len() < 2 {
        return Err(EffectsError::TooManyFailures {
            target: draws.target,
            comparison: draws.comparison,
            failed: draws.failures,
            replicates,
        });
    }
    let m = draws.estimates.len() as f64;
    let mean = draws.estimates.iter().sum::<f64>() / m;
    let var = draws
        .estimates
        .iter()
        .map(|e| (e - mean).powi(2))
        .sum::<f64>()
        / (m - 1.0);
    let mut sorted = draws.estimates.clone();
    sorted.sort_by(f64::total_cmp);
    estimate.se = Some(var.sqrt());
    estimate.ci95 = Some([quantile(&sorted, 0.025), quantile(&sorted, 0.975)]);
    estimate.replicate_failures = Some(draws.failures);
    Ok(estimate)
}

/// Point estimate on `data` plus a nonparametric bootstrap standard error.
pub fn bootstrap_se(
    data: &Dataset,
    options: &FitOptions,
    spec: &MatchSpec,
    config: &BootstrapConfig,
) -> Result<AttEstimate, EffectsError> {
    if config.replicates < 2 {
        return Err(EffectsError::TooFewReplicates(config.replicates));
    }
    let fitted = fit(data, options)?;
    fitted.require_converged()?;
    let mut table = PropensityTable::from_fit(data, &fitted)?;
    if let Some(threshold) = config.trim {
        table = trim(&table, threshold).0;
    }
    let estimate = att(&match_pair(&table, spec)?, data)?;
    let draws = bootstrap_replicates(data, options, std::slice::from_ref(spec), config)?;
    with_bootstrap(estimate, &draws[0])
}
