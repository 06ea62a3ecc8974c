//! Covariate balance and overlap reporting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::matcher::{MatchSet, PropensityTable};

/// Absolute standardized mean difference above which a covariate is flagged.
pub const SMD_WARN_THRESHOLD: f64 = 0.1;

/// Default lower bound on every score entry when trimming is enabled.
pub const DEFAULT_TRIM_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("cannot compute a standardized mean difference with an empty group")]
    EmptyGroup,
    #[error("unit {0} is in the match set but not in the dataset")]
    UnknownId(i64),
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `(mean_A − mean_B) / √((var_A + var_B) / 2)` with sample variances.
/// Returns 0 when both the difference and the pooled spread are zero.
pub fn smd(a: &[f64], b: &[f64]) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::EmptyGroup);
    }
    let (mean_a, var_a) = mean_var(a);
    let (mean_b, var_b) = mean_var(b);
    let diff = mean_a - mean_b;
    let pooled = ((var_a + var_b) / 2.0).sqrt();
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub name: String,
    pub smd_before: f64,
    pub smd_after: Option<f64>,
    /// `|smd_after| > SMD_WARN_THRESHOLD`.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOverlap {
    pub level: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub target: usize,
    pub comparison: usize,
    pub covariates: Vec<CovariateBalance>,
    pub overlap: Vec<LevelOverlap>,
    pub n_dropped: usize,
}

/// Minimum and maximum of every score column.
pub fn overlap(table: &PropensityTable) -> Vec<LevelOverlap> {
    (0..table.n_levels())
        .map(|j| {
            let column = table.rows().iter().map(|r| r.parts()[j]);
            LevelOverlap {
                level: j + 1,
                min: column.clone().fold(f64::INFINITY, f64::min),
                max: column.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Drops units whose score has any entry below `threshold`.
pub fn trim(table: &PropensityTable, threshold: f64) -> (PropensityTable, Vec<i64>) {
    let keep = |row: &crate::coda::Composition| row.parts().iter().all(|&p| p >= threshold);
    let kept = table.retain(|_, row| keep(row));
    let removed = table
        .ids()
        .iter()
        .zip(table.rows())
        .filter(|(_, row)| !keep(row))
        .map(|(id, _)| *id)
        .collect();
    (kept, removed)
}

/// SMDs before matching (all of group t vs all of group s among the units in
/// `table`) and after matching (matched treated units vs their comparisons,
/// each comparison repeated by its multiplicity).
pub fn balance_report(
    data: &Dataset,
    table: &PropensityTable,
    matches: &MatchSet,
) -> Result<BalanceReport, DiagnosticsError> {
    let index = data.index_by_id();
    let units = data.units();
    let lookup = |id: i64| {
        index
            .get(&id)
            .map(|&i| &units[i])
            .ok_or(DiagnosticsError::UnknownId(id))
    };
    let (t, s) = (matches.spec.target, matches.spec.comparison);
    let in_group = |level: usize| -> Vec<usize> {
        table
            .ids()
            .iter()
            .zip(table.treatments())
            .filter(|(_, &tr)| tr == level)
            .filter_map(|(id, _)| index.get(id).copied())
            .collect()
    };
    let group_t = in_group(t);
    let group_s = in_group(s);

    let matched_t = matches
        .matches
        .iter()
        .map(|m| lookup(m.treated_id))
        .collect::<Result<Vec<_>, _>>()?;
    let mut matched_s = Vec::new();
    for (id, count) in &matches.multiplicity {
        let u = lookup(*id)?;
        matched_s.extend(std::iter::repeat_n(u, *count));
    }

    let mut covariates = Vec::with_capacity(data.n_covariates());
    for (c, name) in data.covariate_names().iter().enumerate() {
        let column =
            |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| units[i].covariates[c]).collect() };
        let smd_before = smd(&column(&group_t), &column(&group_s))?;
        let smd_after = if matched_t.is_empty() {
            None
        } else {
            let a: Vec<f64> = matched_t.iter().map(|u| u.covariates[c]).collect();
            let b: Vec<f64> = matched_s.iter().map(|u| u.covariates[c]).collect();
            Some(smd(&a, &b)?)
        };
        covariates.push(CovariateBalance {
            name: name.clone(),
            smd_before,
            smd_after,
            flagged: smd_after.is_some_and(|v| v.abs() > SMD_WARN_THRESHOLD),
        });
    }
    Ok(BalanceReport {
        target: t,
        comparison: s,
        covariates,
        overlap: overlap(table),
        n_dropped: matches.dropped.len(),
    })
}
