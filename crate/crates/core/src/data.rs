use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("duplicate unit id {0}")]
    DuplicateId(i64),
    #[error("unit {id} has {got} covariates, expected {expected}")]
    CovariateLength {
        id: i64,
        got: usize,
        expected: usize,
    },
    #[error("unit {id} has treatment {treatment}, outside 1..={n_levels}")]
    TreatmentOutOfRange {
        id: i64,
        treatment: usize,
        n_levels: usize,
    },
    #[error("treatment level {0} has no units")]
    EmptyLevel(usize),
    #[error("at least 2 treatment levels are required, got {0}")]
    SingleLevel(usize),
    #[error("unit {id} has a non-finite value in {field}")]
    NonFinite { id: i64, field: String },
    #[error("{got} names supplied for {expected} {what}")]
    NameCount {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// One observational unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: i64,
    pub covariates: Vec<f64>,
    /// Treatment level in `1..=n_levels`.
    pub treatment: usize,
    pub outcome: f64,
}

/// Units with covariates, a treatment level and an observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct Dataset {
    units: Vec<Unit>,
    n_levels: usize,
    n_covariates: usize,
    covariate_names: Vec<String>,
    level_labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawDataset {
    units: Vec<Unit>,
    n_levels: usize,
    n_covariates: usize,
    covariate_names: Vec<String>,
    level_labels: Vec<String>,
}

impl TryFrom<RawDataset> for Dataset {
    type Error = DataError;

    fn try_from(raw: RawDataset) -> Result<Self, Self::Error> {
        let ds = Dataset::new(raw.units, raw.n_levels)?
            .with_covariate_names(raw.covariate_names)?
            .with_level_labels(raw.level_labels)?;
        if ds.n_covariates != raw.n_covariates {
            return Err(DataError::NameCount {
                what: "covariates",
                got: raw.n_covariates,
                expected: ds.n_covariates,
            });
        }
        Ok(ds)
    }
}

impl Dataset {
    /// Validates and wraps `units`. Every level in `1..=n_levels` must be
    /// observed at least once.
    pub fn new(units: Vec<Unit>, n_levels: usize) -> Result<Self, DataError> {
        if n_levels < 2 {
            return Err(DataError::SingleLevel(n_levels));
        }
        let n_covariates = units.first().map_or(0, |u| u.covariates.len());
        let mut seen = HashSet::with_capacity(units.len());
        let mut counts = vec![0usize; n_levels];
        for u in &units {
            if !seen.insert(u.id) {
                return Err(DataError::DuplicateId(u.id));
            }
            if u.covariates.len() != n_covariates {
                return Err(DataError::CovariateLength {
                    id: u.id,
                    got: u.covariates.len(),
                    expected: n_covariates,
                });
            }
            if u.treatment == 0 || u.treatment > n_levels {
                return Err(DataError::TreatmentOutOfRange {
                    id: u.id,
                    treatment: u.treatment,
                    n_levels,
                });
            }
            if !u.outcome.is_finite() {
                return Err(DataError::NonFinite {
                    id: u.id,
                    field: "outcome".into(),
                });
            }
            if u.covariates.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite {
                    id: u.id,
                    field: "covariates".into(),
                });
            }
            counts[u.treatment - 1] += 1;
        }
        if let Some(level) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyLevel(level + 1));
        }
        Ok(Self {
            units,
            n_levels,
            n_covariates,
            covariate_names: (1..=n_covariates).map(|k| format!("x{k}")).collect(),
            level_labels: (1..=n_levels).map(|t| t.to_string()).collect(),
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.n_covariates {
            return Err(DataError::NameCount {
                what: "covariates",
                got: names.len(),
                expected: self.n_covariates,
            });
        }
        self.covariate_names = names;
        Ok(self)
    }

    /// Original treatment labels; label `i` corresponds to level `i + 1`.
    pub fn with_level_labels(mut self, labels: Vec<String>) -> Result<Self, DataError> {
        if labels.len() != self.n_levels {
            return Err(DataError::NameCount {
                what: "treatment levels",
                got: labels.len(),
                expected: self.n_levels,
            });
        }
        self.level_labels = labels;
        Ok(self)
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn level_labels(&self) -> &[String] {
        &self.level_labels
    }

    pub fn level_label(&self, level: usize) -> &str {
        &self.level_labels[level - 1]
    }

    /// Level (1-based) carrying `label`, if any.
    pub fn level_of_label(&self, label: &str) -> Option<usize> {
        self.level_labels
            .iter()
            .position(|l| l == label)
            .map(|i| i + 1)
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_levels];
        for u in &self.units {
            counts[u.treatment - 1] += 1;
        }
        counts
    }

    pub fn outcome_by_id(&self) -> HashMap<i64, f64> {
        self.units.iter().map(|u| (u.id, u.outcome)).collect()
    }

    pub fn index_by_id(&self) -> HashMap<i64, usize> {
        self.units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id, i))
            .collect()
    }
}
