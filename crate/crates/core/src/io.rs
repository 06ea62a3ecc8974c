//! CSV ingestion and export.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Unit};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column '{0}' not found in header")]
    MissingColumn(String),
    #[error("column '{0}' is assigned more than one role")]
    OverlappingRoles(String),
    #[error("line {line}: column '{column}' is empty")]
    MissingValue { line: u64, column: String },
    #[error("line {line}: column '{column}' has non-numeric value '{value}'")]
    NonNumericValue {
        line: u64,
        column: String,
        value: String,
    },
    #[error("duplicate id {0}")]
    DuplicateId(i64),
    #[error("treatment column has {0} distinct label(s); at least 2 are required")]
    SingleLevel(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which CSV columns hold the id, treatment, outcome and covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub id: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl ColumnRoles {
    pub fn validate(&self) -> Result<(), InputError> {
        let mut seen = HashSet::new();
        let all = [&self.id, &self.treatment, &self.outcome]
            .into_iter()
            .chain(&self.covariates);
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(InputError::OverlappingRoles(name.clone()));
            }
        }
        Ok(())
    }
}

/// Orders treatment labels: numerically when every label is a number,
/// lexicographically otherwise.
pub fn sort_labels(labels: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut labels: Vec<String> = labels
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(labels).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        labels = paired.into_iter().map(|(_, l)| l).collect();
    }
    labels
}

pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset, InputError> {
    let file = std::fs::File::open(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, roles)
}

pub fn read_csv(reader: impl Read, roles: &ColumnRoles) -> Result<Dataset, InputError> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| InputError::MissingColumn(name.to_string()))
    };
    let id_col = column(&roles.id)?;
    let treat_col = column(&roles.treatment)?;
    let out_col = column(&roles.outcome)?;
    let cov_cols = roles
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>, _>>()?;

    struct Row {
        id: i64,
        label: String,
        outcome: f64,
        covariates: Vec<f64>,
    }
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |col: usize, name: &str| -> Result<&str, InputError> {
            match record.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(InputError::MissingValue {
                    line,
                    column: name.to_string(),
                }),
            }
        };
        let number = |col: usize, name: &str| -> Result<f64, InputError> {
            let raw = field(col, name)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| InputError::NonNumericValue {
                    line,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        let raw_id = field(id_col, &roles.id)?;
        let id = raw_id
            .parse::<i64>()
            .map_err(|_| InputError::NonNumericValue {
                line,
                column: roles.id.clone(),
                value: raw_id.to_string(),
            })?;
        if !ids.insert(id) {
            return Err(InputError::DuplicateId(id));
        }
        rows.push(Row {
            id,
            label: field(treat_col, &roles.treatment)?.to_string(),
            outcome: number(out_col, &roles.outcome)?,
            covariates: cov_cols
                .iter()
                .zip(&roles.covariates)
                .map(|(&c, name)| number(c, name))
                .collect::<Result<_, _>>()?,
        });
    }

    let labels = sort_labels(rows.iter().map(|r| r.label.clone()));
    if labels.len() < 2 {
        return Err(InputError::SingleLevel(labels.len()));
    }
    let level: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1))
        .collect();
    let units = rows
        .iter()
        .map(|r| Unit {
            id: r.id,
            covariates: r.covariates.clone(),
            treatment: level[r.label.as_str()],
            outcome: r.outcome,
        })
        .collect();
    Ok(Dataset::new(units, labels.len())?
        .with_covariate_names(roles.covariates.clone())?
        .with_level_labels(labels)?)
}

/// Writes `id,treatment,outcome,<covariates…>` with the original labels.
pub fn write_csv(data: &Dataset, writer: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "treatment".into(), "outcome".into()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for u in data.units() {
        let mut rec = vec![
            u.id.to_string(),
            data.level_label(u.treatment).to_string(),
            u.outcome.to_string(),
        ];
        rec.extend(u.covariates.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles(covs: &[&str]) -> ColumnRoles {
        ColumnRoles {
            id: "id".into(),
            treatment: "arm".into(),
            outcome: "y".into(),
            covariates: covs.iter().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn reads_well_formed_file() {
        let csv = "id,arm,y,age\n1,a,2.5,30\n2,b,3.0,41\n3,c,1.0,25\n";
        let data = read_csv(csv.as_bytes(), &roles(&["age"])).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.level_labels(), &["a", "b", "c"]);
        assert_eq!(data.units()[1].treatment, 2);
        assert_eq!(data.units()[2].covariates, vec![25.0]);
    }

    #[test]
    fn labels_are_sorted_deterministically() {
        let csv = "id,arm,y,age\n1,c,1,1\n2,a,1,1\n3,b,1,1\n";
        let data = read_csv(csv.as_bytes(), &roles(&["age"])).unwrap();
        assert_eq!(data.level_labels(), &["a", "b", "c"]);
        assert_eq!(data.units()[0].treatment, 3);
        assert_eq!(
            sort_labels(["10", "2", "1"].map(String::from)),
            vec!["1", "2", "10"]
        );
    }

    #[test]
    fn reports_input_errors() {
        let dup = "id,arm,y,age\n1,a,1,1\n1,b,1,1\n";
        assert!(matches!(
            read_csv(dup.as_bytes(), &roles(&["age"])),
            Err(InputError::DuplicateId(1))
        ));
        let missing = "id,arm,y\n1,a,1\n";
        assert!(matches!(
            read_csv(missing.as_bytes(), &roles(&["age"])),
            Err(InputError::MissingColumn(c)) if c == "age"
        ));
        let text = "id,arm,y,age\n1,a,1,old\n2,b,1,3\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &roles(&["age"])),
            Err(InputError::NonNumericValue { line: 2, .. })
        ));
        let blank = "id,arm,y,age\n1,a,,1\n2,b,1,3\n";
        assert!(matches!(
            read_csv(blank.as_bytes(), &roles(&["age"])),
            Err(InputError::MissingValue { line: 2, .. })
        ));
        let single = "id,arm,y,age\n1,a,1,1\n2,a,1,1\n";
        assert!(matches!(
            read_csv(single.as_bytes(), &roles(&["age"])),
            Err(InputError::SingleLevel(1))
        ));
        assert!(matches!(
            read_csv(single.as_bytes(), &roles(&["y"])),
            Err(InputError::OverlappingRoles(_))
        ));
    }

    #[test]
    fn write_then_read_preserves_values() {
        let csv = "id,arm,y,age\n4,t1,0.1,-3.25\n9,t0,1e-7,2\n";
        let data = read_csv(csv.as_bytes(), &roles(&["age"])).unwrap();
        let mut out = Vec::new();
        write_csv(&data, &mut out).unwrap();
        let again = read_csv(
            out.as_slice(),
            &ColumnRoles {
                treatment: "treatment".into(),
                outcome: "outcome".into(),
                ..roles(&["age"])
            },
        )
        .unwrap();
        assert_eq!(again, data);
    }
}
