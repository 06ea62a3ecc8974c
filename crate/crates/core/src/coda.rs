//! Compositional geometry on the probability simplex.
//!
//! A generalized propensity score vector is a composition: strictly positive
//! parts that sum to one. Distances between such vectors are measured either
//! with the Aitchison distance (Euclidean distance between centred log-ratio
//! images) or with the plain Euclidean distance on the parts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Accepted deviation of `Σ parts` from 1 for inputs that claim to be closed.
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

/// Default pre-closure floor for user-supplied propensity rows.
pub const DEFAULT_ZERO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodaError {
    #[error("composition part {index} is not strictly positive ({value})")]
    NonPositivePart { index: usize, value: f64 },
    #[error("a composition needs at least 2 parts, got {0}")]
    DimensionTooSmall(usize),
    #[error("dimension mismatch: {left} vs {right} parts")]
    DimensionMismatch { left: usize, right: usize },
    #[error("parts sum to {sum}, which is not within {CLOSURE_TOLERANCE} of 1")]
    NotClosed { sum: f64 },
}

/// A point on the D-part simplex: every part is strictly positive and the
/// parts sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Composition {
    parts: Vec<f64>,
}

impl Composition {
    /// Closes a vector of positive reals onto the simplex.
    pub fn close(raw: &[f64]) -> Result<Self, CodaError> {
        if raw.len() < 2 {
            return Err(CodaError::DimensionTooSmall(raw.len()));
        }
        for (index, &value) in raw.iter().enumerate() {
            // NaN fails this comparison too.
            if value.is_nan() || value <= 0.0 || value.is_infinite() {
                return Err(CodaError::NonPositivePart { index, value });
            }
        }
        let total: f64 = raw.iter().sum();
        Ok(Self {
            parts: raw.iter().map(|v| v / total).collect(),
        })
    }

    /// Accepts a vector that is already closed up to [`CLOSURE_TOLERANCE`]
    /// and re-closes it exactly.
    pub fn from_closed(parts: &[f64]) -> Result<Self, CodaError> {
        let c = Self::close(parts)?;
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > CLOSURE_TOLERANCE {
            return Err(CodaError::NotClosed { sum });
        }
        Ok(c)
    }

    /// Closes after replacing every part below `floor` (zeros included) by
    /// `floor`. Negative or non-finite parts are still rejected.
    pub fn close_with_floor(raw: &[f64], floor: f64) -> Result<Self, CodaError> {
        let mut floored = Vec::with_capacity(raw.len());
        for (index, &value) in raw.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                return Err(CodaError::NonPositivePart { index, value });
            }
            floored.push(value.max(floor));
        }
        Self::close(&floored)
    }

    /// The uniform composition with `dim` parts (the perturbation identity).
    pub fn uniform(dim: usize) -> Result<Self, CodaError> {
        Self::close(&vec![1.0; dim])
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }

    /// `(∏ parts)^(1/D)`, evaluated in log space.
    pub fn geometric_mean(&self) -> f64 {
        let mean_log = self.parts.iter().map(|p| p.ln()).sum::<f64>() / self.dim() as f64;
        mean_log.exp()
    }

    /// Centred log-ratio transform, `ln(part / geometric_mean)`.
    pub fn clr(&self) -> ClrVector {
        // Logs are taken relative to the first part before centring so that
        // equal parts map to exactly zero.
        let logs: Vec<f64> = self.parts.iter().map(|p| p.ln()).collect();
        let anchor = logs[0];
        let shifted: Vec<f64> = logs.iter().map(|l| l - anchor).collect();
        let centre = shifted.iter().sum::<f64>() / shifted.len() as f64;
        ClrVector {
            coords: shifted.into_iter().map(|s| s - centre).collect(),
        }
    }

    /// Perturbation: component-wise product followed by closure.
    pub fn perturb(&self, other: &Composition) -> Result<Composition, CodaError> {
        check_dims(self, other)?;
        let product: Vec<f64> = self
            .parts
            .iter()
            .zip(&other.parts)
            .map(|(a, b)| a * b)
            .collect();
        Composition::close(&product)
    }

    /// Applies an index permutation: part `i` of the result is part
    /// `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Composition, CodaError> {
        if order.len() != self.dim() {
            return Err(CodaError::DimensionMismatch {
                left: self.dim(),
                right: order.len(),
            });
        }
        Composition::close(&order.iter().map(|&i| self.parts[i]).collect::<Vec<_>>())
    }
}

impl TryFrom<Vec<f64>> for Composition {
    type Error = CodaError;

    fn try_from(parts: Vec<f64>) -> Result<Self, Self::Error> {
        Composition::from_closed(&parts)
    }
}

impl From<Composition> for Vec<f64> {
    fn from(c: Composition) -> Self {
        c.parts
    }
}

/// Image of a composition under the clr transform; coordinates sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClrVector {
    coords: Vec<f64>,
}

impl ClrVector {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

fn check_dims(a: &Composition, b: &Composition) -> Result<(), CodaError> {
    if a.dim() != b.dim() {
        return Err(CodaError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Aitchison distance: Euclidean distance between the clr images.
pub fn aitchison_distance(a: &Composition, b: &Composition) -> Result<f64, CodaError> {
    check_dims(a, b)?;
    Ok(euclidean(a.clr().coords(), b.clr().coords()))
}

/// Plain Euclidean distance between the parts.
pub fn euclidean_distance(a: &Composition, b: &Composition) -> Result<f64, CodaError> {
    check_dims(a, b)?;
    Ok(euclidean(a.parts(), b.parts()))
}

/// Distance used to compare propensity score vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Aitchison,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &Composition, b: &Composition) -> Result<f64, CodaError> {
        match self {
            Metric::Aitchison => aitchison_distance(a, b),
            Metric::Euclidean => euclidean_distance(a, b),
        }
    }

    /// Coordinates in which this metric is the ordinary Euclidean distance.
    pub fn embed(self, c: &Composition) -> Vec<f64> {
        match self {
            Metric::Aitchison => c.clr().into_coords(),
            Metric::Euclidean => c.parts().to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Aitchison => "aitchison",
            Metric::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "aitchison" => Ok(Metric::Aitchison),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!(
                "unknown metric '{other}' (expected aitchison or euclidean)"
            )),
        }
    }
}
