//! Generalized propensity score estimation by multinomial logistic regression.
//!
//! The model is `p(t|x) = exp(xᵀβ_t) / Σ_s exp(xᵀβ_s)` with the last level as
//! the reference (`β_T ≡ 0`). Coefficients are laid out row-major as a
//! `(T−1) × (K+1)` matrix whose first column is the intercept.
//!
//! Fitting maximizes the log-likelihood with full Newton–Raphson steps on a
//! ridge-stabilized Hessian, halving the step until the likelihood does not
//! decrease.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{CodaError, Composition};
use crate::data::Dataset;

/// Maximum number of step halvings per Newton iteration.
pub const MAX_HALVINGS: usize = 20;

/// Largest absolute coefficient (standardized scale) before the fit is
/// declared separated. `e^30` is an odds ratio no overlapping design produces.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpsError {
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Hessian is numerically singular at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("Newton iterations did not converge after {iterations} steps (gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("treatment level {0} has no units")]
    EmptyLevel(usize),
    #[error("{n} units cannot identify {params} parameters")]
    TooFewUnits { n: usize, params: usize },
    #[error("predicted score for unit {id} left the simplex interior: {source}")]
    Degenerate { id: i64, source: CodaError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub ridge: f64,
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            ridge: 1e-8,
            standardize: true,
        }
    }
}

/// Multinomial-logit coefficients for levels `1..T−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    n_levels: usize,
    n_covariates: usize,
    values: Vec<f64>,
}

impl Coefficients {
    pub fn zeros(n_levels: usize, n_covariates: usize) -> Self {
        Self {
            n_levels,
            n_covariates,
            values: vec![0.0; (n_levels - 1) * (n_covariates + 1)],
        }
    }

    /// Builds from row-major values of a `(T−1) × (K+1)` matrix.
    pub fn from_values(
        n_levels: usize,
        n_covariates: usize,
        values: Vec<f64>,
    ) -> Result<Self, GpsError> {
        let expected = n_levels.saturating_sub(1) * (n_covariates + 1);
        if n_levels < 2 || values.len() != expected {
            return Err(GpsError::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            n_levels,
            n_covariates,
            values,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coefficient row for a non-reference level (1-based, `< T`).
    pub fn row(&self, level: usize) -> &[f64] {
        let width = self.n_covariates + 1;
        &self.values[(level - 1) * width..level * width]
    }

    /// Linear predictors for all `T` levels (the reference level is 0).
    fn linear_predictors(&self, x: &[f64]) -> Vec<f64> {
        let mut eta: Vec<f64> = (1..self.n_levels)
            .map(|level| {
                let row = self.row(level);
                row[0] + row[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            })
            .collect();
        eta.push(0.0);
        eta
    }

    fn check_len(&self, x: &[f64]) -> Result<(), GpsError> {
        if x.len() != self.n_covariates {
            return Err(GpsError::DimensionMismatch {
                expected: self.n_covariates,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Softmax probabilities of every level at `x`.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, GpsError> {
        self.check_len(x)?;
        Ok(softmax(&self.linear_predictors(x)).0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Composition, GpsError> {
        let p = self.probabilities(x)?;
        Composition::close(&p).map_err(|source| GpsError::Degenerate { id: -1, source })
    }

    fn check_data(&self, data: &Dataset) -> Result<(), GpsError> {
        if data.n_levels() != self.n_levels {
            return Err(GpsError::DimensionMismatch {
                expected: self.n_levels,
                got: data.n_levels(),
            });
        }
        if data.n_covariates() != self.n_covariates {
            return Err(GpsError::DimensionMismatch {
                expected: self.n_covariates,
                got: data.n_covariates(),
            });
        }
        Ok(())
    }

    /// `Σᵢ ln p(Tᵢ | xᵢ)`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64, GpsError> {
        self.check_data(data)?;
        Ok(data
            .units()
            .iter()
            .map(|u| {
                let (_, log_probs) = softmax(&self.linear_predictors(&u.covariates));
                log_probs[u.treatment - 1]
            })
            .sum())
    }

    /// Gradient of [`Coefficients::log_likelihood`], laid out like the
    /// coefficient values.
    pub fn gradient(&self, data: &Dataset) -> Result<Vec<f64>, GpsError> {
        self.check_data(data)?;
        let width = self.n_covariates + 1;
        let mut grad = vec![0.0; self.values.len()];
        for u in data.units() {
            let (p, _) = softmax(&self.linear_predictors(&u.covariates));
            for j in 0..self.n_levels - 1 {
                let resid = f64::from(u.treatment == j + 1) - p[j];
                grad[j * width] += resid;
                for (k, x) in u.covariates.iter().enumerate() {
                    grad[j * width + k + 1] += resid * x;
                }
            }
        }
        Ok(grad)
    }
}

/// Returns `(probabilities, log-probabilities)`.
fn softmax(eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = eta.iter().map(|e| (e - max).exp()).sum();
    let log_norm = max + sum.ln();
    let log_p: Vec<f64> = eta.iter().map(|e| e - log_norm).collect();
    (log_p.iter().map(|l| l.exp()).collect(), log_p)
}

/// A fitted propensity model plus the in-sample score rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGps {
    pub coefficients: Coefficients,
    /// Standard errors from the inverse observed information, same layout as
    /// the coefficients. `NaN` for covariates that are constant in the data.
    pub std_errors: Vec<f64>,
    /// One score row per unit, in dataset order.
    pub gps: Vec<Composition>,
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
    /// Gradient norm on the internal (standardized) scale.
    pub final_gradient_norm: f64,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted iteration, starting at `β = 0`.
    pub log_likelihood_trace: Vec<f64>,
}

impl FittedGps {
    pub fn predict(&self, x: &[f64]) -> Result<Composition, GpsError> {
        self.coefficients.predict(x)
    }

    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64, GpsError> {
        self.coefficients.log_likelihood(data)
    }

    pub fn gradient(&self, data: &Dataset) -> Result<Vec<f64>, GpsError> {
        self.coefficients.gradient(data)
    }

    /// Errors with [`GpsError::NotConverged`] unless the fit converged.
    pub fn require_converged(&self) -> Result<&Self, GpsError> {
        if self.converged {
            Ok(self)
        } else {
            Err(GpsError::NotConverged {
                iterations: self.iterations,
                gradient_norm: self.final_gradient_norm,
            })
        }
    }
}

/// Design matrix with an intercept column, centred and scaled when asked.
struct Design {
    rows: Vec<Vec<f64>>,
    levels: Vec<usize>,
    centers: Vec<f64>,
    scales: Vec<f64>,
    constant: Vec<bool>,
}

impl Design {
    fn new(data: &Dataset, standardize: bool) -> Self {
        let k = data.n_covariates();
        let n = data.len() as f64;
        let units = data.units();
        let mut centers = vec![0.0; k];
        let mut scales = vec![1.0; k];
        let mut constant = vec![false; k];
        for c in 0..k {
            let first = units[0].covariates[c];
            constant[c] = units.iter().all(|u| u.covariates[c] == first);
            if constant[c] {
                // Pin the column to exact zeros so its coefficient stays at 0.
                if standardize {
                    centers[c] = first;
                }
                continue;
            }
            if standardize {
                let mean = units.iter().map(|u| u.covariates[c]).sum::<f64>() / n;
                let var = units
                    .iter()
                    .map(|u| (u.covariates[c] - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0);
                centers[c] = mean;
                scales[c] = var.sqrt();
            }
        }
        let rows = units
            .iter()
            .map(|u| {
                std::iter::once(1.0)
                    .chain(
                        u.covariates
                            .iter()
                            .enumerate()
                            .map(|(c, x)| (x - centers[c]) / scales[c]),
                    )
                    .collect()
            })
            .collect();
        Self {
            rows,
            levels: units.iter().map(|u| u.treatment - 1).collect(),
            centers,
            scales,
            constant,
        }
    }

    fn width(&self) -> usize {
        self.centers.len() + 1
    }

    fn eta(&self, theta: &[f64], row: &[f64], n_free: usize) -> Vec<f64> {
        let width = self.width();
        let mut eta: Vec<f64> = (0..n_free)
            .map(|j| {
                theta[j * width..(j + 1) * width]
                    .iter()
                    .zip(row)
                    .map(|(b, x)| b * x)
                    .sum()
            })
            .collect();
        eta.push(0.0);
        eta
    }

    fn log_likelihood(&self, theta: &[f64], n_free: usize) -> f64 {
        self.rows
            .iter()
            .zip(&self.levels)
            .map(|(row, &y)| softmax(&self.eta(theta, row, n_free)).1[y])
            .sum()
    }

    /// Log-likelihood, its gradient, and the negative Hessian.
    fn evaluate(&self, theta: &[f64], n_free: usize) -> (f64, DVector<f64>, DMatrix<f64>) {
        let width = self.width();
        let dim = theta.len();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut info = DMatrix::zeros(dim, dim);
        for (row, &y) in self.rows.iter().zip(&self.levels) {
            let (p, log_p) = softmax(&self.eta(theta, row, n_free));
            ll += log_p[y];
            for j in 0..n_free {
                let resid = f64::from(y == j) - p[j];
                for (a, xa) in row.iter().enumerate() {
                    grad[j * width + a] += resid * xa;
                }
                for l in 0..n_free {
                    let w = p[j] * (f64::from(j == l) - p[l]);
                    if w == 0.0 {
                        continue;
                    }
                    for (a, xa) in row.iter().enumerate() {
                        let wa = w * xa;
                        for (b, xb) in row.iter().enumerate() {
                            info[(j * width + a, l * width + b)] += wa * xb;
                        }
                    }
                }
            }
        }
        (ll, grad, info)
    }

    /// Maps standardized-scale coefficients (and their covariance) back to
    /// the original covariate scale.
    fn to_original_scale(&self, theta: &[f64], n_free: usize) -> Vec<f64> {
        let width = self.width();
        let mut out = theta.to_vec();
        for j in 0..n_free {
            let block = &theta[j * width..(j + 1) * width];
            let mut intercept = block[0];
            for c in 0..self.centers.len() {
                let b = block[c + 1] / self.scales[c];
                out[j * width + c + 1] = b;
                intercept -= b * self.centers[c];
            }
            out[j * width] = intercept;
        }
        out
    }

    fn transform_matrix(&self, n_free: usize) -> DMatrix<f64> {
        let width = self.width();
        let dim = n_free * width;
        let mut a = DMatrix::zeros(dim, dim);
        for j in 0..n_free {
            let o = j * width;
            a[(o, o)] = 1.0;
            for c in 0..self.centers.len() {
                a[(o, o + c + 1)] = -self.centers[c] / self.scales[c];
                a[(o + c + 1, o + c + 1)] = 1.0 / self.scales[c];
            }
        }
        a
    }
}

/// Fits the multinomial-logit propensity model to `data`.
///
/// A fit that stops without meeting `grad_tol` is still returned with
/// `converged = false`; callers decide whether that is fatal.
pub fn fit(data: &Dataset, options: &FitOptions) -> Result<FittedGps, GpsError> {
    let n_levels = data.n_levels();
    let k = data.n_covariates();
    let n_free = n_levels - 1;
    let dim = n_free * (k + 1);
    if let Some(level) = data.level_counts().iter().position(|&c| c == 0) {
        return Err(GpsError::EmptyLevel(level + 1));
    }
    if data.len() <= dim {
        return Err(GpsError::TooFewUnits {
            n: data.len(),
            params: dim,
        });
    }

    let design = Design::new(data, options.standardize);
    let mut theta = vec![0.0; dim];
    let (mut ll, mut grad, mut info) = design.evaluate(&theta, n_free);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut separation = false;

    while iterations < options.max_iter && grad.norm() > options.grad_tol {
        if theta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            separation = true;
            break;
        }
        let mut system = info.clone();
        for d in 0..dim {
            system[(d, d)] += options.ridge;
        }
        let step = system
            .cholesky()
            .map(|c| c.solve(&grad))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(GpsError::Singular {
                iteration: iterations,
            })?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t + scale * s)
                .collect();
            let cand_ll = design.log_likelihood(&candidate, n_free);
            if cand_ll >= ll {
                accepted = Some(candidate);
                break;
            }
            scale *= 0.5;
        }
        // Near the optimum the likelihood is flat to rounding, so a full
        // step is kept when it still shrinks the gradient.
        let accepted = accepted.or_else(|| {
            let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let (cand_ll, cand_grad, _) = design.evaluate(&candidate, n_free);
            let flat = (ll - cand_ll).abs() <= 1e-12 * (1.0 + ll.abs());
            (flat && cand_grad.norm() < grad.norm()).then_some(candidate)
        });
        let Some(candidate) = accepted else { break };
        theta = candidate;
        (ll, grad, info) = design.evaluate(&theta, n_free);
        trace.push(ll);
        iterations += 1;
    }
    if theta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
        separation = true;
    }

    let gradient_norm = grad.norm();
    let converged = gradient_norm <= options.grad_tol && !separation;

    let coefficients =
        Coefficients::from_values(n_levels, k, design.to_original_scale(&theta, n_free))?;
    let std_errors = standard_errors(&design, info, options.ridge, n_free);

    let gps = data
        .units()
        .iter()
        .map(|u| {
            let p = coefficients.probabilities(&u.covariates)?;
            Composition::close(&p).map_err(|source| GpsError::Degenerate { id: u.id, source })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(FittedGps {
        coefficients,
        std_errors,
        gps,
        converged,
        separation,
        iterations,
        final_gradient_norm: gradient_norm,
        log_likelihood: ll,
        log_likelihood_trace: trace,
    })
}

fn standard_errors(design: &Design, mut info: DMatrix<f64>, ridge: f64, n_free: usize) -> Vec<f64> {
    let dim = info.nrows();
    for d in 0..dim {
        info[(d, d)] += ridge;
    }
    let Some(chol) = info.cholesky() else {
        return vec![f64::NAN; dim];
    };
    let cov_std = chol.inverse();
    let a = design.transform_matrix(n_free);
    let cov = &a * cov_std * a.transpose();
    let width = design.width();
    (0..dim)
        .map(|d| {
            let term = d % width;
            if term > 0 && design.constant[term - 1] {
                f64::NAN
            } else {
                cov[(d, d)].max(0.0).sqrt()
            }
        })
        .collect()
}
