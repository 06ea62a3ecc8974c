//! Synthetic observational data with known propensity coefficients and known
//! constant treatment effects.
//!
//! Generation is fully determined by the config. The random stream is
//! `ChaCha8Rng::seed_from_u64(seed)` from `rand_chacha`; for each unit, in id
//! order, it draws:
//!
//! 1. `K` covariates from `rand_distr::StandardNormal` (ziggurat),
//! 2. one `f64` uniform on `[0, 1)` for the treatment, mapped to a level by
//!    inverse CDF over the softmax probabilities (levels in ascending order),
//! 3. one `StandardNormal` noise draw, scaled by `noise_sd`.
//!
//! The outcome is `Y = g(X) + τ_T + ε` with baseline `g(x) = Σₖ xₖ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Unit};
use crate::gps::Coefficients;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub n_covariates: usize,
    pub n_levels: usize,
    /// Row-major `(T−1) × (K+1)` propensity coefficients, intercept first.
    pub beta: Vec<f64>,
    /// Constant effect of each level.
    pub tau: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n_levels < 2 {
            return invalid(format!("need at least 2 levels, got {}", self.n_levels));
        }
        let min_n = 10 * self.n_levels * (self.n_covariates + 1);
        if self.n < min_n {
            return invalid(format!("n = {} is below 10·T·(K+1) = {min_n}", self.n));
        }
        let want = (self.n_levels - 1) * (self.n_covariates + 1);
        if self.beta.len() != want {
            return invalid(format!(
                "beta has {} entries, expected {want}",
                self.beta.len()
            ));
        }
        if self.tau.len() != self.n_levels {
            return invalid(format!(
                "tau has {} entries, expected {}",
                self.tau.len(),
                self.n_levels
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return invalid(format!(
                "noise_sd must be finite and >= 0, got {}",
                self.noise_sd
            ));
        }
        if self.beta.iter().chain(&self.tau).any(|v| !v.is_finite()) {
            return invalid("beta and tau must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    /// `att[t−1][s−1] = τ_t − τ_s`.
    pub att: Vec<Vec<f64>>,
    /// Mean of the per-unit assignment probabilities, per level.
    pub expected_shares: Vec<f64>,
}

impl Truth {
    pub fn att(&self, target: usize, comparison: usize) -> f64 {
        self.att[target - 1][comparison - 1]
    }
}

/// Outcome baseline shared by every level.
pub fn baseline(x: &[f64]) -> f64 {
    x.iter().sum()
}

pub fn generate(config: &DgpConfig) -> Result<(Dataset, Truth), SynthError> {
    config.validate()?;
    let coefficients =
        Coefficients::from_values(config.n_levels, config.n_covariates, config.beta.clone())
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shares = vec![0.0; config.n_levels];
    let mut units = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let covariates: Vec<f64> = (0..config.n_covariates)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let probs = coefficients
            .probabilities(&covariates)
            .expect("covariate length fixed by config");
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut treatment = config.n_levels;
        for (level, p) in probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                treatment = level + 1;
                break;
            }
        }
        for (s, p) in shares.iter_mut().zip(&probs) {
            *s += p;
        }
        let noise: f64 = rng.sample(StandardNormal);
        let outcome = baseline(&covariates) + config.tau[treatment - 1] + config.noise_sd * noise;
        units.push(Unit {
            id: i as i64 + 1,
            covariates,
            treatment,
            outcome,
        });
    }
    let dataset = Dataset::new(units, config.n_levels)?;
    let att = config
        .tau
        .iter()
        .map(|t| config.tau.iter().map(|s| t - s).collect())
        .collect();
    Ok((
        dataset,
        Truth {
            beta: config.beta.clone(),
            att,
            expected_shares: shares.iter().map(|s| s / config.n as f64).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, beta: Vec<f64>, seed: u64) -> DgpConfig {
        DgpConfig {
            n,
            n_covariates: 2,
            n_levels: 3,
            beta,
            tau: vec![0.0, 2.0, 5.0],
            noise_sd: 1.0,
            seed,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = config(500, vec![0.1, 0.5, -0.5, 0.0, 0.3, 0.3], 42);
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let (c, _) = generate(&DgpConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn truth_table_is_antisymmetric() {
        let (_, truth) = generate(&config(300, vec![0.0; 6], 1)).unwrap();
        for t in 1..=3 {
            for s in 1..=3 {
                assert_eq!(truth.att(t, s), -truth.att(s, t));
            }
        }
        assert_eq!(truth.att(3, 1), 5.0);
        assert_eq!(truth.att(2, 3), -3.0);
    }

    #[test]
    fn zero_beta_gives_uniform_frequencies() {
        let n = 6000;
        let (data, _) = generate(&config(n, vec![0.0; 6], 8)).unwrap();
        let p: f64 = 1.0 / 3.0;
        let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        for c in data.level_counts() {
            assert!((c as f64 / n as f64 - p).abs() <= bound);
        }
    }

    #[test]
    fn frequencies_converge_to_softmax_marginal() {
        let (data, truth) =
            generate(&config(100_000, vec![0.5, 1.0, -0.5, -0.2, 0.3, 0.8], 3)).unwrap();
        for (c, share) in data.level_counts().iter().zip(&truth.expected_shares) {
            assert!((*c as f64 / 1e5 - share).abs() <= 0.01);
        }
    }

    #[test]
    fn noiseless_outcomes_follow_baseline() {
        let mut cfg = config(300, vec![0.2; 6], 4);
        cfg.noise_sd = 0.0;
        cfg.tau = vec![0.0; 3];
        let (data, truth) = generate(&cfg).unwrap();
        for u in data.units() {
            assert_eq!(u.outcome, baseline(&u.covariates));
        }
        assert!(truth.att.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&config(10, vec![0.0; 6], 1)).is_err());
        assert!(generate(&config(300, vec![0.0; 5], 1)).is_err());
        let mut cfg = config(300, vec![0.0; 6], 1);
        cfg.noise_sd = -1.0;
        assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))));
    }
}
