//! Propensity score matching for multiple treatment levels.
//!
//! The generalized propensity score of a unit is a point on the probability
//! simplex. This crate estimates it with a multinomial logit model
//! ([`gps`]), matches units of one treatment level to units of another by the
//! Aitchison or Euclidean distance between score vectors ([`matcher`]), and
//! estimates the average treatment effect on the treated for every ordered
//! pair of levels ([`effects`]) with balance diagnostics ([`diagnostics`]).

pub mod coda;
pub mod data;
pub mod diagnostics;
pub mod effects;
pub mod gps;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod synth;

pub use coda::{aitchison_distance, euclidean_distance, ClrVector, CodaError, Composition, Metric};
pub use data::{DataError, Dataset, Unit};
pub use diagnostics::{balance_report, smd, BalanceReport};
pub use effects::{att, att_all_pairs, bootstrap_se, AttEstimate, BootstrapConfig};
pub use gps::{fit, Coefficients, FitOptions, FittedGps, GpsError};
pub use io::{load_csv, ColumnRoles, InputError};
pub use matcher::{
    binary_equivalence_check, match_pair, pairwise_distances, MatchError, MatchSet, MatchSpec,
    PropensityTable,
};
pub use pipeline::{run, Report, RunConfig};
pub use synth::{generate, DgpConfig, Truth};
