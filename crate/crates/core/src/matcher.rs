//! Nearest-neighbour matching between two treatment groups on their
//! generalized propensity score vectors.
//!
//! Distances are exact. Ties are broken by the smaller comparison id, then
//! (without replacement) by the smaller treated id, so a given input always
//! yields the same [`MatchSet`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{euclidean, Composition, Metric};
use crate::data::Dataset;
use crate::gps::FittedGps;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("treatment level {0} has no units to match")]
    EmptyGroup(usize),
    #[error("invalid match spec: {0}")]
    InvalidSpec(String),
    #[error("unknown unit id {0}")]
    UnknownId(i64),
    #[error("duplicate unit id {0}")]
    DuplicateId(i64),
    #[error("propensity table is inconsistent: {0}")]
    Inconsistent(String),
    #[error("binary check needs exactly 2 treatment levels, got {0}")]
    NotBinary(usize),
}

/// Score rows with the unit ids and treatment levels they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    n_levels: usize,
    ids: Vec<i64>,
    treatments: Vec<usize>,
    rows: Vec<Composition>,
}

impl PropensityTable {
    pub fn new(
        n_levels: usize,
        ids: Vec<i64>,
        treatments: Vec<usize>,
        rows: Vec<Composition>,
    ) -> Result<Self, MatchError> {
        if ids.len() != treatments.len() || ids.len() != rows.len() {
            return Err(MatchError::Inconsistent(format!(
                "{} ids, {} treatments, {} rows",
                ids.len(),
                treatments.len(),
                rows.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for ((id, t), row) in ids.iter().zip(&treatments).zip(&rows) {
            if !seen.insert(*id) {
                return Err(MatchError::DuplicateId(*id));
            }
            if *t == 0 || *t > n_levels {
                return Err(MatchError::Inconsistent(format!(
                    "unit {id} has treatment {t} outside 1..={n_levels}"
                )));
            }
            if row.dim() != n_levels {
                return Err(MatchError::Inconsistent(format!(
                    "unit {id} has a {}-part score, expected {n_levels}",
                    row.dim()
                )));
            }
        }
        Ok(Self {
            n_levels,
            ids,
            treatments,
            rows,
        })
    }

    pub fn from_fit(data: &Dataset, fit: &FittedGps) -> Result<Self, MatchError> {
        Self::new(
            data.n_levels(),
            data.units().iter().map(|u| u.id).collect(),
            data.units().iter().map(|u| u.treatment).collect(),
            fit.gps.clone(),
        )
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    pub fn rows(&self) -> &[Composition] {
        &self.rows
    }

    pub fn row_of(&self, id: i64) -> Option<&Composition> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|p| &self.rows[p])
    }

    /// Keeps the units for which `keep(treatment, row)` holds.
    pub fn retain(&self, mut keep: impl FnMut(usize, &Composition) -> bool) -> Self {
        let mut out = Self {
            n_levels: self.n_levels,
            ids: Vec::new(),
            treatments: Vec::new(),
            rows: Vec::new(),
        };
        for ((id, t), row) in self.ids.iter().zip(&self.treatments).zip(&self.rows) {
            if keep(*t, row) {
                out.ids.push(*id);
                out.treatments.push(*t);
                out.rows.push(row.clone());
            }
        }
        out
    }

    /// Row indices of one level, ordered by id.
    fn group(&self, level: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.treatments[i] == level)
            .collect();
        idx.sort_by_key(|&i| self.ids[i]);
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub target: usize,
    pub comparison: usize,
    pub metric: Metric,
    pub k: usize,
    pub replacement: bool,
    pub caliper: Option<f64>,
}

impl MatchSpec {
    /// 1-nearest-neighbour with replacement, Aitchison metric, no caliper.
    pub fn new(target: usize, comparison: usize) -> Self {
        Self {
            target,
            comparison,
            metric: Metric::Aitchison,
            k: 1,
            replacement: true,
            caliper: None,
        }
    }

    pub fn for_pair(&self, target: usize, comparison: usize) -> Self {
        Self {
            target,
            comparison,
            ..self.clone()
        }
    }

    pub fn validate(&self, n_levels: usize) -> Result<(), MatchError> {
        let invalid = |m: String| Err(MatchError::InvalidSpec(m));
        for level in [self.target, self.comparison] {
            if level == 0 || level > n_levels {
                return invalid(format!("level {level} outside 1..={n_levels}"));
            }
        }
        if self.target == self.comparison {
            return invalid("target and comparison levels must differ".into());
        }
        if self.k == 0 {
            return invalid("k must be at least 1".into());
        }
        if let Some(c) = self.caliper {
            if c.is_nan() || c < 0.0 || c.is_infinite() {
                return invalid(format!("caliper must be a nonnegative number, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbour {
    pub id: i64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatedMatch {
    pub treated_id: i64,
    pub neighbours: Vec<Neighbour>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub spec: MatchSpec,
    /// Matched treated units in ascending id order.
    pub matches: Vec<TreatedMatch>,
    /// Treated units with fewer than `k` admissible matches.
    pub dropped: Vec<i64>,
    /// Times each comparison unit is used across `matches`.
    pub multiplicity: BTreeMap<i64, usize>,
}

impl MatchSet {
    pub fn n_treated(&self) -> usize {
        self.matches.len() + self.dropped.len()
    }
}

/// Exact distance matrix between the score rows of two id lists.
pub fn pairwise_distances(
    table: &PropensityTable,
    treated_ids: &[i64],
    comparison_ids: &[i64],
    metric: Metric,
) -> Result<Vec<Vec<f64>>, MatchError> {
    let position: HashMap<i64, usize> = table
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let embed = |ids: &[i64]| -> Result<Vec<Vec<f64>>, MatchError> {
        ids.iter()
            .map(|id| {
                position
                    .get(id)
                    .map(|&p| metric.embed(&table.rows[p]))
                    .ok_or(MatchError::UnknownId(*id))
            })
            .collect()
    };
    let treated = embed(treated_ids)?;
    let comparison = embed(comparison_ids)?;
    Ok(treated
        .iter()
        .map(|a| comparison.iter().map(|b| euclidean(a, b)).collect())
        .collect())
}

/// Matches every unit of `spec.target` to units of `spec.comparison`.
pub fn match_pair(table: &PropensityTable, spec: &MatchSpec) -> Result<MatchSet, MatchError> {
    let metric = spec.metric;
    match_embedded(table, spec, |c| metric.embed(c))
}

/// Binary-treatment matching on `|logit p̂(1) − logit p̂'(1)|`.
pub fn match_scalar_logit(
    table: &PropensityTable,
    spec: &MatchSpec,
) -> Result<MatchSet, MatchError> {
    if table.n_levels != 2 {
        return Err(MatchError::NotBinary(table.n_levels));
    }
    match_embedded(table, spec, |c| vec![c.parts()[0].ln() - c.parts()[1].ln()])
}

/// True iff Aitchison matching and scalar-logit matching choose the same
/// neighbours for every treated unit. The caliper is ignored since the two
/// distances live on different scales.
pub fn binary_equivalence_check(
    table: &PropensityTable,
    spec: &MatchSpec,
) -> Result<bool, MatchError> {
    if table.n_levels != 2 {
        return Err(MatchError::NotBinary(table.n_levels));
    }
    let spec = MatchSpec {
        metric: Metric::Aitchison,
        caliper: None,
        ..spec.clone()
    };
    let compositional = match_pair(table, &spec)?;
    let scalar = match_scalar_logit(table, &spec)?;
    Ok(neighbour_sets(&compositional) == neighbour_sets(&scalar)
        && compositional.dropped == scalar.dropped)
}

fn neighbour_sets(set: &MatchSet) -> Vec<(i64, Vec<i64>)> {
    set.matches
        .iter()
        .map(|m| {
            let mut ids: Vec<i64> = m.neighbours.iter().map(|n| n.id).collect();
            ids.sort_unstable();
            (m.treated_id, ids)
        })
        .collect()
}

fn by_distance_then_id(a: &(f64, i64), b: &(f64, i64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn match_embedded(
    table: &PropensityTable,
    spec: &MatchSpec,
    embed: impl Fn(&Composition) -> Vec<f64> + Sync,
) -> Result<MatchSet, MatchError> {
    spec.validate(table.n_levels)?;
    let treated_idx = table.group(spec.target);
    let comparison_idx = table.group(spec.comparison);
    if treated_idx.is_empty() {
        return Err(MatchError::EmptyGroup(spec.target));
    }
    if comparison_idx.is_empty() {
        return Err(MatchError::EmptyGroup(spec.comparison));
    }
    let treated: Vec<(i64, Vec<f64>)> = treated_idx
        .iter()
        .map(|&i| (table.ids[i], embed(&table.rows[i])))
        .collect();
    let comparison: Vec<(i64, Vec<f64>)> = comparison_idx
        .iter()
        .map(|&i| (table.ids[i], embed(&table.rows[i])))
        .collect();
    let admissible = |d: f64| spec.caliper.is_none_or(|c| d <= c);

    let assigned: Vec<Vec<(f64, i64)>> = if spec.replacement {
        // Streaming k-best per treated unit; no distance matrix is kept.
        treated
            .par_iter()
            .map(|(_, a)| {
                let mut best: Vec<(f64, i64)> = Vec::with_capacity(spec.k + 1);
                for (id, b) in &comparison {
                    let cand = (euclidean(a, b), *id);
                    if !admissible(cand.0) {
                        continue;
                    }
                    if best.len() == spec.k
                        && by_distance_then_id(&cand, &best[spec.k - 1]) != Ordering::Less
                    {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|probe| by_distance_then_id(probe, &cand))
                        .unwrap_or_else(|p| p);
                    best.insert(pos, cand);
                    best.truncate(spec.k);
                }
                best
            })
            .collect()
    } else {
        greedy_without_replacement(&treated, &comparison, spec.k, admissible)
    };

    let mut matches = Vec::new();
    let mut dropped = Vec::new();
    let mut multiplicity = BTreeMap::new();
    for ((treated_id, _), chosen) in treated.iter().zip(assigned) {
        if chosen.len() < spec.k {
            dropped.push(*treated_id);
            continue;
        }
        for (_, id) in &chosen {
            *multiplicity.entry(*id).or_insert(0) += 1;
        }
        matches.push(TreatedMatch {
            treated_id: *treated_id,
            neighbours: chosen
                .into_iter()
                .map(|(distance, id)| Neighbour { id, distance })
                .collect(),
        });
    }
    Ok(MatchSet {
        spec: spec.clone(),
        matches,
        dropped,
        multiplicity,
    })
}

/// Greedy assignment over all admissible pairs in ascending distance order.
/// Comparison units are used at most once; treated units take up to `k`.
fn greedy_without_replacement(
    treated: &[(i64, Vec<f64>)],
    comparison: &[(i64, Vec<f64>)],
    k: usize,
    admissible: impl Fn(f64) -> bool,
) -> Vec<Vec<(f64, i64)>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, (_, a)) in treated.iter().enumerate() {
        for (ci, (_, b)) in comparison.iter().enumerate() {
            let d = euclidean(a, b);
            if admissible(d) {
                pairs.push((d, ci, ti));
            }
        }
    }
    // Both groups are sorted by id, so index order is id order.
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used = vec![false; comparison.len()];
    let mut assigned: Vec<Vec<(f64, i64)>> = vec![Vec::new(); treated.len()];
    for (d, ci, ti) in pairs {
        if used[ci] || assigned[ti].len() >= k {
            continue;
        }
        used[ci] = true;
        assigned[ti].push((d, comparison[ci].0));
    }
    assigned
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn comp(p: &[f64]) -> Composition {
        Composition::close(p).unwrap()
    }

    fn table(rows: &[(i64, usize, &[f64])], n_levels: usize) -> PropensityTable {
        PropensityTable::new(
            n_levels,
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| comp(r.2)).collect(),
        )
        .unwrap()
    }

    fn example_table() -> PropensityTable {
        table(
            &[
                (1, 1, &[0.05, 0.65, 0.30]),
                (2, 1, &[0.50, 0.20, 0.30]),
                (3, 2, &[0.10, 0.60, 0.30]),
                (4, 2, &[0.55, 0.15, 0.30]),
            ],
            3,
        )
    }

    #[test]
    fn pairwise_distances_on_worked_example() {
        let t = example_table();
        let ait = pairwise_distances(&t, &[1, 2], &[3, 4], Metric::Aitchison).unwrap();
        assert_abs_diff_eq!(ait[0][0], 0.6013, epsilon = 1e-3);
        assert_abs_diff_eq!(ait[1][1], 0.2820, epsilon = 1e-3);
        let euc = pairwise_distances(&t, &[1, 2], &[3, 4], Metric::Euclidean).unwrap();
        assert_abs_diff_eq!(euc[0][0], 0.070711, epsilon = 1e-6);
        assert_abs_diff_eq!(euc[1][1], 0.070711, epsilon = 1e-6);
        assert_eq!(
            pairwise_distances(&t, &[9], &[3], Metric::Aitchison),
            Err(MatchError::UnknownId(9))
        );
    }

    #[test]
    fn identical_rows_have_zero_distances() {
        let t = table(
            &[
                (1, 1, &[0.2, 0.8]),
                (2, 2, &[0.2, 0.8]),
                (3, 2, &[0.2, 0.8]),
            ],
            2,
        );
        for metric in [Metric::Aitchison, Metric::Euclidean] {
            let d = pairwise_distances(&t, &[1], &[2, 3], metric).unwrap();
            assert_eq!(d, vec![vec![0.0, 0.0]]);
        }
    }

    #[test]
    fn single_pair_is_matched() {
        let t = table(&[(7, 1, &[0.9, 0.1]), (3, 2, &[0.1, 0.9])], 2);
        for metric in [Metric::Aitchison, Metric::Euclidean] {
            let spec = MatchSpec {
                metric,
                ..MatchSpec::new(1, 2)
            };
            let m = match_pair(&t, &spec).unwrap();
            assert_eq!(m.matches.len(), 1);
            assert_eq!(m.matches[0].treated_id, 7);
            assert_eq!(m.matches[0].neighbours[0].id, 3);
            assert_eq!(m.multiplicity[&3], 1);
        }
    }

    #[test]
    fn caliper_below_every_distance_drops_all() {
        let t = example_table();
        let d = pairwise_distances(&t, &[1, 2], &[3, 4], Metric::Aitchison).unwrap();
        let min = d.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        for replacement in [true, false] {
            let spec = MatchSpec {
                caliper: Some(0.5 * min),
                replacement,
                ..MatchSpec::new(1, 2)
            };
            let m = match_pair(&t, &spec).unwrap();
            assert!(m.matches.is_empty());
            assert_eq!(m.dropped, vec![1, 2]);
        }
    }

    #[test]
    fn worked_example_matches_nearest() {
        let m = match_pair(&example_table(), &MatchSpec::new(1, 2)).unwrap();
        let pairs: Vec<_> = m
            .matches
            .iter()
            .map(|x| (x.treated_id, x.neighbours[0].id))
            .collect();
        assert_eq!(pairs, vec![(1, 3), (2, 4)]);
    }

    #[test]
    fn without_replacement_uses_each_comparison_once() {
        // Both treated units are closest to comparison 10.
        let t = table(
            &[
                (1, 1, &[0.50, 0.50]),
                (2, 1, &[0.52, 0.48]),
                (10, 2, &[0.51, 0.49]),
                (11, 2, &[0.30, 0.70]),
            ],
            2,
        );
        let spec = MatchSpec {
            replacement: false,
            ..MatchSpec::new(1, 2)
        };
        let m = match_pair(&t, &spec).unwrap();
        assert!(m.multiplicity.values().all(|&c| c == 1));
        assert_eq!(m.matches.len(), 2);
        let with = match_pair(&t, &MatchSpec::new(1, 2)).unwrap();
        assert_eq!(with.multiplicity[&10], 2);
    }

    #[test]
    fn without_replacement_reports_infeasible_units_as_dropped() {
        let t = table(
            &[
                (1, 1, &[0.5, 0.5]),
                (2, 1, &[0.6, 0.4]),
                (3, 2, &[0.55, 0.45]),
            ],
            2,
        );
        let spec = MatchSpec {
            replacement: false,
            ..MatchSpec::new(1, 2)
        };
        let m = match_pair(&t, &spec).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.dropped.len(), 1);
        assert_eq!(m.n_treated(), 2);
    }

    #[test]
    fn k_nearest_with_replacement() {
        let t = table(
            &[
                (1, 1, &[0.5, 0.5]),
                (2, 2, &[0.49, 0.51]),
                (3, 2, &[0.8, 0.2]),
                (4, 2, &[0.52, 0.48]),
            ],
            2,
        );
        let spec = MatchSpec {
            k: 2,
            ..MatchSpec::new(1, 2)
        };
        let m = match_pair(&t, &spec).unwrap();
        let ids: Vec<i64> = m.matches[0].neighbours.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![2, 4]);
        let spec = MatchSpec { k: 4, ..spec };
        assert_eq!(match_pair(&t, &spec).unwrap().dropped, vec![1]);
    }

    #[test]
    fn ties_break_by_smallest_id() {
        // Comparisons 5 and 4 sit at logit +1 and -1 around the treated unit.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let t = table(
            &[
                (1, 1, &[0.5, 0.5]),
                (5, 2, &[sig(1.0), 1.0 - sig(1.0)]),
                (4, 2, &[sig(-1.0), 1.0 - sig(-1.0)]),
            ],
            2,
        );
        let m = match_pair(&t, &MatchSpec::new(1, 2)).unwrap();
        assert_eq!(m.matches[0].neighbours[0].id, 4);
        assert!(binary_equivalence_check(&t, &MatchSpec::new(1, 2)).unwrap());
    }

    #[test]
    fn binary_check_rejects_multilevel() {
        assert_eq!(
            binary_equivalence_check(&example_table(), &MatchSpec::new(1, 2)),
            Err(MatchError::NotBinary(3))
        );
    }

    #[test]
    fn spec_validation() {
        let t = example_table();
        for spec in [
            MatchSpec::new(1, 1),
            MatchSpec::new(0, 2),
            MatchSpec::new(1, 4),
            MatchSpec {
                k: 0,
                ..MatchSpec::new(1, 2)
            },
            MatchSpec {
                caliper: Some(-1.0),
                ..MatchSpec::new(1, 2)
            },
        ] {
            assert!(matches!(
                match_pair(&t, &spec),
                Err(MatchError::InvalidSpec(_))
            ));
        }
        assert_eq!(
            match_pair(&t, &MatchSpec::new(1, 3)),
            Err(MatchError::EmptyGroup(3))
        );
    }
}
