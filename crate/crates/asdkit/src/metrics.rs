//! Exact AUC, partial AUC, ROC curves, and average-rank aggregation.
//!
//! AUC is the exact pairwise count: the fraction of (normal, anomalous)
//! pairs where the anomalous sample scores strictly higher. Ties earn no
//! credit by default (`H(0) = 0`); [`TieRule::Half`] switches to the
//! conventional 0.5-credit for comparison with external tools. Partial AUC
//! restricts the count to the `⌊p·N₋⌋` highest-scoring normals — the
//! low-false-positive-rate regime.
//!
//! Counting is done in integers and divided once at the end, so results are
//! exact and invariant under any strictly increasing transform of the
//! scores. A sorted merge keeps it `O(N log N)`; tests pin its equivalence
//! to the literal double loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MachineKey;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no {0} samples in the evaluation set")]
    MissingClass(&'static str),
    #[error("score for '{name}' is not finite")]
    NonFiniteScore { name: String },
    #[error("floor(p·N⁻) = 0 for p = {p} with {n_normal} normal sample(s); partial AUC is undefined")]
    UndersizedPartialSet { p: f64, n_normal: usize },
    #[error("p must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("system '{system}' does not cover machine(s): {missing}")]
    CoverageMismatch { system: String, missing: String },
    #[error("rank weighting needs nonnegative weights with a positive sum")]
    InvalidWeighting,
    #[error("no systems to rank")]
    NoSystems,
}

/// Ground-truth condition of a test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

/// An anomaly score paired with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub name: String,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label, name: impl Into<String>) -> Self {
        ScoredSample {
            score,
            label,
            name: name.into(),
        }
    }
}

/// Credit for tied scores in the pairwise count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Ties count as misses: `H(0) = 0`.
    #[default]
    Strict,
    /// Ties earn half credit, matching trapezoidal/Mann-Whitney tools.
    Half,
}

/// Hard threshold: 1 when `a > 0`, otherwise 0.
pub fn hard_threshold(a: f64) -> u32 {
    if a > 0.0 {
        1
    } else {
        0
    }
}

fn split_scores(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    let mut normals = Vec::new();
    let mut anomalies = Vec::new();
    for s in samples {
        if !s.score.is_finite() {
            return Err(MetricError::NonFiniteScore {
                name: s.name.clone(),
            });
        }
        match s.label {
            Label::Normal => normals.push(s.score),
            Label::Anomalous => anomalies.push(s.score),
        }
    }
    if normals.is_empty() {
        return Err(MetricError::MissingClass("normal"));
    }
    if anomalies.is_empty() {
        return Err(MetricError::MissingClass("anomalous"));
    }
    Ok((normals, anomalies))
}

/// Pairwise credit doubled (2 per win, 1 per tie under [`TieRule::Half`]),
/// counted against normals sorted ascending.
fn twice_credit(sorted_normals: &[f64], anomalies: &[f64], rule: TieRule) -> u128 {
    let mut twice = 0u128;
    for &a in anomalies {
        let below = sorted_normals.partition_point(|&n| n < a);
        let below_or_equal = sorted_normals.partition_point(|&n| n <= a);
        twice += 2 * below as u128;
        if rule == TieRule::Half {
            twice += (below_or_equal - below) as u128;
        }
    }
    twice
}

/// Exact pairwise AUC with strict tie handling.
pub fn auc(samples: &[ScoredSample]) -> Result<f64, MetricError> {
    auc_with(samples, TieRule::Strict)
}

pub fn auc_with(samples: &[ScoredSample], rule: TieRule) -> Result<f64, MetricError> {
    let (mut normals, anomalies) = split_scores(samples)?;
    normals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let twice = twice_credit(&normals, &anomalies, rule);
    Ok(twice as f64 / (2 * normals.len() as u128 * anomalies.len() as u128) as f64)
}

/// Partial AUC over the `⌊p·N₋⌋` highest-scoring normals, strict ties.
pub fn pauc(samples: &[ScoredSample], p: f64) -> Result<f64, MetricError> {
    pauc_with(samples, p, TieRule::Strict)
}

pub fn pauc_with(samples: &[ScoredSample], p: f64, rule: TieRule) -> Result<f64, MetricError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricError::InvalidFraction(p));
    }
    let (mut normals, anomalies) = split_scores(samples)?;
    let k = ((p * normals.len() as f64).floor() as usize).min(normals.len());
    if k == 0 {
        return Err(MetricError::UndersizedPartialSet {
            p,
            n_normal: normals.len(),
        });
    }
    // The k hardest normals: sort descending, keep the head, re-sort ascending
    // for the counting merge.
    normals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    normals.truncate(k);
    normals.reverse();
    let twice = twice_credit(&normals, &anomalies, rule);
    Ok(twice as f64 / (2 * k as u128 * anomalies.len() as u128) as f64)
}

/// One ROC operating point; the curve starts at `(0, 0)` with an infinite
/// threshold and ends at `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical ROC step curve, one point per distinct score.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<RocPoint>, MetricError> {
    let (normals, anomalies) = split_scores(samples)?;
    let (n_neg, n_pos) = (normals.len() as f64, anomalies.len() as f64);
    let mut tagged: Vec<(f64, bool)> = normals
        .iter()
        .map(|&s| (s, false))
        .chain(anomalies.iter().map(|&s| (s, true)))
        .collect();
    tagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < tagged.len() {
        let threshold = tagged[i].0;
        while i < tagged.len() && tagged[i].0 == threshold {
            if tagged[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under a ROC curve from [`roc_curve`].
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Per-machine evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub machine: MachineKey,
    pub auc: f64,
    pub pauc: f64,
    pub p: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

/// Computes AUC and pAUC for one machine's scored test set.
pub fn evaluate_samples(
    machine: MachineKey,
    samples: &[ScoredSample],
    p: f64,
) -> Result<MetricReport, MetricError> {
    let auc_value = auc(samples)?;
    let pauc_value = pauc(samples, p)?;
    let n_normal = samples.iter().filter(|s| s.label == Label::Normal).count();
    Ok(MetricReport {
        machine,
        auc: auc_value,
        pauc: pauc_value,
        p,
        n_normal,
        n_anomalous: samples.len() - n_normal,
    })
}

/// Blend of AUC and pAUC used to order systems within a machine type.
/// The default is their simple mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankWeighting {
    pub auc_weight: f64,
    pub pauc_weight: f64,
}

impl Default for RankWeighting {
    fn default() -> Self {
        RankWeighting {
            auc_weight: 0.5,
            pauc_weight: 0.5,
        }
    }
}

impl RankWeighting {
    fn blend(&self, report: &MetricReport) -> f64 {
        (self.auc_weight * report.auc + self.pauc_weight * report.pauc)
            / (self.auc_weight + self.pauc_weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeStanding {
    /// Mean blended metric over the type's machine IDs.
    pub score: f64,
    /// 1 is best; tied systems share the mean of their tied ranks.
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardEntry {
    pub system: String,
    pub average_rank: f64,
    pub per_type: BTreeMap<String, TypeStanding>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Leaderboard {
    pub machine_types: Vec<String>,
    /// Sorted best (lowest average rank) first.
    pub entries: Vec<LeaderboardEntry>,
}

/// Average-rank aggregation: systems are ranked per machine type by the
/// blended metric averaged over that type's IDs, then the per-type ranks
/// are averaged. Every system must cover the same machines.
pub fn rank_systems(
    results: &BTreeMap<String, BTreeMap<MachineKey, MetricReport>>,
    weighting: RankWeighting,
) -> Result<Leaderboard, MetricError> {
    if results.is_empty() {
        return Err(MetricError::NoSystems);
    }
    if weighting.auc_weight < 0.0
        || weighting.pauc_weight < 0.0
        || weighting.auc_weight + weighting.pauc_weight <= 0.0
    {
        return Err(MetricError::InvalidWeighting);
    }
    let all_keys: BTreeSet<MachineKey> = results
        .values()
        .flat_map(|reports| reports.keys().cloned())
        .collect();
    for (system, reports) in results {
        let missing: Vec<String> = all_keys
            .iter()
            .filter(|k| !reports.contains_key(*k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(MetricError::CoverageMismatch {
                system: system.clone(),
                missing: missing.join(", "),
            });
        }
    }

    let machine_types: Vec<String> = all_keys
        .iter()
        .map(|k| k.machine_type.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let systems: Vec<&String> = results.keys().collect();

    let mut standings: BTreeMap<&str, BTreeMap<String, TypeStanding>> = BTreeMap::new();
    for machine_type in &machine_types {
        let type_keys: Vec<&MachineKey> = all_keys
            .iter()
            .filter(|k| &k.machine_type == machine_type)
            .collect();
        let scores: Vec<f64> = systems
            .iter()
            .map(|system| {
                let reports = &results[*system];
                type_keys
                    .iter()
                    .map(|k| weighting.blend(&reports[*k]))
                    .sum::<f64>()
                    / type_keys.len() as f64
            })
            .collect();
        let ranks = average_ranks_descending(&scores);
        for (i, system) in systems.iter().enumerate() {
            standings.entry(system.as_str()).or_default().insert(
                machine_type.clone(),
                TypeStanding {
                    score: scores[i],
                    rank: ranks[i],
                },
            );
        }
    }

    let mut entries: Vec<LeaderboardEntry> = standings
        .into_iter()
        .map(|(system, per_type)| {
            let average_rank =
                per_type.values().map(|s| s.rank).sum::<f64>() / per_type.len() as f64;
            LeaderboardEntry {
                system: system.to_string(),
                average_rank,
                per_type,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        a.average_rank
            .partial_cmp(&b.average_rank)
            .unwrap()
            .then_with(|| a.system.cmp(&b.system))
    });
    Ok(Leaderboard {
        machine_types,
        entries,
    })
}

/// 1-based ranks for scores sorted descending; exact ties share the mean of
/// the positions they span.
fn average_ranks_descending(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share their mean rank.
        let mean = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mean;
        }
        i = j;
    }
    ranks
}
