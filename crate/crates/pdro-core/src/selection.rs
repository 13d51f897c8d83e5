//! Optimal stopping and cross-run hyper-parameter selection.
//!
//! Every recorded adversary doubles as a reweighting of the validation set
//! through its cached per-example log-weights, so comparing checkpoints
//! against all adversaries seen so far needs no parameters, only the
//! sufficient statistics in each [`CheckpointRecord`].
//!
//! Selection uses weighted 0-1 error by default so that the Average, Minmax
//! and Oracle criteria are directly comparable; weighted NLL is available
//! as an alternative statistic.

use alloc::vec::Vec;

use crate::data::GroupId;
use crate::math;
use crate::trainer::{CheckpointRecord, RunHistory};
use crate::{Error, Result};

/// Default validation-KL rejection threshold for adversaries: ln 10, i.e.
/// an adversary may concentrate on no less than a tenth of the validation
/// set.
pub const KAPPA_VALID_DEFAULT: f64 = math::LN_10;

/// Which per-example statistic selection aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelStat {
    #[default]
    ZeroOne,
    Nll,
}

fn stat_vector(rec: &CheckpointRecord, stat: SelStat) -> &[f64] {
    match stat {
        SelStat::ZeroOne => &rec.errors,
        SelStat::Nll => &rec.losses,
    }
}

/// Monte-Carlo estimate of the adversary's KL to the data on the validation
/// set: mean of w·ln w with w = q_ψ/q_ψ₀. Exactly 0 for record 0.
pub fn adversary_valid_kl(record: &CheckpointRecord) -> Result<f64> {
    if !math::all_finite(&record.log_weights) {
        return Err(Error::NonFinite("adversary log-weights"));
    }
    let mut acc = 0.0;
    for &lw in &record.log_weights {
        let w = math::exp(lw);
        if w > 0.0 {
            acc += w * lw;
        }
    }
    Ok(acc / record.log_weights.len().max(1) as f64)
}

/// Indices of records whose adversaries pass the validation-KL filter.
/// Record 0 (the snapshot, KL = 0) always survives, so the result is never
/// empty.
pub fn filter_adversaries(records: &[CheckpointRecord], kappa_valid: f64) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            *i == 0 || adversary_valid_kl(r).map(|kl| kl <= kappa_valid).unwrap_or(false)
        })
        .map(|(i, _)| i)
        .collect()
}

fn weighted_mean(log_weights: &[f64], stat: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&lw, &s) in log_weights.iter().zip(stat) {
        acc += math::exp(lw) * s;
    }
    acc / stat.len().max(1) as f64
}

/// Robust validation statistic of one checkpoint: the maximum reweighted
/// mean over the kept adversaries.
pub fn robust_valid_loss(
    checkpoint: &CheckpointRecord,
    records: &[CheckpointRecord],
    kept: &[usize],
    stat: SelStat,
) -> Result<f64> {
    if kept.is_empty() {
        return Err(Error::EmptyInput("robust_valid_loss adversary set"));
    }
    let s = stat_vector(checkpoint, stat);
    let mut worst = f64::NEG_INFINITY;
    for &a in kept {
        worst = worst.max(weighted_mean(&records[a].log_weights, s));
    }
    Ok(worst)
}

/// Full minmax stopping: the checkpoint minimizing the robust validation
/// statistic against every kept adversary. Ties go to the earliest epoch.
pub fn minmax_select(history: &RunHistory, kappa_valid: f64, stat: SelStat) -> usize {
    let records = &history.records;
    let kept = filter_adversaries(records, kappa_valid);
    let mut best = 0usize;
    let mut best_value = f64::INFINITY;
    for (t, rec) in records.iter().enumerate() {
        let value = robust_valid_loss(rec, records, &kept, stat)
            .expect("kept set is never empty");
        if value < best_value {
            best_value = value;
            best = t;
        }
    }
    best
}

/// Greedy minmax stopping with incumbent re-evaluation.
///
/// Checkpoints arrive in epoch order. Each new kept adversary updates the
/// running robust statistic of every checkpoint seen so far (one cached
/// weight vector against one cached statistic vector per update), and the
/// incumbent is the running argmin. Because the incumbent is re-evaluated
/// against each newly arrived adversary, the final choice coincides exactly
/// with [`minmax_select`]; the two are implemented independently and the
/// agreement is a test oracle.
pub fn greedy_minmax_select(history: &RunHistory, kappa_valid: f64, stat: SelStat) -> usize {
    let records = &history.records;
    let mut kept: Vec<usize> = Vec::new();
    let mut running_max: Vec<f64> = Vec::with_capacity(records.len());
    let mut incumbent = 0usize;
    for (t, rec) in records.iter().enumerate() {
        let keeps = t == 0
            || adversary_valid_kl(rec).map(|kl| kl <= kappa_valid).unwrap_or(false);
        // Challenger enters with its statistic against past kept adversaries.
        let s = stat_vector(rec, stat);
        let mut challenger = f64::NEG_INFINITY;
        for &a in &kept {
            challenger = challenger.max(weighted_mean(&records[a].log_weights, s));
        }
        running_max.push(challenger);
        if keeps {
            kept.push(t);
            for (past, m) in running_max.iter_mut().enumerate() {
                let v = weighted_mean(&rec.log_weights, stat_vector(&records[past], stat));
                *m = m.max(v);
            }
        }
        incumbent = running_max
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |acc, (i, &v)| {
                if v < acc.1 {
                    (i, v)
                } else {
                    acc
                }
            })
            .0;
    }
    incumbent
}

/// Baseline stopping: argmin of the plain validation error (or NLL), ties
/// to the earliest epoch.
pub fn average_select(history: &RunHistory, stat: SelStat) -> usize {
    let mut best = 0usize;
    let mut best_value = f64::INFINITY;
    for (t, rec) in history.records.iter().enumerate() {
        let s = stat_vector(rec, stat);
        let value = s.iter().sum::<f64>() / s.len().max(1) as f64;
        if value < best_value {
            best_value = value;
            best = t;
        }
    }
    best
}

/// Oracle stopping: argmin of the worst per-group validation error, using
/// the hidden group ids of the validation set.
pub fn oracle_select(history: &RunHistory, valid_groups: &[GroupId]) -> Result<usize> {
    let mut best = 0usize;
    let mut best_value = f64::INFINITY;
    for (t, rec) in history.records.iter().enumerate() {
        if rec.errors.len() != valid_groups.len() {
            return Err(Error::DimensionMismatch {
                expected: rec.errors.len(),
                got: valid_groups.len(),
            });
        }
        let mut sums: alloc::collections::BTreeMap<GroupId, (f64, usize)> =
            alloc::collections::BTreeMap::new();
        for (&err, &g) in rec.errors.iter().zip(valid_groups) {
            let e = sums.entry(g).or_insert((0.0, 0));
            e.0 += err;
            e.1 += 1;
        }
        let value = sums
            .values()
            .map(|(s, n)| s / *n as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        if value < best_value {
            best_value = value;
            best = t;
        }
    }
    Ok(best)
}

/// Cross-run selection: pool the kept adversaries of every run and return
/// the (run, epoch) pair minimizing the pooled robust validation statistic.
/// All runs must have been evaluated on the same validation set.
pub fn hyperparam_select(
    runs: &[&RunHistory],
    kappa_valid: f64,
    stat: SelStat,
) -> Result<(usize, usize)> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("hyperparam_select"));
    }
    let fingerprint = runs[0].valid_fingerprint;
    if runs.iter().any(|r| r.valid_fingerprint != fingerprint) {
        return Err(Error::ValidationMismatch);
    }
    let mut pool: Vec<&CheckpointRecord> = Vec::new();
    for run in runs {
        for idx in filter_adversaries(&run.records, kappa_valid) {
            pool.push(&run.records[idx]);
        }
    }
    let mut best = (0usize, 0usize);
    let mut best_value = f64::INFINITY;
    for (r, run) in runs.iter().enumerate() {
        for (t, rec) in run.records.iter().enumerate() {
            let s = stat_vector(rec, stat);
            let mut worst = f64::NEG_INFINITY;
            for adv in &pool {
                worst = worst.max(weighted_mean(&adv.log_weights, s));
            }
            if worst < best_value {
                best_value = worst;
                best = (r, t);
            }
        }
    }
    Ok(best)
}

/// Stopping criteria exposed by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionCriterion {
    /// Plain validation error.
    Average,
    /// Max over recorded adversaries, no KL filter.
    Minmax,
    /// Max over recorded adversaries passing the ln 10 KL filter.
    MinmaxKl,
    /// Greedy incumbent variant of `MinmaxKl`.
    GreedyMinmax,
    /// Worst-group validation error (needs oracle groups).
    Oracle,
    /// Last recorded checkpoint; evaluates the final parameters of a run.
    Final,
}

impl SelectionCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionCriterion::Average => "average",
            SelectionCriterion::Minmax => "minmax",
            SelectionCriterion::MinmaxKl => "minmax_kl",
            SelectionCriterion::GreedyMinmax => "greedy_minmax",
            SelectionCriterion::Oracle => "oracle",
            SelectionCriterion::Final => "final",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "average" => SelectionCriterion::Average,
            "minmax" => SelectionCriterion::Minmax,
            "minmax_kl" | "minmax-kl" => SelectionCriterion::MinmaxKl,
            "greedy_minmax" | "greedy-minmax" => SelectionCriterion::GreedyMinmax,
            "oracle" => SelectionCriterion::Oracle,
            "final" => SelectionCriterion::Final,
            other => {
                return Err(Error::InvalidConfig(alloc::format!(
                    "unknown selection criterion '{other}'"
                )))
            }
        })
    }

    /// Apply the criterion to one run. `valid_groups` is only consulted by
    /// `Oracle`.
    pub fn select(
        self,
        history: &RunHistory,
        valid_groups: Option<&[GroupId]>,
        stat: SelStat,
    ) -> Result<usize> {
        Ok(match self {
            SelectionCriterion::Average => average_select(history, stat),
            SelectionCriterion::Minmax => minmax_select(history, f64::INFINITY, stat),
            SelectionCriterion::MinmaxKl => {
                minmax_select(history, KAPPA_VALID_DEFAULT, stat)
            }
            SelectionCriterion::GreedyMinmax => {
                greedy_minmax_select(history, KAPPA_VALID_DEFAULT, stat)
            }
            SelectionCriterion::Oracle => {
                let groups = valid_groups.ok_or_else(|| {
                    Error::InvalidConfig("oracle selection needs validation groups".into())
                })?;
                oracle_select(history, groups)?
            }
            SelectionCriterion::Final => history.last_epoch(),
        })
    }
}
