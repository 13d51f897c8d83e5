//! Grid-search orchestration, seed replication and results tabulation.
//!
//! `run_experiment` handles the generic (task × method-grid × seeds) sweep.
//! Two presets freeze the benchmark protocols end to end: `ToyAblation`
//! (four trainer variants on the toy task, final-checkpoint evaluation,
//! best grid point per variant by mean robust accuracy) and
//! `BiasedBenchmark` (ERM / P-DRO / Oracle DRO on the biased sequence task
//! with pooled minmax checkpoint and hyper-parameter selection).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adversaries::FamilyConfig;
use crate::baselines::{train_erm, train_groupdro, train_nonparam};
use crate::data::{
    gen_biased_sequences, gen_toy_gaussian, group_frequencies, merge_small_groups,
    per_group_accuracy, reweighted_average_accuracy, robust_accuracy, BiasedSeqConfig,
    DatasetBundle, GroupId, ToyTaskConfig,
};
use crate::models::{self, ModelParams};
use crate::numerics::{mean, sample_std};
use crate::selection::{
    average_select, hyperparam_select, oracle_select, SelStat, SelectionCriterion,
    KAPPA_VALID_DEFAULT,
};
use crate::trainer::{
    train_pdro, MethodConfig, PdroHypers, RunHistory, TrainConfig, Variant,
};
use crate::{Error, Result};

/// Which benchmark task a sweep runs on.
#[derive(Debug, Clone)]
pub enum TaskConfig {
    Toy(ToyTaskConfig),
    BiasedSeq(BiasedSeqConfig),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Toy(_) => "toy",
            TaskConfig::BiasedSeq(_) => "biased_seq",
        }
    }

    pub fn generate(&self, seed: u64) -> Result<DatasetBundle> {
        match self {
            TaskConfig::Toy(cfg) => gen_toy_gaussian(cfg, seed),
            TaskConfig::BiasedSeq(cfg) => gen_biased_sequences(cfg, seed),
        }
    }
}

/// One labeled hyper-parameter setting in a sweep.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub label: String,
    pub method: MethodConfig,
}

/// A full sweep description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    pub adam: bool,
    pub selection: SelectionCriterion,
    pub stat: SelStat,
    pub min_group_size: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("empty hyper-parameter grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        Ok(())
    }
}

/// Dispatch to the right trainer for a method config.
pub fn train_any(config: &TrainConfig, data: &DatasetBundle) -> Result<RunHistory> {
    match &config.method {
        MethodConfig::Erm => train_erm(config, data),
        MethodConfig::Pdro(_) => train_pdro(config, data),
        MethodConfig::NonParam { .. } => train_nonparam(config, data),
        MethodConfig::GroupDro { .. } => train_groupdro(config, data),
    }
}

/// Robust and reweighted-average test accuracy of a parameter vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub per_group: BTreeMap<GroupId, f64>,
    pub robust: f64,
    pub average: f64,
}

/// Evaluate on the test split under small-group merging, reweighting the
/// average to the training group distribution.
pub fn evaluate_model(
    params: &ModelParams,
    data: &DatasetBundle,
    min_group_size: usize,
) -> Result<Evaluation> {
    let scheme = merge_small_groups(&data.test, min_group_size);
    let preds = models::predictions(&data.test.examples, params)?;
    let per_group = per_group_accuracy(&data.test, &preds, &scheme)?;
    let robust = robust_accuracy(&per_group)?;
    let freqs = group_frequencies(&data.train, &scheme);
    let average = reweighted_average_accuracy(&per_group, &freqs)?;
    Ok(Evaluation { per_group, robust, average })
}

/// Outcome of one (grid point × seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: String,
    pub point: String,
    pub seed: u64,
    pub chosen_epoch: usize,
    pub robust: f64,
    pub average: f64,
    pub aborted: Option<String>,
}

/// Mean ± sample-std summary of one grid point over seeds.
#[derive(Debug, Clone)]
pub struct PointAggregate {
    pub method: String,
    pub point: String,
    pub n_seeds: usize,
    pub n_aborted: usize,
    pub robust_mean: f64,
    pub robust_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
}

pub fn aggregate(method: &str, point: &str, cells: &[&CellResult]) -> PointAggregate {
    let robust: Vec<f64> = cells.iter().map(|c| c.robust).collect();
    let average: Vec<f64> = cells.iter().map(|c| c.average).collect();
    PointAggregate {
        method: method.into(),
        point: point.into(),
        n_seeds: cells.len(),
        n_aborted: cells.iter().filter(|c| c.aborted.is_some()).count(),
        robust_mean: mean(&robust),
        robust_std: sample_std(&robust),
        average_mean: mean(&average),
        average_std: sample_std(&average),
    }
}

/// Parameters of the checkpoint a criterion picked.
fn chosen_params(history: &RunHistory, epoch: usize) -> ModelParams {
    history.records[epoch]
        .params
        .clone()
        .unwrap_or_else(|| history.final_params.clone())
}

/// Train one cell and evaluate the selected checkpoint.
pub fn run_cell(
    data: &DatasetBundle,
    point: &GridPoint,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    model_lr: f64,
    adam: bool,
    selection: SelectionCriterion,
    stat: SelStat,
    min_group_size: usize,
) -> Result<(CellResult, RunHistory)> {
    let config = TrainConfig {
        method: point.method.clone(),
        epochs,
        batch_size,
        model_lr,
        adam,
        seed,
    };
    let history = train_any(&config, data)?;
    let groups: Vec<GroupId> = data.valid.examples.iter().map(|e| e.group).collect();
    let epoch = selection.select(&history, Some(&groups), stat)?;
    let eval = evaluate_model(&chosen_params(&history, epoch), data, min_group_size)?;
    Ok((
        CellResult {
            method: point.method.name().into(),
            point: point.label.clone(),
            seed,
            chosen_epoch: epoch,
            robust: eval.robust,
            average: eval.average,
            aborted: history.abort.as_ref().map(|a| a.reason.clone()),
        },
        history,
    ))
}

/// Results of a full sweep.
#[derive(Debug, Clone)]
pub struct ExperimentTable {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<PointAggregate>,
    /// Per seed, the grid point/checkpoint chosen by pooled minmax
    /// selection across the whole grid (present when the grid has > 1
    /// point).
    pub selected: Vec<CellResult>,
    pub selected_aggregate: Option<PointAggregate>,
}

/// Run the generic sweep: every grid point on every seed, per-point
/// aggregates, and pooled hyper-parameter selection per seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentTable> {
    config.validate()?;
    let mut cells: Vec<CellResult> = Vec::new();
    let mut selected: Vec<CellResult> = Vec::new();
    for &seed in &config.seeds {
        let data = config.task.generate(seed)?;
        let mut histories: Vec<RunHistory> = Vec::new();
        for point in &config.grid {
            match run_cell(
                &data,
                point,
                seed,
                config.epochs,
                config.batch_size,
                config.model_lr,
                config.adam,
                config.selection,
                config.stat,
                config.min_group_size,
            ) {
                Ok((cell, history)) => {
                    cells.push(cell);
                    histories.push(history);
                }
                Err(e) => {
                    // A failed cell is recorded, not fatal to the sweep.
                    cells.push(CellResult {
                        method: point.method.name().into(),
                        point: point.label.clone(),
                        seed,
                        chosen_epoch: 0,
                        robust: f64::NAN,
                        average: f64::NAN,
                        aborted: Some(format!("{e}")),
                    });
                }
            }
        }
        if config.grid.len() > 1 && histories.len() == config.grid.len() {
            let refs: Vec<&RunHistory> = histories.iter().collect();
            let (run, epoch) = hyperparam_select(&refs, KAPPA_VALID_DEFAULT, config.stat)?;
            let eval = evaluate_model(
                &chosen_params(&histories[run], epoch),
                &data,
                config.min_group_size,
            )?;
            selected.push(CellResult {
                method: config.grid[run].method.name().into(),
                point: format!("selected:{}", config.grid[run].label),
                seed,
                chosen_epoch: epoch,
                robust: eval.robust,
                average: eval.average,
                aborted: None,
            });
        }
    }
    let mut aggregates = Vec::new();
    for point in &config.grid {
        let of_point: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.point == point.label && c.robust.is_finite())
            .collect();
        if !of_point.is_empty() {
            aggregates.push(aggregate(&of_point[0].method, &point.label, &of_point));
        }
    }
    let selected_aggregate = if selected.is_empty() {
        None
    } else {
        let refs: Vec<&CellResult> = selected.iter().collect();
        Some(aggregate(&selected[0].method, "selected", &refs))
    };
    Ok(ExperimentTable { cells, aggregates, selected, selected_aggregate })
}

// ---------------------------------------------------------------------------
// Toy ablation preset
// ---------------------------------------------------------------------------

/// Frozen protocol for the toy-task ablation: ERM plus the three game
/// variants, ten seeds, final-checkpoint evaluation, best grid point per
/// variant by mean robust accuracy.
#[derive(Debug, Clone)]
pub struct ToyAblation {
    pub task: ToyTaskConfig,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    /// Adversary learning rates for the bare zero-sum variant.
    pub bare_lr_grid: Vec<f64>,
    /// KL radii for the projected variant.
    pub kl_kappa_grid: Vec<f64>,
    pub kl_lr: f64,
    /// Temperatures for the relaxed variant.
    pub relaxed_tau_grid: Vec<f64>,
    pub relaxed_lr: f64,
    pub relaxed_k: usize,
}

impl Default for ToyAblation {
    fn default() -> Self {
        ToyAblation {
            task: ToyTaskConfig::default(),
            seeds: (0..10).collect(),
            epochs: 40,
            batch_size: 256,
            model_lr: 0.1,
            // The unconstrained zero-sum game's runaway regime; the KL
            // variant shares the lowest of these rates and is saved by the
            // projection alone.
            bare_lr_grid: alloc::vec![30.0, 100.0, 300.0],
            kl_kappa_grid: alloc::vec![0.01, 0.1, 1.0, 10.0],
            kl_lr: 30.0,
            relaxed_tau_grid: alloc::vec![5.0, 2.0, 1.0, 0.5],
            relaxed_lr: 0.002,
            relaxed_k: 10,
        }
    }
}

/// One variant row of the ablation table: the best grid point by mean
/// robust accuracy, with mean ± std over seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub best_point: String,
    pub robust_mean: f64,
    pub robust_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

impl ToyAblation {
    /// Rebuild the per-variant rows from a set of cells (used when seeds
    /// were run in parallel and merged).
    pub fn rows_from_cells(&self, cells: &[CellResult]) -> Vec<AblationRow> {
        let mut rows = Vec::new();
        for variant in ["erm", "pdro_bare", "pdro_kl", "pdro_relaxed"] {
            let mut points: Vec<String> =
                cells.iter().filter(|c| c.method == variant).map(|c| c.point.clone()).collect();
            points.sort();
            points.dedup();
            let mut best: Option<AblationRow> = None;
            for point in points {
                let of: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.method == variant && c.point == point)
                    .collect();
                let robusts: Vec<f64> = of.iter().map(|c| c.robust).collect();
                let averages: Vec<f64> = of.iter().map(|c| c.average).collect();
                let row = AblationRow {
                    variant: variant.into(),
                    best_point: point,
                    robust_mean: mean(&robusts),
                    robust_std: sample_std(&robusts),
                    average_mean: mean(&averages),
                    average_std: sample_std(&averages),
                };
                if best.as_ref().map_or(true, |b| row.robust_mean > b.robust_mean) {
                    best = Some(row);
                }
            }
            if let Some(row) = best {
                rows.push(row);
            }
        }
        rows
    }

    fn variant_grid(&self, variant: Variant) -> Vec<GridPoint> {
        let family = FamilyConfig::Gaussian { sigma: None };
        match variant {
            Variant::Bare => self
                .bare_lr_grid
                .iter()
                .map(|&lr| GridPoint {
                    label: format!("adv_lr={lr}"),
                    method: MethodConfig::Pdro(PdroHypers {
                        variant: Variant::Bare,
                        family: family.clone(),
                        tau: 1.0,
                        k_window: 1,
                        adv_lr: lr,
                        kappa: 1.0,
                        n_samples: None,
                        weight_clip: None,
                    }),
                })
                .collect(),
            Variant::KlProjected => self
                .kl_kappa_grid
                .iter()
                .map(|&kappa| GridPoint {
                    label: format!("kappa={kappa}"),
                    method: MethodConfig::Pdro(PdroHypers {
                        variant: Variant::KlProjected,
                        family: family.clone(),
                        tau: 1.0,
                        k_window: 1,
                        adv_lr: self.kl_lr,
                        kappa,
                        n_samples: None,
                        weight_clip: None,
                    }),
                })
                .collect(),
            Variant::Relaxed => self
                .relaxed_tau_grid
                .iter()
                .map(|&tau| GridPoint {
                    label: format!("tau={tau}"),
                    method: MethodConfig::Pdro(PdroHypers {
                        variant: Variant::Relaxed,
                        family: family.clone(),
                        tau,
                        k_window: self.relaxed_k,
                        adv_lr: self.relaxed_lr,
                        kappa: 1.0,
                        n_samples: None,
                        weight_clip: None,
                    }),
                })
                .collect(),
        }
    }

    pub fn run(&self) -> Result<AblationTable> {
        let mut all_cells = Vec::new();
        let mut rows = Vec::new();
        let mut variants: Vec<(String, Vec<GridPoint>)> = Vec::new();
        variants.push((
            "erm".into(),
            alloc::vec![GridPoint { label: "-".into(), method: MethodConfig::Erm }],
        ));
        for v in [Variant::Bare, Variant::KlProjected, Variant::Relaxed] {
            variants.push((
                MethodConfig::Pdro(PdroHypers {
                    variant: v,
                    family: FamilyConfig::Gaussian { sigma: None },
                    tau: 1.0,
                    k_window: 1,
                    adv_lr: 0.0,
                    kappa: 1.0,
                    n_samples: None,
                    weight_clip: None,
                })
                .name()
                .into(),
                self.variant_grid(v),
            ));
        }
        for (variant_name, grid) in variants {
            let mut per_point: Vec<(String, Vec<CellResult>)> = Vec::new();
            for point in &grid {
                let mut cells = Vec::new();
                for &seed in &self.seeds {
                    let data = self.task.clone();
                    let bundle = gen_toy_gaussian(&data, seed)?;
                    let (cell, _) = run_cell(
                        &bundle,
                        point,
                        seed,
                        self.epochs,
                        self.batch_size,
                        self.model_lr,
                        false,
                        SelectionCriterion::Final,
                        SelStat::ZeroOne,
                        self.task.min_test_per_group,
                    )?;
                    cells.push(cell);
                }
                per_point.push((point.label.clone(), cells));
            }
            // Best grid point by mean robust accuracy, as in the source
            // protocol (report the best value among the grid).
            let mut best: Option<(String, f64, &[CellResult])> = None;
            for (label, cells) in &per_point {
                let robusts: Vec<f64> = cells.iter().map(|c| c.robust).collect();
                let m = mean(&robusts);
                if best.as_ref().map_or(true, |(_, bm, _)| m > *bm) {
                    best = Some((label.clone(), m, cells));
                }
            }
            let (label, _, cells) = best.expect("non-empty grid");
            let robusts: Vec<f64> = cells.iter().map(|c| c.robust).collect();
            let averages: Vec<f64> = cells.iter().map(|c| c.average).collect();
            rows.push(AblationRow {
                variant: variant_name,
                best_point: label,
                robust_mean: mean(&robusts),
                robust_std: sample_std(&robusts),
                average_mean: mean(&averages),
                average_std: sample_std(&averages),
            });
            for (_, cells) in per_point {
                all_cells.extend(cells);
            }
        }
        Ok(AblationTable { rows, cells: all_cells })
    }
}

// ---------------------------------------------------------------------------
// Biased-sequence benchmark preset
// ---------------------------------------------------------------------------

/// Frozen protocol for the biased sequence benchmark: ERM with average
/// stopping, P-DRO with pooled minmax(+KL) selection over the λ grid (and
/// an average-criterion variant of the same runs, kept for the failure-mode
/// comparison), and oracle Group-DRO selected by worst-group validation
/// error over the η grid.
#[derive(Debug, Clone)]
pub struct BiasedBenchmark {
    pub task: BiasedSeqConfig,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    pub pdro_lambda_grid: Vec<f64>,
    pub pdro_tau: f64,
    pub pdro_k: usize,
    pub bigram_alpha: f64,
    pub groupdro_eta_grid: Vec<f64>,
    pub min_group_size: usize,
}

impl Default for BiasedBenchmark {
    fn default() -> Self {
        BiasedBenchmark {
            task: BiasedSeqConfig::default(),
            seeds: (0..5).collect(),
            epochs: 30,
            batch_size: 64,
            model_lr: 0.3,
            pdro_lambda_grid: alloc::vec![0.03, 0.1, 0.3],
            pdro_tau: 0.1,
            pdro_k: 5,
            bigram_alpha: 0.1,
            groupdro_eta_grid: alloc::vec![1.0, 0.1, 0.01],
            min_group_size: 100,
        }
    }
}

/// Per-seed outcomes of the benchmark: (robust, average) test accuracy per
/// method.
#[derive(Debug, Clone)]
pub struct BiasedSeedOutcome {
    pub seed: u64,
    pub erm: (f64, f64),
    pub pdro_minmax: (f64, f64),
    pub pdro_average_stop: (f64, f64),
    pub oracle_dro: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct BiasedBenchTable {
    pub outcomes: Vec<BiasedSeedOutcome>,
}

impl BiasedBenchTable {
    pub fn mean_of(&self, pick: impl Fn(&BiasedSeedOutcome) -> f64) -> f64 {
        let v: Vec<f64> = self.outcomes.iter().map(pick).collect();
        mean(&v)
    }
}

impl BiasedBenchmark {
    fn config(&self, method: MethodConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            model_lr: self.model_lr,
            adam: false,
            seed,
        }
    }

    pub fn run(&self) -> Result<BiasedBenchTable> {
        let mut outcomes = Vec::new();
        for &seed in &self.seeds {
            let data = gen_biased_sequences(&self.task, seed)?;
            let valid_groups: Vec<GroupId> =
                data.valid.examples.iter().map(|e| e.group).collect();

            // ERM, average stopping.
            let erm_history = train_erm(&self.config(MethodConfig::Erm, seed), &data)?;
            let erm_epoch = average_select(&erm_history, SelStat::ZeroOne);
            let erm_eval = evaluate_model(
                &chosen_params(&erm_history, erm_epoch),
                &data,
                self.min_group_size,
            )?;

            // P-DRO over the λ grid.
            let mut pdro_runs = Vec::new();
            for &lambda in &self.pdro_lambda_grid {
                let hypers = PdroHypers {
                    variant: Variant::Relaxed,
                    family: FamilyConfig::Bigram { alpha: self.bigram_alpha },
                    tau: self.pdro_tau,
                    k_window: self.pdro_k,
                    adv_lr: lambda,
                    kappa: 1.0,
                    n_samples: None,
                    weight_clip: None,
                };
                pdro_runs.push(train_pdro(
                    &self.config(MethodConfig::Pdro(hypers), seed),
                    &data,
                )?);
            }
            let refs: Vec<&RunHistory> = pdro_runs.iter().collect();
            let (run, epoch) =
                hyperparam_select(&refs, KAPPA_VALID_DEFAULT, SelStat::ZeroOne)?;
            let pdro_eval = evaluate_model(
                &chosen_params(&pdro_runs[run], epoch),
                &data,
                self.min_group_size,
            )?;

            // The same runs under the baseline criterion: per-run average
            // stopping, then the run with the lowest mean validation error.
            let mut avg_best: Option<(f64, usize, usize)> = None;
            for (r, history) in pdro_runs.iter().enumerate() {
                let t = average_select(history, SelStat::ZeroOne);
                let rec = &history.records[t];
                let value = mean(&rec.errors);
                if avg_best.map_or(true, |(v, _, _)| value < v) {
                    avg_best = Some((value, r, t));
                }
            }
            let (_, avg_run, avg_epoch) = avg_best.expect("non-empty grid");
            let pdro_avg_eval = evaluate_model(
                &chosen_params(&pdro_runs[avg_run], avg_epoch),
                &data,
                self.min_group_size,
            )?;

            // Oracle Group-DRO: η grid, worst-group validation error.
            let mut oracle_best: Option<(f64, Evaluation)> = None;
            for &eta in &self.groupdro_eta_grid {
                let history = train_groupdro(
                    &self.config(MethodConfig::GroupDro { eta, soft: false }, seed),
                    &data,
                )?;
                let t = oracle_select(&history, &valid_groups)?;
                let rec = &history.records[t];
                let mut per_group: BTreeMap<GroupId, (f64, usize)> = BTreeMap::new();
                for (&err, &g) in rec.errors.iter().zip(&valid_groups) {
                    let e = per_group.entry(g).or_insert((0.0, 0));
                    e.0 += err;
                    e.1 += 1;
                }
                let worst = per_group
                    .values()
                    .map(|(s, n)| s / *n as f64)
                    .fold(f64::NEG_INFINITY, f64::max);
                let eval = evaluate_model(
                    &chosen_params(&history, t),
                    &data,
                    self.min_group_size,
                )?;
                if oracle_best.as_ref().map_or(true, |(v, _)| worst < *v) {
                    oracle_best = Some((worst, eval));
                }
            }
            let (_, oracle_eval) = oracle_best.expect("non-empty grid");

            outcomes.push(BiasedSeedOutcome {
                seed,
                erm: (erm_eval.robust, erm_eval.average),
                pdro_minmax: (pdro_eval.robust, pdro_eval.average),
                pdro_average_stop: (pdro_avg_eval.robust, pdro_avg_eval.average),
                oracle_dro: (oracle_eval.robust, oracle_eval.average),
            });
        }
        Ok(BiasedBenchTable { outcomes })
    }
}
