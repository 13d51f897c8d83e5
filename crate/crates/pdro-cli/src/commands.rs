//! Implementations behind the CLI subcommands, separated from argument
//! parsing so the full pipeline can be driven in-process by tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;

use pdro_core::adversaries::FamilyConfig;
use pdro_core::data::{
    gen_biased_sequences, gen_toy_gaussian, group_frequencies, merge_small_groups,
    per_group_accuracy, reweighted_average_accuracy, robust_accuracy, BiasedSeqConfig,
    DatasetBundle, GroupId, ToyTaskConfig, MERGED_GROUP,
};
use pdro_core::experiment::{
    evaluate_model, run_cell, train_any, BiasedBenchmark, CellResult, GridPoint, PointAggregate,
    TaskConfig, ToyAblation,
};
use pdro_core::models;
use pdro_core::selection::{
    hyperparam_select, robust_valid_loss, filter_adversaries, SelStat, SelectionCriterion,
    KAPPA_VALID_DEFAULT,
};
use pdro_core::trainer::{MethodConfig, PdroHypers, RunHistory, TrainConfig, Variant};

use crate::formats;

fn float(x: f64) -> String {
    format!("{x:?}")
}

// ---------------------------------------------------------------------------
// Shared option structs (mirrored by clap in main.rs)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DataOptions {
    pub task: String,
    pub seed: u64,
    pub n_train: Option<usize>,
    pub n_valid: Option<usize>,
    pub n_test: Option<usize>,
    pub bias: Option<f64>,
    pub vocab_size: Option<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub method: String,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub model_lr: Option<f64>,
    pub optimizer: Option<String>,
    pub tau: Option<f64>,
    pub k_window: Option<usize>,
    pub adv_lr: Option<f64>,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub nonparam_kappa: Option<f64>,
    pub weight_clip: Option<f64>,
    pub vocab_size: Option<u32>,
}

/// Per-task training defaults; grids from the reference sweep are applied
/// by `grid` when no explicit grid is given.
fn train_defaults(sequence_task: bool) -> TrainOptions {
    TrainOptions {
        epochs: Some(if sequence_task { 30 } else { 40 }),
        batch_size: Some(if sequence_task { 64 } else { 256 }),
        model_lr: Some(if sequence_task { 0.3 } else { 0.1 }),
        optimizer: Some("sgd".into()),
        tau: Some(if sequence_task { 0.1 } else { 0.5 }),
        k_window: Some(if sequence_task { 5 } else { 10 }),
        adv_lr: Some(if sequence_task { 0.1 } else { 0.002 }),
        kappa: Some(1.0),
        eta: Some(0.1),
        nonparam_kappa: Some(1.0),
        ..TrainOptions::default()
    }
}

fn merge(base: &TrainOptions, file: &BTreeMap<String, String>, cli: &TrainOptions) -> TrainOptions {
    fn pick<T: Clone + std::str::FromStr>(
        cli: Option<T>,
        file: Option<&String>,
        base: Option<T>,
    ) -> Option<T> {
        cli.or_else(|| file.and_then(|v| v.parse().ok())).or(base)
    }
    TrainOptions {
        method: if cli.method.is_empty() {
            file.get("method").cloned().unwrap_or_default()
        } else {
            cli.method.clone()
        },
        seed: cli.seed,
        epochs: pick(cli.epochs, file.get("epochs"), base.epochs),
        batch_size: pick(cli.batch_size, file.get("batch_size"), base.batch_size),
        model_lr: pick(cli.model_lr, file.get("model_lr"), base.model_lr),
        optimizer: pick(cli.optimizer.clone(), file.get("optimizer"), base.optimizer.clone()),
        tau: pick(cli.tau, file.get("tau"), base.tau),
        k_window: pick(cli.k_window, file.get("k_window"), base.k_window),
        adv_lr: pick(cli.adv_lr, file.get("adv_lr"), base.adv_lr),
        kappa: pick(cli.kappa, file.get("kappa"), base.kappa),
        eta: pick(cli.eta, file.get("eta"), base.eta),
        nonparam_kappa: pick(cli.nonparam_kappa, file.get("nonparam_kappa"), base.nonparam_kappa),
        weight_clip: pick(cli.weight_clip, file.get("weight_clip"), base.weight_clip),
        vocab_size: pick(cli.vocab_size, file.get("vocab_size"), base.vocab_size),
    }
}

fn method_config(opts: &TrainOptions, sequence_task: bool) -> anyhow::Result<MethodConfig> {
    let family = if sequence_task {
        FamilyConfig::Bigram { alpha: 0.1 }
    } else {
        FamilyConfig::Gaussian { sigma: None }
    };
    let hypers = |variant| PdroHypers {
        variant,
        family: family.clone(),
        tau: opts.tau.unwrap_or(1.0),
        k_window: opts.k_window.unwrap_or(5),
        adv_lr: opts.adv_lr.unwrap_or(0.1),
        kappa: opts.kappa.unwrap_or(1.0),
        n_samples: None,
        weight_clip: opts.weight_clip,
    };
    Ok(match opts.method.as_str() {
        "erm" => MethodConfig::Erm,
        "pdro_bare" => MethodConfig::Pdro(hypers(Variant::Bare)),
        "pdro_kl" => MethodConfig::Pdro(hypers(Variant::KlProjected)),
        "pdro_relaxed" => MethodConfig::Pdro(hypers(Variant::Relaxed)),
        "nonparam" => MethodConfig::NonParam { kappa: opts.nonparam_kappa.unwrap_or(1.0) },
        "groupdro" => MethodConfig::GroupDro { eta: opts.eta.unwrap_or(0.1), soft: false },
        "groupdro_soft" => MethodConfig::GroupDro { eta: opts.eta.unwrap_or(0.1), soft: true },
        other => bail!("unknown method '{other}'"),
    })
}

fn train_config(opts: &TrainOptions, sequence_task: bool) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig {
        method: method_config(opts, sequence_task)?,
        epochs: opts.epochs.unwrap_or(30),
        batch_size: opts.batch_size.unwrap_or(64),
        model_lr: opts.model_lr.unwrap_or(0.1),
        adam: matches!(opts.optimizer.as_deref(), Some("adam")),
        seed: opts.seed,
    })
}

/// The effective configuration echoed verbatim into the run directory.
fn config_echo(opts: &TrainOptions, config: &TrainConfig, data: &DatasetBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method={}", config.method.name());
    let _ = writeln!(out, "seed={}", config.seed);
    let _ = writeln!(out, "epochs={}", config.epochs);
    let _ = writeln!(out, "batch_size={}", config.batch_size);
    let _ = writeln!(out, "model_lr={}", float(config.model_lr));
    let _ = writeln!(out, "optimizer={}", if config.adam { "adam" } else { "sgd" });
    if let MethodConfig::Pdro(h) = &config.method {
        let _ = writeln!(out, "tau={}", float(h.tau));
        let _ = writeln!(out, "k_window={}", h.k_window);
        let _ = writeln!(out, "adv_lr={}", float(h.adv_lr));
        if h.variant == Variant::KlProjected {
            let _ = writeln!(out, "kappa={}", float(h.kappa));
        }
        if let Some(clip) = h.weight_clip {
            let _ = writeln!(out, "weight_clip={}", float(clip));
        }
    }
    if let MethodConfig::NonParam { kappa } = &config.method {
        let _ = writeln!(out, "nonparam_kappa={}", float(*kappa));
    }
    if let MethodConfig::GroupDro { eta, soft } = &config.method {
        let _ = writeln!(out, "eta={}", float(*eta));
        let _ = writeln!(out, "soft={soft}");
    }
    if let Some(v) = opts.vocab_size.or(data.train.vocab_size) {
        let _ = writeln!(out, "vocab_size={v}");
    }
    let _ = writeln!(out, "valid_fingerprint={}", data.valid.fingerprint());
    out
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn gen_data(opts: &DataOptions, out_dir: &Path) -> anyhow::Result<()> {
    let bundle = match opts.task.as_str() {
        "toy" => {
            let mut cfg = ToyTaskConfig::default();
            if let Some(n) = opts.n_train {
                cfg.n_train = n;
            }
            if let Some(n) = opts.n_valid {
                cfg.n_valid = n;
            }
            if let Some(n) = opts.n_test {
                cfg.n_test = n;
            }
            gen_toy_gaussian(&cfg, opts.seed)?
        }
        "biased-seq" | "biased_seq" => {
            let mut cfg = BiasedSeqConfig::default();
            if let Some(n) = opts.n_train {
                cfg.n_train = n;
            }
            if let Some(n) = opts.n_valid {
                cfg.n_valid = n;
            }
            if let Some(n) = opts.n_test {
                cfg.n_test = n;
            }
            if let Some(b) = opts.bias {
                cfg.bias = b;
            }
            if let Some(v) = opts.vocab_size {
                cfg.vocab_size = v;
            }
            gen_biased_sequences(&cfg, opts.seed)?
        }
        other => bail!("unknown task '{other}'"),
    };
    formats::write_bundle(out_dir, &bundle)?;
    Ok(())
}

pub fn train(
    data_dir: &Path,
    out_dir: &Path,
    cli_opts: &TrainOptions,
    config_file: Option<&Path>,
) -> anyhow::Result<RunHistory> {
    let data = formats::read_bundle(data_dir, cli_opts.vocab_size)?;
    let sequence_task = data.train.vocab_size.is_some();
    let file_map = match config_file {
        Some(path) => formats::parse_key_values(&formats::read_to_string(path)?),
        None => BTreeMap::new(),
    };
    let opts = merge(&train_defaults(sequence_task), &file_map, cli_opts);
    if opts.method.is_empty() {
        bail!("--method is required (or 'method' in the config file)");
    }
    let config = train_config(&opts, sequence_task)?;
    let history = train_any(&config, &data).context("training failed")?;
    formats::write_run_dir(out_dir, &history, &config_echo(&opts, &config, &data))?;
    Ok(history)
}

/// Apply a selection criterion to one or more stored runs. With several
/// runs, Minmax-style criteria pool the kept adversaries across all of them.
pub fn select(
    run_dirs: &[&Path],
    data_dir: &Path,
    criterion: SelectionCriterion,
    stat: SelStat,
) -> anyhow::Result<(usize, usize, f64, usize, String)> {
    if run_dirs.is_empty() {
        bail!("need at least one --run directory");
    }
    let data = formats::read_bundle(data_dir, None)?;
    let mut histories = Vec::new();
    for dir in run_dirs {
        let stored = formats::read_run_dir(dir)?;
        if let Some(fp) = stored.config.get("valid_fingerprint") {
            if fp != &data.valid.fingerprint().to_string() {
                bail!("{}: run was trained on different validation data", dir.display());
            }
        }
        histories.push(formats::rebuild_history(&stored, &data)?);
    }
    let groups: Vec<GroupId> = data.valid.examples.iter().map(|e| e.group).collect();

    let (run_idx, epoch) = if histories.len() == 1 {
        (0, criterion.select(&histories[0], Some(&groups), stat)?)
    } else {
        match criterion {
            SelectionCriterion::Minmax
            | SelectionCriterion::MinmaxKl
            | SelectionCriterion::GreedyMinmax => {
                let kappa = if criterion == SelectionCriterion::Minmax {
                    f64::INFINITY
                } else {
                    KAPPA_VALID_DEFAULT
                };
                let refs: Vec<&RunHistory> = histories.iter().collect();
                hyperparam_select(&refs, kappa, stat)?
            }
            _ => {
                // Per-run choice, then the run with the best criterion value.
                let mut best: Option<(f64, usize, usize)> = None;
                for (r, h) in histories.iter().enumerate() {
                    let t = criterion.select(h, Some(&groups), stat)?;
                    let rec = &h.records[t];
                    let value = rec.errors.iter().sum::<f64>() / rec.errors.len() as f64;
                    if best.map_or(true, |(v, _, _)| value < v) {
                        best = Some((value, r, t));
                    }
                }
                let (_, r, t) = best.expect("non-empty runs");
                (r, t)
            }
        }
    };
    let chosen = &histories[run_idx];
    let kept = filter_adversaries(&chosen.records, KAPPA_VALID_DEFAULT);
    let pooled: usize = histories
        .iter()
        .map(|h| filter_adversaries(&h.records, KAPPA_VALID_DEFAULT).len())
        .sum();
    let robust_valid =
        robust_valid_loss(&chosen.records[epoch], &chosen.records, &kept, stat)?;
    let run_name = run_dirs[run_idx].display().to_string();
    Ok((run_idx, epoch, robust_valid, pooled, run_name))
}

pub fn selection_report(
    criterion: SelectionCriterion,
    run_name: &str,
    epoch: usize,
    robust_valid: f64,
    pooled: usize,
) -> String {
    let mut out = String::from("criterion\trun\tepoch\trobust_valid_error\tpooled_adversaries\n");
    let _ = writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}",
        criterion.as_str(),
        run_name,
        epoch,
        float(robust_valid),
        pooled
    );
    out
}

pub fn evaluate(
    data_dir: &Path,
    model_path: &Path,
    min_group_size: usize,
) -> anyhow::Result<String> {
    let data = formats::read_bundle(data_dir, None)?;
    let params = formats::model_from_str(&formats::read_to_string(model_path)?, model_path)?;
    let scheme = merge_small_groups(&data.test, min_group_size);
    let preds = models::predictions(&data.test.examples, &params)?;
    let per_group = per_group_accuracy(&data.test, &preds, &scheme)?;
    let robust = robust_accuracy(&per_group)?;
    let freqs = group_frequencies(&data.train, &scheme);
    let average = reweighted_average_accuracy(&per_group, &freqs)?;
    let mut out = String::from("group\taccuracy\tcount_weight\n");
    for (g, acc) in &per_group {
        let name = if *g == MERGED_GROUP { "merged".to_string() } else { g.to_string() };
        let _ = writeln!(out, "{}\t{}\t{}", name, float(*acc), float(freqs[g]));
    }
    let _ = writeln!(out, "robust\t{}\t-", float(robust));
    let _ = writeln!(out, "average\t{}\t-", float(average));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid sweeps and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub task: String,
    pub preset: Option<String>,
    pub method: Option<String>,
    pub seeds: Vec<u64>,
    pub selection: SelectionCriterion,
    pub tau_grid: Option<Vec<f64>>,
    pub adv_lr_grid: Option<Vec<f64>>,
    pub kappa_grid: Option<Vec<f64>>,
    pub eta_grid: Option<Vec<f64>>,
    pub k_grid: Option<Vec<usize>>,
    pub jobs: Option<usize>,
}

fn cells_tsv(cells: &[CellResult]) -> String {
    let mut out =
        String::from("method\tpoint\tseed\tchosen_epoch\trobust\taverage\taborted\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.method,
            c.point,
            c.seed,
            c.chosen_epoch,
            float(c.robust),
            float(c.average),
            c.aborted.as_deref().unwrap_or("-")
        );
    }
    out
}

fn aggregates_tsv(aggregates: &[PointAggregate]) -> String {
    let mut out = String::from(
        "method\tpoint\tn_seeds\tn_aborted\trobust_mean\trobust_std\taverage_mean\taverage_std\n",
    );
    for a in aggregates {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            a.method,
            a.point,
            a.n_seeds,
            a.n_aborted,
            float(a.robust_mean),
            float(a.robust_std),
            float(a.average_mean),
            float(a.average_std)
        );
    }
    out
}

/// The reference sweep values used when no explicit grid is passed.
fn default_grid(method: &str, opts: &GridOptions, sequence_task: bool) -> Vec<GridPoint> {
    let family = if sequence_task {
        FamilyConfig::Bigram { alpha: 0.1 }
    } else {
        FamilyConfig::Gaussian { sigma: None }
    };
    let taus = opts.tau_grid.clone().unwrap_or_else(|| vec![0.1, 0.01, 0.001]);
    let lrs = opts.adv_lr_grid.clone().unwrap_or_else(|| vec![1e-5, 1e-4, 1e-3]);
    let ks = opts.k_grid.clone().unwrap_or_else(|| vec![5]);
    let kappas = opts.kappa_grid.clone().unwrap_or_else(|| vec![0.01, 0.1, 1.0, 10.0]);
    let etas = opts.eta_grid.clone().unwrap_or_else(|| vec![1.0, 0.1, 0.01]);
    let mut grid = Vec::new();
    match method {
        "erm" => grid.push(GridPoint { label: "-".into(), method: MethodConfig::Erm }),
        "pdro_relaxed" | "pdro_bare" | "pdro_kl" => {
            let variant = match method {
                "pdro_bare" => Variant::Bare,
                "pdro_kl" => Variant::KlProjected,
                _ => Variant::Relaxed,
            };
            for &tau in &taus {
                for &lr in &lrs {
                    for &k in &ks {
                        for &kappa in if variant == Variant::KlProjected {
                            kappas.as_slice()
                        } else {
                            &[1.0][..]
                        } {
                            let mut label = format!("tau={tau},adv_lr={lr},k={k}");
                            if variant == Variant::KlProjected {
                                label.push_str(&format!(",kappa={kappa}"));
                            }
                            grid.push(GridPoint {
                                label,
                                method: MethodConfig::Pdro(PdroHypers {
                                    variant,
                                    family: family.clone(),
                                    tau,
                                    k_window: k,
                                    adv_lr: lr,
                                    kappa,
                                    n_samples: None,
                                    weight_clip: None,
                                }),
                            });
                        }
                    }
                }
            }
        }
        "nonparam" => {
            for &kappa in &kappas {
                grid.push(GridPoint {
                    label: format!("kappa={kappa}"),
                    method: MethodConfig::NonParam { kappa },
                });
            }
        }
        "groupdro" | "groupdro_soft" => {
            for &eta in &etas {
                grid.push(GridPoint {
                    label: format!("eta={eta}"),
                    method: MethodConfig::GroupDro {
                        eta,
                        soft: method == "groupdro_soft",
                    },
                });
            }
        }
        _ => {}
    }
    grid
}

pub fn grid(opts: &GridOptions, out_dir: &Path) -> anyhow::Result<()> {
    if let Some(preset) = &opts.preset {
        return run_preset(preset, &opts.seeds, opts.jobs, out_dir);
    }
    let method = opts
        .method
        .as_deref()
        .ok_or_else(|| anyhow!("--method or --preset is required"))?;
    let task = match opts.task.as_str() {
        "toy" => TaskConfig::Toy(ToyTaskConfig::default()),
        "biased-seq" | "biased_seq" => TaskConfig::BiasedSeq(BiasedSeqConfig::default()),
        other => bail!("unknown task '{other}'"),
    };
    let sequence_task = matches!(task, TaskConfig::BiasedSeq(_));
    let grid = default_grid(method, opts, sequence_task);
    if grid.is_empty() {
        bail!("empty hyper-parameter grid for method '{method}'");
    }
    let defaults = train_defaults(sequence_task);
    let cfg = pdro_core::experiment::ExperimentConfig {
        task,
        grid,
        seeds: opts.seeds.clone(),
        epochs: defaults.epochs.unwrap(),
        batch_size: defaults.batch_size.unwrap(),
        model_lr: defaults.model_lr.unwrap(),
        adam: false,
        selection: opts.selection,
        stat: SelStat::ZeroOne,
        min_group_size: 100,
    };
    let table = pdro_core::experiment::run_experiment(&cfg)?;
    formats::write_string(&out_dir.join("cells.tsv"), &cells_tsv(&table.cells))?;
    let mut aggregates = table.aggregates.clone();
    if let Some(sel) = table.selected_aggregate.clone() {
        aggregates.push(sel);
    }
    formats::write_string(&out_dir.join("aggregate.tsv"), &aggregates_tsv(&aggregates))?;
    if !table.selected.is_empty() {
        formats::write_string(&out_dir.join("selected.tsv"), &cells_tsv(&table.selected))?;
    }
    Ok(())
}

/// Run one benchmark preset, parallelized over seeds.
fn run_preset(
    preset: &str,
    seeds: &[u64],
    jobs: Option<usize>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match preset {
        "toy-ablation" => {
            let mut ablation = ToyAblation::default();
            if !seeds.is_empty() {
                ablation.seeds = seeds.to_vec();
            }
            // Seeds are independent; run them in parallel and merge in
            // deterministic order.
            let per_seed: Vec<ToyAblation> = ablation
                .seeds
                .iter()
                .map(|&s| ToyAblation { seeds: vec![s], ..ablation.clone() })
                .collect();
            let tables: Vec<_> = per_seed
                .par_iter()
                .map(|a| a.run())
                .collect::<Result<Vec<_>, _>>()?;
            let mut cells = Vec::new();
            for t in tables {
                cells.extend(t.cells);
            }
            cells.sort_by(|a, b| {
                (&a.method, &a.point, a.seed).cmp(&(&b.method, &b.point, b.seed))
            });
            // Recompute the per-variant rows from the merged cells.
            let full = ablation.rows_from_cells(&cells);
            formats::write_string(&out_dir.join("cells.tsv"), &cells_tsv(&cells))?;
            let mut table = String::from(
                "variant\tbest_point\trobust_mean\trobust_std\taverage_mean\taverage_std\n",
            );
            for row in &full {
                let _ = writeln!(
                    table,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    row.variant,
                    row.best_point,
                    float(row.robust_mean),
                    float(row.robust_std),
                    float(row.average_mean),
                    float(row.average_std)
                );
            }
            formats::write_string(&out_dir.join("ablation.tsv"), &table)?;
        }
        "biased-bench" => {
            let mut bench = BiasedBenchmark::default();
            if !seeds.is_empty() {
                bench.seeds = seeds.to_vec();
            }
            let per_seed: Vec<BiasedBenchmark> = bench
                .seeds
                .iter()
                .map(|&s| BiasedBenchmark { seeds: vec![s], ..bench.clone() })
                .collect();
            let tables: Vec<_> = per_seed
                .par_iter()
                .map(|b| b.run())
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = String::from(
                "seed\term_robust\term_average\tpdro_robust\tpdro_average\tpdro_avgstop_robust\tpdro_avgstop_average\toracledro_robust\toracledro_average\n",
            );
            for t in &tables {
                for o in &t.outcomes {
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        o.seed,
                        float(o.erm.0),
                        float(o.erm.1),
                        float(o.pdro_minmax.0),
                        float(o.pdro_minmax.1),
                        float(o.pdro_average_stop.0),
                        float(o.pdro_average_stop.1),
                        float(o.oracle_dro.0),
                        float(o.oracle_dro.1)
                    );
                }
            }
            formats::write_string(&out_dir.join("bench.tsv"), &out)?;
        }
        other => bail!("unknown preset '{other}' (expected toy-ablation or biased-bench)"),
    }
    Ok(())
}

/// Aggregate a grid directory into a mean ± std report.
pub fn report(dir: &Path) -> anyhow::Result<String> {
    let ablation = dir.join("ablation.tsv");
    if ablation.exists() {
        return Ok(formats::read_to_string(&ablation)?);
    }
    let bench = dir.join("bench.tsv");
    if bench.exists() {
        let text = formats::read_to_string(&bench)?;
        return Ok(bench_report(&text));
    }
    let cells_path = dir.join("cells.tsv");
    let text = formats::read_to_string(&cells_path)?;
    let mut cells: Vec<CellResult> = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            bail!("{}:{}: malformed cells row", cells_path.display(), no + 1);
        }
        cells.push(CellResult {
            method: f[0].into(),
            point: f[1].into(),
            seed: f[2].parse()?,
            chosen_epoch: f[3].parse()?,
            robust: f[4].parse()?,
            average: f[5].parse()?,
            aborted: if f[6] == "-" { None } else { Some(f[6].into()) },
        });
    }
    let mut keys: Vec<(String, String)> = cells
        .iter()
        .map(|c| (c.method.clone(), c.point.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    let mut aggregates = Vec::new();
    for (method, point) in keys {
        let of: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.method == method && c.point == point && c.robust.is_finite())
            .collect();
        if !of.is_empty() {
            aggregates.push(pdro_core::experiment::aggregate(&method, &point, &of));
        }
    }
    Ok(aggregates_tsv(&aggregates))
}

fn bench_report(text: &str) -> String {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().skip(1) {
        let vals: Vec<f64> = line.split('\t').skip(1).filter_map(|v| v.parse().ok()).collect();
        if vals.len() == 8 {
            rows.push(vals);
        }
    }
    let n = rows.len().max(1) as f64;
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    let std = |i: usize| {
        if rows.len() < 2 {
            return 0.0;
        }
        let m = mean(i);
        let ss: f64 = rows.iter().map(|r| (r[i] - m) * (r[i] - m)).sum();
        (ss / (rows.len() - 1) as f64).sqrt()
    };
    let mut out = String::from("method\trobust_mean\trobust_std\taverage_mean\taverage_std\n");
    for (name, base) in [
        ("erm", 0usize),
        ("pdro_minmax_kl", 2),
        ("pdro_average_stop", 4),
        ("oracle_dro", 6),
    ] {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            name,
            float(mean(base)),
            float(std(base)),
            float(mean(base + 1)),
            float(std(base + 1))
        );
    }
    out
}

/// Evaluate a stored checkpoint of a run directory on a dataset (used by
/// the pipeline test and the `evaluate` subcommand via `final.model`).
pub fn evaluate_run_checkpoint(
    run_dir: &Path,
    data_dir: &Path,
    epoch: usize,
    min_group_size: usize,
) -> anyhow::Result<(f64, f64)> {
    let data = formats::read_bundle(data_dir, None)?;
    let path = run_dir.join(format!("checkpoints/epoch_{epoch:04}.model"));
    let params = formats::model_from_str(&formats::read_to_string(&path)?, &path)?;
    let eval = evaluate_model(&params, &data, min_group_size)?;
    Ok((eval.robust, eval.average))
}

