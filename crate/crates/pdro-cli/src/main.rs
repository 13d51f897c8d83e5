use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdro_cli::commands::{self, DataOptions, GridOptions, TrainOptions};
use pdro_cli::formats;
use pdro_core::selection::{SelStat, SelectionCriterion};

#[derive(Parser)]
#[command(
    name = "pdro",
    about = "Distributionally robust training with parametric generative adversaries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset (train/valid/test TSVs).
    GenData(GenDataArgs),
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Apply a stopping / selection criterion to stored runs.
    Select(SelectArgs),
    /// Evaluate a model checkpoint: per-group, robust and average accuracy.
    Evaluate(EvaluateArgs),
    /// Run a hyper-parameter grid or a benchmark preset.
    Grid(GridArgs),
    /// Aggregate a grid directory into a mean ± std table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task: toy | biased-seq
    #[arg(long)]
    task: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Distractor bias of the sequence task (fraction of negatives marked).
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.tsv / valid.tsv / test.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// erm | pdro_bare | pdro_kl | pdro_relaxed | nonparam | groupdro | groupdro_soft
    #[arg(long, default_value = "")]
    method: String,
    #[arg(long)]
    seed: u64,
    /// Optional key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    model_lr: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_window: Option<usize>,
    #[arg(long)]
    adv_lr: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    nonparam_kappa: Option<f64>,
    #[arg(long)]
    weight_clip: Option<f64>,
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Args)]
struct SelectArgs {
    /// Run directory; repeat to pool adversaries across runs.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// average | minmax | minmax-kl | greedy-minmax | oracle | final
    #[arg(long, default_value = "greedy-minmax")]
    criterion: String,
    /// zero-one | nll
    #[arg(long, default_value = "zero-one")]
    stat: String,
    /// Write the selection report TSV here (defaults to stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    min_group_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// toy | biased-seq
    #[arg(long, default_value = "toy")]
    task: String,
    /// toy-ablation | biased-bench
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long, default_value = "greedy-minmax")]
    selection: String,
    #[arg(long, value_delimiter = ',')]
    tau_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    adv_lr_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    kappa_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    /// Worker threads for independent runs (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Grid output directory.
    dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_stat(text: &str) -> anyhow::Result<SelStat> {
    match text {
        "zero-one" | "zero_one" => Ok(SelStat::ZeroOne),
        "nll" => Ok(SelStat::Nll),
        other => anyhow::bail!("unknown statistic '{other}'"),
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let opts = DataOptions {
                task: args.task,
                seed: args.seed,
                n_train: args.n_train,
                n_valid: args.n_valid,
                n_test: args.n_test,
                bias: args.bias,
                vocab_size: args.vocab_size,
            };
            commands::gen_data(&opts, &args.out)
        }
        Command::Train(args) => {
            let opts = TrainOptions {
                method: args.method,
                seed: args.seed,
                epochs: args.epochs,
                batch_size: args.batch_size,
                model_lr: args.model_lr,
                optimizer: args.optimizer,
                tau: args.tau,
                k_window: args.k_window,
                adv_lr: args.adv_lr,
                kappa: args.kappa,
                eta: args.eta,
                nonparam_kappa: args.nonparam_kappa,
                weight_clip: args.weight_clip,
                vocab_size: args.vocab_size,
            };
            commands::train(&args.data, &args.out, &opts, args.config.as_deref())?;
            Ok(())
        }
        Command::Select(args) => {
            let criterion = SelectionCriterion::parse(&args.criterion.replace('-', "_"))?;
            let stat = parse_stat(&args.stat)?;
            let dirs: Vec<&std::path::Path> = args.run.iter().map(|p| p.as_path()).collect();
            let (_, epoch, robust_valid, pooled, run_name) =
                commands::select(&dirs, &args.data, criterion, stat)?;
            let report =
                commands::selection_report(criterion, &run_name, epoch, robust_valid, pooled);
            print!("{report}");
            if let Some(out) = args.out {
                formats::write_string(&out, &report)?;
            }
            Ok(())
        }
        Command::Evaluate(args) => {
            let table = commands::evaluate(&args.data, &args.model, args.min_group_size)?;
            print!("{table}");
            if let Some(out) = args.out {
                formats::write_string(&out, &table)?;
            }
            Ok(())
        }
        Command::Grid(args) => {
            let opts = GridOptions {
                task: args.task,
                preset: args.preset,
                method: args.method,
                seeds: args.seeds,
                selection: SelectionCriterion::parse(&args.selection.replace('-', "_"))?,
                tau_grid: args.tau_grid,
                adv_lr_grid: args.adv_lr_grid,
                kappa_grid: args.kappa_grid,
                eta_grid: args.eta_grid,
                k_grid: args.k_grid,
                jobs: args.jobs,
            };
            commands::grid(&opts, &args.out)
        }
        Command::Report(args) => {
            let table = commands::report(&args.dir)?;
            print!("{table}");
            if let Some(out) = args.out {
                formats::write_string(&out, &table)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("pdro: {err}");
            ExitCode::FAILURE
        }
    }
}
