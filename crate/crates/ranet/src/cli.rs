//! Command-line front end: build, train, calibrate, evaluate, export.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::builder::{build_graph, NetworkGraph};
use crate::calib::{anytime_curve_csv, budget_report_csv, evaluate_budgeted, threshold_for_budget};
use crate::config::{default_step_mode, load_preset, validate_or_error, RANetConfig, StepMode, PRESET_NAMES};
use crate::data::{channel_stats, load_cifar10_binary, normalize, synthesize_dataset, Dataset};
use crate::error::{Error, Result};
use crate::scheduler::collect_traces;
use crate::trainer::{
    load_checkpoint, save_checkpoint, train, verify_checkpoint_matches, Checkpoint, TrainConfig,
};

#[derive(Parser)]
#[command(name = "ranet", version, about = "Multi-scale early-exit network engine")]
pub struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a network and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Report each classifier's accuracy against its cumulative cost.
    EvalAnytime(EvalArgs),
    /// Calibrate thresholds per budget on validation data, evaluate on test.
    EvalBudgeted(BudgetArgs),
    /// Solve thresholds for budgets on validation data; report only.
    Calibrate(BudgetArgs),
    /// Print the per-classifier cumulative MAC table of a config.
    Flops(ConfigArgs),
    /// Write the full layer table of a config.
    ExportGraph(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name or path to a TOML config file.
    #[arg(long)]
    config: String,
    /// Dense layers per block: "even:N" or "lg:BASE:INC".
    #[arg(long)]
    step_mode: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to $RANET_OUT_DIR, then the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// "synthetic" or a path to a CIFAR-10 binary batch file.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Shape-rendering difficulty in [0, 1] for synthetic data.
    #[arg(long, default_value_t = 0.5)]
    difficulty: f64,
    /// Synthetic samples per class in the training split.
    #[arg(long, default_value_t = 500)]
    train_per_class: usize,
    /// Synthetic samples per class in each of the val and test splits.
    #[arg(long, default_value_t = 125)]
    eval_per_class: usize,
    /// Validation holdout taken from a CIFAR training file.
    #[arg(long, default_value_t = 5000)]
    holdout: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    /// Epochs at which the learning rate decays by --lr-factor.
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.1)]
    lr_factor: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct BudgetArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Budgets: fractions of full-network cost (0 < b <= 1) or absolute MACs.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
    budgets: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

fn parse_step_mode(text: &str) -> Result<StepMode> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["even", n] => n
            .parse()
            .map(|step| StepMode::Even { step })
            .map_err(|_| Error::Usage(format!("bad step count '{}'", n))),
        ["lg", b, i] => match (b.parse(), i.parse()) {
            (Ok(base), Ok(increment)) => Ok(StepMode::LinearGrowth { base, increment }),
            _ => Err(Error::Usage(format!("bad linear-growth spec '{}'", text))),
        },
        _ => Err(Error::Usage(format!(
            "step mode '{}' not understood; use even:N or lg:BASE:INC",
            text
        ))),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RANetConfig> {
    let cfg = if PRESET_NAMES.contains(&args.config.as_str()) {
        let step = match &args.step_mode {
            Some(s) => parse_step_mode(s)?,
            None => default_step_mode(&args.config),
        };
        load_preset(&args.config, step)?
    } else {
        let text = std::fs::read_to_string(&args.config).map_err(|e| {
            Error::Usage(format!(
                "'{}' is neither a preset ({}) nor a readable file: {}",
                args.config,
                PRESET_NAMES.join(", "),
                e
            ))
        })?;
        RANetConfig::from_toml(&text)?
    };
    validate_or_error(&cfg)?;
    Ok(cfg)
}

fn out_dir(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os("RANET_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load or synthesize (train, val, test), normalized by training statistics.
fn resolve_data(
    args: &DataArgs,
    cfg: &RANetConfig,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (mut train_set, mut val_set, mut test_set) = if args.data == "synthetic" {
        if cfg.input_resolution.0 != cfg.input_resolution.1 {
            return Err(Error::Usage("synthetic data needs a square input resolution".into()));
        }
        let res = cfg.input_resolution.0;
        let tr = synthesize_dataset(seed, args.train_per_class, res, args.difficulty)?;
        let va = synthesize_dataset(seed ^ 0x5eed_0001, args.eval_per_class, res, args.difficulty)?;
        let te = synthesize_dataset(seed ^ 0x5eed_0002, args.eval_per_class, res, args.difficulty)?;
        (tr, va, te)
    } else {
        let full = load_cifar10_binary(Path::new(&args.data))?;
        if args.holdout < 2 {
            return Err(Error::Usage("holdout must be at least 2 to cover val and test".into()));
        }
        let (tr, held) = full.split_holdout(args.holdout)?;
        let n_test = held.len() / 2;
        let (va, te) = held.split_holdout(n_test)?;
        (tr, va, te)
    };
    if train_set.num_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network outputs {}",
            train_set.num_classes, cfg.num_classes
        )));
    }
    let stats = channel_stats(&train_set)?;
    normalize(&mut train_set, &stats);
    normalize(&mut val_set, &stats);
    normalize(&mut test_set, &stats);
    Ok((train_set, val_set, test_set))
}

fn load_for_eval(args_ckpt: &Path) -> Result<(Checkpoint, NetworkGraph)> {
    let ckpt = load_checkpoint(args_ckpt)?;
    let graph = build_graph(&ckpt.config, 0)?;
    verify_checkpoint_matches(&graph, &ckpt.store)?;
    Ok((ckpt, graph))
}

fn to_macs(budget: f64, full_cost: u64) -> f64 {
    if budget <= 1.0 {
        budget * full_cost as f64
    } else {
        budget
    }
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Verb::Flops(args) => {
            let cfg = resolve_config(&args)?;
            let graph = build_graph(&cfg, args.seed)?;
            println!("{:>10} {:>14}", "classifier", "MACs");
            for (k, cost) in graph.classifier_costs().iter().enumerate() {
                println!("{:>10} {:>14}", k + 1, cost);
            }
            println!("full-network cost: {} MACs", graph.full_cost());
        }
        Verb::ExportGraph(args) => {
            let cfg = resolve_config(&args)?;
            let graph = build_graph(&cfg, args.seed)?;
            let dir = out_dir(&args.out);
            write_report(&dir, "graph.txt", &graph.summary())?;
            write_report(&dir, "config.toml", &cfg.to_toml())?;
            println!("wrote {} and {}", dir.join("graph.txt").display(), dir.join("config.toml").display());
        }
        Verb::Train(args) => {
            let cfg = resolve_config(&args.config)?;
            let graph = build_graph(&cfg, args.config.seed)?;
            let (train_set, val_set, test_set) =
                resolve_data(&args.data, &cfg, args.config.seed)?;
            let tcfg = TrainConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                momentum: args.momentum,
                weight_decay: args.weight_decay,
                lr_milestones: args.lr_milestones.unwrap_or_else(|| {
                    let mut m = vec![args.epochs / 2, args.epochs * 3 / 4];
                    m.retain(|&e| e > 0 && e < args.epochs);
                    m.dedup();
                    m
                }),
                lr_factor: args.lr_factor,
                loss_weights: Vec::new(),
                augment: !args.no_augment,
                seed: args.config.seed,
            };
            let mut store = graph.params.clone();
            let report = train(&graph, &mut store, &train_set, &val_set, &tcfg)?;
            let dir = out_dir(&args.config.out);
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&dir.join("checkpoint.bin"), &cfg, &store, &report.final_val_accuracy())?;
            write_report(&dir, "train_log.csv", &report.to_csv())?;
            let last = report.epochs.last().unwrap();
            println!(
                "trained {} epochs; final train loss {:.4}; val accuracy {:?}",
                args.epochs, last.train_loss, last.val_accuracy
            );
            let trace =
                collect_traces(&graph, &mut store, &test_set.images(), &test_set.labels(), args.batch_size)?;
            write_report(&dir, "anytime_test.csv", &anytime_curve_csv(&trace))?;
            println!("checkpoint and reports in {}", dir.display());
        }
        Verb::EvalAnytime(args) => {
            let (mut ckpt, graph) = load_for_eval(&args.checkpoint)?;
            let (_, _, test_set) = resolve_data(&args.data, &ckpt.config, args.seed)?;
            let trace = collect_traces(
                &graph,
                &mut ckpt.store,
                &test_set.images(),
                &test_set.labels(),
                args.batch_size,
            )?;
            let csv = anytime_curve_csv(&trace);
            print!("{}", csv);
            write_report(&out_dir(&args.out), "anytime.csv", &csv)?;
        }
        Verb::Calibrate(args) => {
            let (mut ckpt, graph) = load_for_eval(&args.checkpoint)?;
            let (_, val_set, _) = resolve_data(&args.data, &ckpt.config, args.seed)?;
            let trace = collect_traces(
                &graph,
                &mut ckpt.store,
                &val_set.images(),
                &val_set.labels(),
                args.batch_size,
            )?;
            let mut csv = String::from("budget_macs,epsilon,expected_cost\n");
            for &b in &args.budgets {
                let macs = to_macs(b, graph.full_cost());
                let (eps, cost) = threshold_for_budget(&trace, macs)?;
                println!("budget {:.3e} MACs -> epsilon {} (expected cost {:.3e})", macs, eps, cost);
                csv.push_str(&format!("{},{},{}\n", macs, eps, cost));
            }
            write_report(&out_dir(&args.out), "calibration.csv", &csv)?;
        }
        Verb::EvalBudgeted(args) => {
            let (mut ckpt, graph) = load_for_eval(&args.checkpoint)?;
            let (_, val_set, test_set) = resolve_data(&args.data, &ckpt.config, args.seed)?;
            let val_trace = collect_traces(
                &graph,
                &mut ckpt.store,
                &val_set.images(),
                &val_set.labels(),
                args.batch_size,
            )?;
            let test_trace = collect_traces(
                &graph,
                &mut ckpt.store,
                &test_set.images(),
                &test_set.labels(),
                args.batch_size,
            )?;
            let mut reports = Vec::new();
            for &b in &args.budgets {
                let macs = to_macs(b, graph.full_cost());
                let r = evaluate_budgeted(&val_trace, &test_trace, macs)?;
                println!(
                    "budget {:.3e} MACs: epsilon {}, realized cost {:.3e}, accuracy {:.4}",
                    r.budget_macs, r.epsilon, r.realized_cost, r.accuracy
                );
                reports.push(r);
            }
            write_report(&out_dir(&args.out), "budgeted.csv", &budget_report_csv(&reports))?;
        }
    }
    Ok(())
}
