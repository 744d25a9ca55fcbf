use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use chanprune::costmodel::{estimate_step_time, flop_count, padded_bytes, DeviceProfile, LayoutConfig};
use chanprune::data::{load_cifar10, synth_dataset, Dataset};
use chanprune::engine::{evaluate_with_loss, train, Hyperparams};
use chanprune::harness::{run_experiment, ExperimentConfig, RESULTS_CSV};
use chanprune::importance::{make_plan, score};
use chanprune::surgery::apply_plan;
use chanprune::{io, Error, Method, ModelGraph, Preset, Result, Scope, WeightPolicy};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "chanprune", version, about = "Train, prune and measure small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset from scratch and save it.
    Train(TrainArgs),
    /// Remove channels from a saved model.
    Prune(PruneArgs),
    /// Accuracy and loss of a saved model on the test split.
    Eval(EvalArgs),
    /// Run a full sweep described by a JSON config.
    Sweep(SweepArgs),
    /// Print a JSON summary of a model, its importance scores and a plan.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Synthetic,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetArg,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// CIFAR-10 classes to keep, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u32>>,
    /// Stratified fraction of each split to keep.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 400)]
    synthetic_test: usize,
    #[arg(long, default_value_t = 2)]
    synthetic_classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "tiny")]
    preset: Preset,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value = "l1")]
    method: Method,
    #[arg(long, default_value = "per_layer")]
    scope: Scope,
    /// Copy surviving weights from the original (default).
    #[arg(long, overrides_with = "no_reload")]
    reload: bool,
    /// Re-initialize the pruned model instead of copying weights.
    #[arg(long)]
    no_reload: bool,
    /// Seed for re-initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Saved model to inspect.
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Freshly initialized preset to inspect.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    #[arg(long, default_value = "l1")]
    method: Method,
    #[arg(long, default_value = "per_layer")]
    scope: Scope,
    /// Also print the plan for this ratio.
    #[arg(long)]
    ratio: Option<f64>,
    /// Batch size for memory and step-time estimates.
    #[arg(long, default_value_t = 128)]
    batch: usize,
}

fn load_data(args: &DataArgs, shape: [usize; 3]) -> Result<(Dataset, Dataset)> {
    let (train_set, test_set) = match args.dataset {
        DatasetArg::Cifar10 => {
            let dir = args
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::Config("--dataset cifar10 needs --data-dir".into()))?;
            load_cifar10(dir)?
        }
        DatasetArg::Synthetic => (
            synth_dataset(0, args.synthetic_train, args.synthetic_classes, shape)?,
            synth_dataset(1, args.synthetic_test, args.synthetic_classes, shape)?,
        ),
    };
    let (train_set, test_set) = match &args.classes {
        Some(c) => (train_set.filter_classes(c)?, test_set.filter_classes(c)?),
        None => (train_set, test_set),
    };
    if args.fraction < 1.0 {
        Ok((train_set.take_fraction(args.fraction)?, test_set.take_fraction(args.fraction)?))
    } else {
        Ok((train_set, test_set))
    }
}

fn print(value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn graph_summary(g: &ModelGraph, batch: usize) -> Result<serde_json::Value> {
    let shapes = g.infer_shapes(1)?;
    let layers: Vec<_> = g
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| json!({"id": l.id(), "kind": l.kind(), "output_shape": s, "params": l.param_count()}))
        .collect();
    let layout = LayoutConfig::default();
    let bytes = padded_bytes(g, &layout, batch)?;
    Ok(json!({
        "input_shape": g.input_shape,
        "num_classes": g.num_classes,
        "param_count": g.param_count(),
        "fingerprint": g.fingerprint(),
        "layers": layers,
        "batch": batch,
        "flops_forward": flop_count(g, batch)?,
        "padded_weight_bytes": bytes.weight_bytes,
        "padded_activation_bytes": bytes.activation_bytes,
        "padded_total_bytes": bytes.total,
        "est_step_ms": 1e3 * estimate_step_time(g, &layout, &DeviceProfile::default(), batch)?,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let (train_set, test_set) = load_data(&a.data, a.preset.input_shape())?;
            let hp = Hyperparams {
                batch_size: a.batch_size,
                max_epochs: a.epochs,
                learning_rate: a.lr,
                momentum: a.momentum,
                seed: a.seed,
                ..Default::default()
            };
            hp.validate()?;
            let start = ModelGraph::preset(a.preset, train_set.num_classes, a.seed)?;
            let (model, log) = train(&start, &train_set, &test_set, &hp)?;
            io::save(&model, &a.out)?;
            let epochs: Vec<_> = log
                .epochs
                .iter()
                .map(|e| {
                    json!({"epoch": e.epoch, "train_loss": e.train_loss, "train_accuracy": e.train_accuracy,
                           "val_loss": e.val_loss, "val_accuracy": e.val_accuracy, "seconds": e.epoch_wall_seconds})
                })
                .collect();
            print(json!({"model": a.out, "param_count": model.param_count(), "epochs": epochs}))
        }
        Command::Prune(a) => {
            if !(0.0..1.0).contains(&a.ratio) {
                return Err(Error::invalid(format!("--ratio must be in [0, 1), got {}", a.ratio)));
            }
            let original = io::load(&a.model)?;
            let report = score(&original, a.method)?;
            let plan = make_plan(&report, a.ratio, a.scope)?;
            let policy = if a.no_reload && !a.reload {
                WeightPolicy::Reinit { seed: a.seed }
            } else {
                WeightPolicy::Reload
            };
            let pruned = apply_plan(&original, &plan, policy)?;
            io::save(&pruned, &a.out)?;
            print(json!({
                "model": a.out,
                "removed_channels": plan.removed_channels(),
                "param_count_before": original.param_count(),
                "param_count_after": pruned.param_count(),
                "plan": plan,
            }))
        }
        Command::Eval(a) => {
            let model = io::load(&a.model)?;
            let (_, test_set) = load_data(&a.data, model.input_shape)?;
            let (accuracy, loss) = evaluate_with_loss(&model, &test_set)?;
            print(json!({"samples": test_set.len(), "accuracy": accuracy, "loss": loss}))
        }
        Command::Sweep(a) => {
            let mut config = ExperimentConfig::from_file(&a.config)?;
            if let Some(out) = a.out {
                config.out_dir = out;
            }
            let records = run_experiment(&config)?;
            let failed = records.iter().filter(|r| r.is_failed()).count();
            print(json!({"rows": records.len(), "failed": failed, "csv": config.out_dir.join(RESULTS_CSV)}))
        }
        Command::Inspect(a) => {
            let graph = match (&a.model, a.preset) {
                (Some(path), _) => io::load(path)?,
                (None, Some(p)) => ModelGraph::preset(p, a.num_classes, 0)?,
                (None, None) => return Err(Error::InvalidArgument("pass --model or --preset".into())),
            };
            let report = score(&graph, a.method)?;
            let plan = match a.ratio {
                Some(r) => Some(make_plan(&report, r, a.scope)?),
                None => None,
            };
            print(json!({"graph": graph_summary(&graph, a.batch)?, "importance": report, "plan": plan}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
