//! `tfm`: run continual-learning scenarios from a JSON config, inspect the
//! data pipeline, price mask storage, and re-evaluate saved snapshots.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/format error,
//! 4 capacity exhausted, 5 internal invariant violation.

use clap::{Args, Parser, Subcommand};
use rand::RngExt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use tfm_core::config::{evaluate_snapshot, DatasetConfig, EvalSplit, RunConfig};
use tfm_core::data::{hflip, SynthSpec};
use tfm_core::harness::{build_sequence, MethodKind};
use tfm_core::network::ArchSpec;
use tfm_core::overhead::{count_params, write_overhead_csv};
use tfm_core::rng::RngSeed;
use tfm_core::{Result, TfmError};

#[derive(Parser)]
#[command(name = "tfm", version, about = "Continual learning with ternary feature masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scenario end to end and write its report directory.
    Run(RunArgs),
    /// Print the per-method storage overhead table for an architecture.
    Overhead(OverheadArgs),
    /// Dry-run the data pipeline of a config without any training.
    AugmentCheck(RunArgs),
    /// Restore a snapshot and evaluate one task on one split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured method (tfm, tfm_no_fn, binary_mask,
    /// finetune, freeze, joint).
    #[arg(long)]
    method: Option<String>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Override the dataset: a .csv file, an IDX directory, or a .json
    /// file holding a synthetic-generator spec.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverheadArgs {
    /// JSON architecture spec.
    #[arg(long)]
    arch: PathBuf,
    /// Number of tasks to price.
    #[arg(long)]
    tasks: u32,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Config of the run that produced the snapshot.
    #[arg(long)]
    config: PathBuf,
    /// Model snapshot file.
    #[arg(long)]
    snapshot: PathBuf,
    /// Task to evaluate.
    #[arg(long)]
    task: u32,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    init_logging()?;
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Overhead(args) => cmd_overhead(&args),
        Command::AugmentCheck(args) => cmd_augment_check(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("TFM_LOG_LEVEL") {
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(TfmError::Config(format!(
                    "TFM_LOG_LEVEL '{}' (expected error, info or debug)",
                    other
                )))
            }
        },
        Err(_) => log::LevelFilter::Error,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(method) = &args.method {
        cfg.method = MethodKind::from_str(method)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(tasks) = args.tasks {
        cfg.sequence.num_tasks = tasks;
    }
    if let Some(path) = &args.dataset {
        cfg.dataset = dataset_from_path(path)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn dataset_from_path(path: &Path) -> Result<DatasetConfig> {
    if path.is_dir() {
        return Ok(DatasetConfig::Idx { path: path.to_path_buf() });
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(DatasetConfig::Csv { path: path.to_path_buf() }),
        Some("json") => {
            let text = fs::read_to_string(path)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            Ok(DatasetConfig::Synth { spec })
        }
        _ => Err(TfmError::Config(format!(
            "{}: expected a .csv file, a .json synthetic spec, or an IDX directory",
            path.display()
        ))),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (outcome, out_dir) = cfg.execute()?;
    println!(
        "method {}, {} tasks, seed {}",
        outcome.method,
        outcome.matrix.checkpoints(),
        cfg.seed
    );
    println!("average accuracy {:.6}", outcome.average_accuracy);
    println!("mean forgetting {:.6}", outcome.mean_forgetting);
    println!("reports in {}", out_dir.display());
    Ok(())
}

fn cmd_overhead(args: &OverheadArgs) -> Result<()> {
    let text = fs::read_to_string(&args.arch)
        .map_err(|e| TfmError::Config(format!("{}: {}", args.arch.display(), e)))?;
    let arch: ArchSpec = serde_json::from_str(&text)
        .map_err(|e| TfmError::Config(format!("{}: {}", args.arch.display(), e)))?;
    if args.tasks == 0 {
        return Err(TfmError::Config("tasks must be at least 1".into()));
    }
    let (weights, features) = count_params(&arch)?;
    log::info!("{}: {} weights, {} features", args.arch.display(), weights, features);
    match &args.out {
        Some(path) => {
            let mut f = fs::File::create(path)?;
            write_overhead_csv(&mut f, weights, features, args.tasks)?;
            println!("wrote {}", path.display());
        }
        None => {
            let mut out = std::io::stdout().lock();
            write_overhead_csv(&mut out, weights, features, args.tasks)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn cmd_augment_check(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let resolved = cfg.resolve()?;
    let seed = RngSeed(resolved.seed);
    let bundle = resolved.dataset.load(seed)?;
    let sequence = build_sequence(&bundle, &resolved.sequence, seed)?;

    println!("dataset {}", bundle.source());
    println!(
        "{} samples, {} classes, sample shape {:?}",
        bundle.len(),
        bundle.classes(),
        bundle.sample_shape()
    );
    let (mean, std) = bundle.normalization();
    println!("normalization mean {:?} std {:?}", mean, std);
    for task in &sequence.tasks {
        println!(
            "task {}: classes {:?}, train {}, val {}, test {}",
            task.task_id,
            task.classes,
            task.train.len(),
            task.val.len(),
            task.test.len()
        );
    }

    if !resolved.augment_hflip {
        println!("augmentation: none");
        return Ok(());
    }
    if !bundle.is_image() {
        return Err(TfmError::Config(
            "horizontal-flip augmentation needs image-shaped samples".into(),
        ));
    }
    let first = sequence.tasks[0].train[0].index;
    let x = bundle.sample(first);
    let twice = hflip(&hflip(&x)?)?;
    let involution = twice.data() == x.data();
    let coin = |_| -> Vec<bool> {
        let mut rng = seed.child_idx("augment", 1).stream();
        (0..32).map(|_| rng.random::<f32>() < 0.5).collect()
    };
    let deterministic = coin(()) == coin(());
    println!(
        "augmentation: hflip (train-time, p=0.5); deterministic {}, double flip restores {}",
        deterministic, involution
    );
    if !deterministic || !involution {
        return Err(TfmError::Contract(
            "augmentation dry-run failed its self-checks".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let split = EvalSplit::from_str(&args.split)?;
    let (loss, accuracy) = evaluate_snapshot(&cfg, &args.snapshot, args.task, split)?;
    println!(
        "task {} split {}: accuracy {:.6} loss {:.6}",
        args.task, args.split, accuracy, loss
    );
    Ok(())
}
