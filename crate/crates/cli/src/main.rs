//! `melius` — cost summaries, kernel verification, training, evaluation,
//! and flip instrumentation for binary MeliusNet models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use melius_core::cost::{model_cost, CostReport};
use melius_core::graph::{ArchConfig, ModelGraph};
use melius_core::io::{export_weights, import_weights, load_idx_dataset, parse_arch_config};
use melius_core::train::{
    evaluate, Dataset, FlipSummary, OptimizerKind, Trainer, TrainConfig, TRAIN_CSV_HEADER,
};
use melius_core::verify::run_verification;
use melius_core::preset;

#[derive(Parser)]
#[command(
    name = "melius",
    version,
    about = "Binary neural networks with exact xnor/popcount kernels: \
             cost model, verification, training, and instrumentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl From<Optimizer> for OptimizerKind {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Adam => OptimizerKind::Adam,
            Optimizer::Sgd => OptimizerKind::SgdMomentum,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Emit the per-layer and aggregate cost report for an architecture.
    Summarize {
        /// Preset name (meliusnet22/29/42/59/a/b/c) or a config file path.
        #[arg(long)]
        arch: String,
        /// Input shape CxHxW (defaults to the architecture's own).
        #[arg(long)]
        input: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Include the per-layer table in text output.
        #[arg(long)]
        per_layer: bool,
    },
    /// Run the randomized xnor-vs-reference and STE/sign property suites.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on an IDX dataset directory and export the weights.
    Train {
        #[arg(long)]
        arch: String,
        /// Directory holding train-images-idx3-ubyte / train-labels-idx1-ubyte.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.002)]
        lr: f32,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output weight file (MNBW).
        #[arg(long)]
        out: PathBuf,
        /// Append per-epoch metrics to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
        optimizer: Optimizer,
        /// Zero-pad images up to this spatial size before training.
        #[arg(long)]
        pad_to: Option<usize>,
        /// Disable flip/crop augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Evaluate exported weights on an IDX dataset directory.
    Eval {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        weights: PathBuf,
        /// Directory holding t10k-* (or test-*) IDX files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        pad_to: Option<usize>,
    },
    /// Short instrumented run counting weight sign flips per epoch (CSV).
    Flips {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.002)]
        lr: f32,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-layer flip CSV here (stdout when omitted).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        pad_to: Option<usize>,
    },
}

/// Failures mapped to exit codes: usage problems exit 2, runtime errors 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<melius_core::Error> for CliError {
    fn from(e: melius_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn resolve_arch(spec: &str) -> Result<ArchConfig, CliError> {
    if let Some(cfg) = preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "unknown architecture {spec:?}: not a preset and no such config file"
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("reading {spec}: {e}")))?;
    Ok(parse_arch_config(&text)?)
}

fn parse_input_shape(s: &str) -> Result<(usize, usize, usize), CliError> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--input must be CxHxW, got {s:?}")))?;
    match dims.as_slice() {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(CliError::Usage(format!("--input must be CxHxW, got {s:?}"))),
    }
}

fn load_split(dir: &Path, prefixes: &[&str], pad_to: Option<usize>) -> Result<Dataset, CliError> {
    for prefix in prefixes {
        let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        if images.exists() && labels.exists() {
            let mut data = load_idx_dataset(&images, &labels)?;
            if let Some(target) = pad_to {
                data = data.pad_spatial(target)?;
            }
            return Ok(data);
        }
    }
    Err(CliError::Runtime(format!(
        "no IDX pair found under {} (tried prefixes {prefixes:?})",
        dir.display()
    )))
}

fn check_dataset_fits(cfg: &ArchConfig, data: &Dataset) -> Result<(), CliError> {
    let (c, h, w) = data.image_shape();
    if (c, h, w) != cfg.input_shape {
        return Err(CliError::Runtime(format!(
            "dataset images are {c}x{h}x{w} but the architecture expects \
             {}x{}x{} (consider --pad-to)",
            cfg.input_shape.0, cfg.input_shape.1, cfg.input_shape.2
        )));
    }
    if data.num_classes() > cfg.num_classes {
        return Err(CliError::Runtime(format!(
            "dataset has {} classes but the architecture outputs {}",
            data.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

fn cmd_summarize(
    arch: &str,
    input: Option<&str>,
    format: Format,
    per_layer: bool,
) -> Result<(), CliError> {
    let mut cfg = resolve_arch(arch)?;
    if let Some(s) = input {
        cfg.input_shape = parse_input_shape(s)?;
    }
    let graph = ModelGraph::build_skeleton(&cfg)?;
    let mut report: CostReport = model_cost(&graph)?;
    report.model = arch.to_string();
    match format {
        Format::Table => print!("{}", report.to_table(per_layer)),
        Format::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_verify(trials: usize, seed: u64) -> Result<(), CliError> {
    let report = run_verification(trials, seed);
    println!(
        "verify: {} checks over {} conv trials, {} failures",
        report.checks,
        report.trials,
        report.failures.len()
    );
    for f in &report.failures {
        eprintln!("FAIL: {f}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} verification failures",
            report.failures.len()
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    arch: &str,
    data_dir: &Path,
    epochs: usize,
    lr: f32,
    warmup: usize,
    batch: usize,
    seed: u64,
    out: &Path,
    csv: Option<&Path>,
    optimizer: Optimizer,
    pad_to: Option<usize>,
    no_augment: bool,
) -> Result<(), CliError> {
    let cfg = resolve_arch(arch)?;
    let train_data = load_split(data_dir, &["train"], pad_to)?;
    check_dataset_fits(&cfg, &train_data)?;
    let graph = ModelGraph::build_seeded(&cfg, seed)?;
    let tc = TrainConfig {
        epochs,
        base_lr: lr,
        warmup_epochs: warmup,
        batch_size: batch,
        seed,
        optimizer: optimizer.into(),
        augment: !no_augment,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(graph, tc)?;
    let mut csv_lines = vec![TRAIN_CSV_HEADER.to_string()];
    for _ in 0..epochs {
        let metrics = trainer.train_epoch(&train_data)?;
        println!("{}", metrics.log_line());
        csv_lines.push(metrics.csv_row());
    }
    if let Some(path) = csv {
        fs::write(path, csv_lines.join("\n") + "\n")
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    }
    let mut graph = trainer.graph;
    graph.fold_batchnorm_stats()?;
    export_weights(&graph, out)?;
    println!("wrote weights to {}", out.display());
    Ok(())
}

fn cmd_eval(
    arch: &str,
    weights: &Path,
    data_dir: &Path,
    batch: usize,
    pad_to: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve_arch(arch)?;
    let data = load_split(data_dir, &["t10k", "test"], pad_to)?;
    check_dataset_fits(&cfg, &data)?;
    let mut graph = ModelGraph::build(&cfg)?;
    let imported = import_weights(weights)?;
    graph.load_parameters(imported)?;
    let accuracy = evaluate(&graph, &data, batch)?;
    println!("top1 {accuracy:.4} over {} samples", data.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_flips(
    arch: &str,
    data_dir: &Path,
    optimizer: Optimizer,
    epochs: usize,
    lr: f32,
    batch: usize,
    seed: u64,
    csv: Option<&Path>,
    pad_to: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve_arch(arch)?;
    let data = load_split(data_dir, &["train"], pad_to)?;
    check_dataset_fits(&cfg, &data)?;
    let graph = ModelGraph::build_seeded(&cfg, seed)?;
    let tc = TrainConfig {
        epochs: epochs.max(2),
        base_lr: lr,
        warmup_epochs: 1.min(epochs.saturating_sub(1)),
        batch_size: batch,
        seed,
        optimizer: optimizer.into(),
        augment: false,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(graph, tc)?;
    let mut out = String::new();
    writeln!(out, "{}", FlipSummary::CSV_HEADER).unwrap();
    for epoch in 0..epochs {
        let metrics = trainer.train_epoch(&data)?;
        eprintln!("{}", metrics.log_line());
        for summary in &metrics.layer_flips {
            writeln!(out, "{}", summary.csv_row(epoch)).unwrap();
        }
        writeln!(out, "{}", metrics.flips.csv_row(epoch)).unwrap();
    }
    match csv {
        Some(path) => fs::write(path, &out)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Summarize { arch, input, format, per_layer } => {
            cmd_summarize(arch, input.as_deref(), *format, *per_layer)
        }
        Command::Verify { trials, seed } => cmd_verify(*trials, *seed),
        Command::Train {
            arch,
            data,
            epochs,
            lr,
            warmup,
            batch,
            seed,
            out,
            csv,
            optimizer,
            pad_to,
            no_augment,
        } => cmd_train(
            arch,
            data,
            *epochs,
            *lr,
            *warmup,
            *batch,
            *seed,
            out,
            csv.as_deref(),
            *optimizer,
            *pad_to,
            *no_augment,
        ),
        Command::Eval { arch, weights, data, batch, pad_to } => {
            cmd_eval(arch, weights, data, *batch, *pad_to)
        }
        Command::Flips { arch, data, optimizer, epochs, lr, batch, seed, csv, pad_to } => {
            cmd_flips(
                arch,
                data,
                *optimizer,
                *epochs,
                *lr,
                *batch,
                *seed,
                csv.as_deref(),
                *pad_to,
            )
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
