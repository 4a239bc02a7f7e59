use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nm_supernet::encoding::{decode_sparse, encode_sparse, SparseEncoding};
use nm_supernet::harness::pipeline::{self, Mode};
use nm_supernet::harness::{matrix_to_csv, parse_matrix_csv, ExperimentConfig, HarnessError};
use nm_supernet::nm::{SaliencyMetric, SparsityLevel};

#[derive(Debug, Parser)]
#[command(name = "nm-supernet", version, about = "Layer-wise N:M sparsity supernet: train, search, compare")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain (or load) the dense teacher.
    Pretrain(RunArgs),
    /// Pretrain the teacher and train the supernet.
    TrainSupernet(RunArgs),
    /// Search a supernet previously written by `train-supernet` to the output directory.
    Search(RunArgs),
    /// Every stage: teacher, supernet, search and reports.
    Run(RunArgs),
    /// Vanilla versus two-step sampling, paired frontiers.
    AblationSampling(RunArgs),
    /// Training with and without choice filtering, paired frontiers.
    AblationFilter(RunArgs),
    /// Searched configurations versus the ER layer-wise heuristic.
    CompareEr(RunArgs),
    /// Search guided by the masked dense model versus by the supernet.
    CompareEstimator(RunArgs),
    /// Mask a CSV matrix at an N:M level and write the packed sparse format.
    Encode(EncodeArgs),
    /// Expand a packed sparse file back to a dense CSV matrix.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Dense matrix as headerless CSV; groups run along each row.
    #[arg(long)]
    input: PathBuf,
    /// N:M level, e.g. 2:4.
    #[arg(long)]
    level: SparsityLevel,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Destination CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_mode(args: &RunArgs, mode: Mode) -> Result<()> {
    let cfg = load_config(args)?;
    let summary = pipeline::run(&cfg, mode)?;
    let out = json!({
        "mode": summary.mode,
        "output_dir": summary.output_dir,
        "artifacts": summary.artifacts,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn encode(args: &EncodeArgs) -> Result<()> {
    let text = String::from_utf8(read(&args.input)?).context("input is not UTF-8")?;
    let weights = parse_matrix_csv(&text)?;
    let enc = encode_sparse(&weights, args.level, SaliencyMetric::default())?;
    let bytes = enc.to_bytes();
    std::fs::write(&args.output, &bytes).with_context(|| format!("writing {}", args.output.display()))?;
    let out = json!({
        "shape": [enc.shape.0, enc.shape.1],
        "level": enc.level,
        "retained": enc.values.len(),
        "index_bits": enc.level.index_bits(),
        "bytes": bytes.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn decode(args: &DecodeArgs) -> Result<()> {
    let enc = SparseEncoding::<f32>::from_bytes(&read(&args.input)?)?;
    let csv = matrix_to_csv(&decode_sparse(&enc)?);
    match &args.output {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Pretrain(a) => run_mode(a, Mode::Pretrain),
        Command::TrainSupernet(a) => run_mode(a, Mode::TrainSupernet),
        Command::Search(a) => run_mode(a, Mode::Search),
        Command::Run(a) => run_mode(a, Mode::Run),
        Command::AblationSampling(a) => run_mode(a, Mode::AblationSampling),
        Command::AblationFilter(a) => run_mode(a, Mode::AblationFilter),
        Command::CompareEr(a) => run_mode(a, Mode::CompareEr),
        Command::CompareEstimator(a) => run_mode(a, Mode::CompareEstimator),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
    }
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    let stage = err.downcast_ref::<HarnessError>().map(|h| h.stage.to_string());
    json!({
        "error": err.to_string(),
        "stage": stage,
        "causes": causes,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
