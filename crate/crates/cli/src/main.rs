use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lexprep_core::pipeline::{self, PipelineConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "lexprep", version, about = "Build reading-comprehension training sets and run closed-list legal benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read and filter raw corpora.
    Ingest(RunArgs),
    /// Turn passages into reading-comprehension examples.
    Transform(RunArgs),
    /// Blend sources to their token targets.
    Mix(RunArgs),
    /// Pack mixed examples into context windows.
    Pack(RunArgs),
    /// Score a model on the configured benchmarks.
    Eval(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Check the configuration without running anything.
    Validate(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `run_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Answer every request with the built-in offline endpoint.
    #[arg(long)]
    mock_endpoint: bool,
}

const EXIT_DIAGNOSTICS: u8 = 1;
const EXIT_FATAL: u8 = 2;

fn load(args: &ConfigArgs) -> Result<PipelineConfig, ExitCode> {
    PipelineConfig::load(&args.config).map_err(|e| {
        eprintln!("error: {}: {e}", args.config.display());
        ExitCode::from(EXIT_FATAL)
    })
}

fn check(cfg: &PipelineConfig) -> Result<(), ExitCode> {
    let diags = pipeline::validate_config(cfg);
    if diags.is_empty() {
        return Ok(());
    }
    for d in &diags {
        eprintln!("config: {d}");
    }
    Err(ExitCode::from(EXIT_DIAGNOSTICS))
}

fn run(stage: Stage, args: RunArgs) -> Result<(), ExitCode> {
    let mut cfg = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.run_dir = std::path::absolute(&out).unwrap_or(out);
    }
    check(&cfg)?;
    let opts = RunOptions::from_env(args.mock_endpoint);
    let manifests = pipeline::run_stage(stage, &cfg, &opts).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_FATAL)
    })?;
    let root = cfg.run_path();
    for m in &manifests {
        let outs: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        let counters: Vec<String> = m.counters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{}: {} [{}]", m.stage, outs.join(", "), counters.join(" "));
    }
    println!("run directory: {}", root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => run(Stage::Ingest, a),
        Command::Transform(a) => run(Stage::Transform, a),
        Command::Mix(a) => run(Stage::Mix, a),
        Command::Pack(a) => run(Stage::Pack, a),
        Command::Eval(a) => run(Stage::Eval, a),
        Command::All(a) => run(Stage::All, a),
        Command::Validate(a) => load(&a).and_then(|cfg| check(&cfg)).map(|()| println!("configuration ok")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
