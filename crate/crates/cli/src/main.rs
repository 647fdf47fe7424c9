mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Decomposer, EngineConfig, Overrides};
use error::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "xmrag",
    version,
    about = "Multi-objective image retrieval and subquery-aware generation prompts"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON config file; flags override it and XMRAG_* variables override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus manifest (JSON Lines).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Adapter parameter file.
    #[arg(long, global = true)]
    adapter: Option<PathBuf>,
    /// Dense-term weight. Defaults to 0.9 of the loose safe bound.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Simplex grid resolution m.
    #[arg(long, global = true)]
    grid_resolution: Option<usize>,
    /// Strip trailing plural "s" when matching.
    #[arg(long, global = true)]
    strip_plurals: bool,
    #[arg(long, global = true, value_enum)]
    decomposer: Option<Decomposer>,
    /// No network access; output is byte-identical across runs.
    #[arg(long, global = true)]
    offline: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and its feature files and print an index summary.
    Index {
        /// Manifest path; falls back to --manifest.
        manifest: Option<PathBuf>,
        /// Also write the summary JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a query into subqueries.
    Decompose {
        query: String,
        /// Caption-to-completion JSON used instead of the LLM service.
        #[arg(long)]
        llm_replay: Option<PathBuf>,
    },
    /// Retrieve the Pareto set for a query and print the report.
    Retrieve(commands::QueryArgs),
    /// Retrieve, build the generation prompt and call the image service.
    Generate(commands::GenerateArgs),
    /// Evaluation suites.
    Eval(commands::EvalArgs),
    /// Latency and forward-count benchmark of sparse, dense and hybrid retrieval.
    Bench(commands::BenchArgs),
}

fn engine_config(g: &GlobalArgs) -> Result<EngineConfig, CliError> {
    let mut config = match &g.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    config.apply(Overrides {
        manifest: g.manifest.clone(),
        adapter: g.adapter.clone(),
        beta: g.beta,
        grid_resolution: g.grid_resolution,
        strip_plurals: g.strip_plurals,
        decomposer: g.decomposer,
        offline: g.offline,
        seed: g.seed,
        jobs: g.jobs,
    });
    config.apply_env(|k| std::env::var(k).ok())?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = engine_config(&cli.global)?;
    if let Some(jobs) = config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Index { manifest, out } => commands::index(&config, manifest, out),
        Command::Decompose { query, llm_replay } => commands::decompose(&config, &query, llm_replay),
        Command::Retrieve(args) => commands::retrieve(&config, &args),
        Command::Generate(args) => commands::generate(&config, &args),
        Command::Eval(args) => commands::eval(&config, &args),
        Command::Bench(args) => commands::bench(&config, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
