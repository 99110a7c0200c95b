//! Command-line front end: argument parsing, config overrides, and the
//! exit-code contract (0 success, 1 configuration or runtime error,
//! 2 degenerate dataset, 3 final fit not converged).

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod artifact;
pub mod config;
pub mod pipeline;

use config::{ActionChoice, PipelineConfig, SelectionMode};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Degenerate(String),
    NotConverged(String),
    Other(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Degenerate(msg) => write!(f, "degenerate dataset: {msg}"),
            CliError::NotConverged(msg) => write!(f, "not converged: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Degenerate(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fenestra",
    version,
    about = "Occupant window-behavior modeling: ingest sensor exports, fit class-weighted logistic models with stepwise AIC driver selection, and evaluate them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Thread count for fold-level parallelism (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override (split seed or generator seed, per subcommand).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load sensor CSVs, align them on the minute grid, and export the
    /// derived feature frame.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Column remapping, e.g. `timestamp=time,value=reading`.
        #[arg(long)]
        schema: Option<String>,
    },
    /// Full modeling run: split, select drivers, fit, and evaluate on the
    /// held-out part.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// open | close | both
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        schema: Option<String>,
        /// cv | single
        #[arg(long)]
        selection: Option<String>,
    },
    /// Evaluate an existing model artifact against a dataset CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export a probability surface over two model terms.
    Surface {
        #[arg(long)]
        model: PathBuf,
        /// Swept axis, `term:lo:hi:step`.
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Values for remaining terms, `term=value` (default 0).
        #[arg(long)]
        fixed: Vec<String>,
        /// ds1 | ds2 | ds3 | all
        #[arg(long, default_value = "all")]
        segment: String,
    },
    /// Event summary: per-segment transition counts and open durations.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: Option<String>,
    },
    /// Draw a synthetic dataset from a generator spec.
    Synth {
        #[arg(long)]
        generator: PathBuf,
    },
    /// Generate, run the full pipeline, and compare against the generator.
    Recover {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        /// none | balanced
        #[arg(long)]
        weighting: Option<String>,
    },
}

fn apply_common_overrides(
    config: &mut PipelineConfig,
    out: &Option<PathBuf>,
    seed: Option<u64>,
    schema: &Option<String>,
) -> Result<(), CliError> {
    if let Some(out) = out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = seed {
        config.split.seed = seed;
    }
    if let Some(schema) = schema {
        config.schema = Some(config::parse_schema_override(schema)?);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        // Ignore the error when a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let out_dir_or =
        |fallback: PathBuf| -> PathBuf { cli.out.clone().unwrap_or(fallback) };

    match &cli.command {
        Command::Ingest { config, schema } => {
            let mut cfg = PipelineConfig::load(config)?;
            apply_common_overrides(&mut cfg, &cli.out, cli.seed, schema)?;
            pipeline::cmd_ingest(&cfg)
        }
        Command::Fit {
            config,
            action,
            schema,
            selection,
        } => {
            let mut cfg = PipelineConfig::load(config)?;
            apply_common_overrides(&mut cfg, &cli.out, cli.seed, schema)?;
            if let Some(action) = action {
                cfg.action = ActionChoice::parse(action).ok_or_else(|| {
                    CliError::Config(format!(
                        "bad --action `{action}` (expected open, close, or both)"
                    ))
                })?;
            }
            if let Some(selection) = selection {
                cfg.selection = SelectionMode::parse(selection).ok_or_else(|| {
                    CliError::Config(format!(
                        "bad --selection `{selection}` (expected cv or single)"
                    ))
                })?;
            }
            pipeline::cmd_fit(&cfg)
        }
        Command::Eval { model, dataset } => {
            pipeline::cmd_eval(model, dataset, &out_dir_or(PathBuf::from("out")))
        }
        Command::Surface {
            model,
            x,
            y,
            fixed,
            segment,
        } => {
            let x = pipeline::Axis::parse(x)?;
            let y = pipeline::Axis::parse(y)?;
            let fixed = pipeline::parse_fixed(fixed)?;
            pipeline::cmd_surface(
                model,
                &x,
                &y,
                &fixed,
                segment,
                &out_dir_or(PathBuf::from("out")),
            )
        }
        Command::Report { config, schema } => {
            let mut cfg = PipelineConfig::load(config)?;
            apply_common_overrides(&mut cfg, &cli.out, cli.seed, schema)?;
            pipeline::cmd_report(&cfg)
        }
        Command::Synth { generator } => {
            pipeline::cmd_synth(generator, cli.seed, &out_dir_or(PathBuf::from("out")))
        }
        Command::Recover {
            generator,
            folds,
            weighting,
        } => {
            let weighting = match weighting.as_deref() {
                None => None,
                Some("none") => Some(fenestra::glm::Weighting::None),
                Some("balanced") => Some(fenestra::glm::Weighting::Balanced),
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "bad --weighting `{other}` (expected none or balanced)"
                    )))
                }
            };
            pipeline::cmd_recover(
                generator,
                *folds,
                weighting,
                cli.seed,
                &out_dir_or(PathBuf::from("out")),
            )
        }
    }
}

/// Entry point used by the binary. Parses arguments, runs the requested
/// command, and maps errors onto the documented exit codes.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
