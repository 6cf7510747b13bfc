use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::commands;
use super::config::ExperimentConfig;
use super::CliError;

#[derive(Debug, Parser)]
#[command(name = "zapq", version, about = "Zap Q-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one seeded training trajectory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config's `base_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run `num_runs` seeds and aggregate percentiles.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the greedy policy of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Integrate an ODE flow of the exact mean field.
    Flow {
        #[command(flatten)]
        common: Common,
    },
    /// Asymptotic covariance and related reports.
    ///
    /// Either `--config` (tabular experiment) or all of `--a-star`,
    /// `--sigma-delta` and `--gain`. Matrices are JSON (a number or nested
    /// row arrays) given inline or as a file path.
    Analyze {
        #[arg(long, conflicts_with_all = ["a_star", "sigma_delta", "gain"])]
        config: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true, requires_all = ["sigma_delta", "gain"])]
        a_star: Option<String>,
        #[arg(long, allow_hyphen_values = true, requires_all = ["a_star", "gain"])]
        sigma_delta: Option<String>,
        #[arg(long, allow_hyphen_values = true, requires_all = ["a_star", "sigma_delta"])]
        gain: Option<String>,
        /// Regularization levels for the expansion report.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
        /// Output JSON file; stdout when omitted (or the config's output
        /// directory in config mode).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn report_paths(paths: &[PathBuf]) -> String {
    json!({ "artifacts": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() }).to_string()
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(doc).expect("json"))
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Executes a parsed command and returns what it prints on success.
pub fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Train { common, seed } => {
            let (cfg, out) = load(&common)?;
            let seed = seed.unwrap_or(cfg.base_seed);
            commands::train(&cfg, seed, &out).map(|p| report_paths(&p))
        }
        Command::Sweep { common } => {
            let (cfg, out) = load(&common)?;
            commands::sweep(&cfg, &out).map(|p| report_paths(&p))
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            commands::eval(&cfg, &checkpoint, &out).map(|p| report_paths(&p))
        }
        Command::Flow { common } => {
            let (cfg, out) = load(&common)?;
            commands::flow(&cfg, &out).map(|p| report_paths(&p))
        }
        Command::Analyze { config, a_star, sigma_delta, gain, eps, out } => {
            let (doc, default_out) = match (config, a_star, sigma_delta, gain) {
                (Some(path), ..) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    let dir = cfg.output_dir.join("analysis.json");
                    (commands::analyze_config(&cfg, &eps)?, Some(dir))
                }
                (None, Some(a), Some(s), Some(g)) => {
                    let a = commands::read_matrix_arg(&a)?;
                    let s = commands::read_matrix_arg(&s)?;
                    let g = commands::read_matrix_arg(&g)?;
                    if s.nrows() != a.nrows() || g.nrows() != a.nrows() {
                        return Err(CliError::config("A*, Sigma_Delta and gain must have the same dimension"));
                    }
                    (commands::analyze_matrices(&a, &s, &g, &eps)?, None)
                }
                _ => return Err(CliError::config("analyze needs --config or all of --a-star, --sigma-delta, --gain")),
            };
            match out.or(default_out) {
                Some(path) => {
                    write_json(&path, &doc)?;
                    Ok(report_paths(&[path]))
                }
                None => Ok(serde_json::to_string_pretty(&doc).expect("json")),
            }
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr as one JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            eprintln!("{}", CliError::config(e.to_string().trim_end()).to_json());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
