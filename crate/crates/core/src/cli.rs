//! Command-line front end: `run`, `explain`, `bench`, `validate-config`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::pipeline::{self, ExperimentConfig, StageError};

#[derive(Debug, Parser)]
#[command(name = "confexplain", version, about = "Surrogate explanations with conformal intervals")]
pub struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "CONFEXPLAIN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute the full experiment and write every artifact.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print interval explanations for instance rows as JSON lines.
    Explain {
        /// A dataset directory produced by `run`.
        #[arg(long)]
        model: PathBuf,
        /// CSV in the dataset's schema, or a JSON array of encoded rows.
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        epsilon: f64,
        /// Calibrated method, `<surrogate>+<estimator>`.
        #[arg(long, default_value = "trees+pred-conf")]
        method: String,
    },
    /// Re-time a finished run and update its report's timing section.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn fail(stage: &str, e: impl std::fmt::Display) -> i32 {
    eprintln!("error in stage `{stage}`: {e}");
    1
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, i32> {
    let mut cfg = ExperimentConfig::load(config).map_err(|e| fail("config", e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stage_failure(e: StageError) -> i32 {
    fail(&e.stage, &e.error)
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("threads", e);
        }
    }
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = match load(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            match pipeline::run(&cfg, &out) {
                Ok(_) => {
                    println!("{}", out.join(pipeline::REPORT_FILE).display());
                    0
                }
                Err(e) => stage_failure(e),
            }
        }
        Command::Bench { config, out } => {
            let cfg = match load(&config, None) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            match pipeline::bench(&cfg, &out) {
                Ok(_) => {
                    println!("{}", out.join(pipeline::REPORT_FILE).display());
                    0
                }
                Err(e) => stage_failure(e),
            }
        }
        Command::ValidateConfig { config, seed } => match load(&config, seed) {
            Ok(cfg) => {
                println!("{}", cfg.hash());
                0
            }
            Err(code) => code,
        },
        Command::Explain {
            model,
            instances,
            epsilon,
            method,
        } => match pipeline::explain_instances(&model, &instances, &method, epsilon) {
            Ok(lines) => {
                let mut stdout = std::io::stdout().lock();
                for l in lines {
                    let text = serde_json::to_string(&l).expect("explanations serialize");
                    if writeln!(stdout, "{text}").is_err() {
                        return 1;
                    }
                }
                0
            }
            Err(e) => fail("explain", e),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        let c = Cli::try_parse_from(["confexplain", "run", "--config", "c.json", "--seed", "9", "--threads", "2"]).unwrap();
        assert_eq!(c.threads, Some(2));
        assert!(matches!(c.command, Command::Run { seed: Some(9), .. }));
        let c = Cli::try_parse_from([
            "confexplain", "explain", "--model", "m", "--instances", "i.csv", "--epsilon", "0.05",
        ])
        .unwrap();
        assert!(matches!(c.command, Command::Explain { epsilon, .. } if epsilon == 0.05));
        assert!(Cli::try_parse_from(["confexplain", "bench", "--config", "c.json"]).is_ok());
        assert!(Cli::try_parse_from(["confexplain", "validate-config", "--config", "c.json"]).is_ok());
        assert!(Cli::try_parse_from(["confexplain", "explain", "--model", "m"]).is_err());
    }

    #[test]
    fn missing_config_exits_one() {
        let c = Cli::try_parse_from(["confexplain", "validate-config", "--config", "/no/such/config.json"]).unwrap();
        assert_eq!(execute(c), 1);
    }
}
