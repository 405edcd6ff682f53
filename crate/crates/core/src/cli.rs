//! Command-line front end: argument parsing and dispatch onto the pipeline.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig};
use crate::pipeline;
use crate::Result;

#[derive(Debug, Parser)]
#[command(name = "kdlab", version, about = "Knowledge transfer between pretrained models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured models from scratch on their views.
    Pretrain(Common),
    /// Run a transfer method over existing checkpoints.
    Transfer(Common),
    /// Compare checkpoints before and after transfer.
    Analyze(Common),
    /// Generate, pretrain, transfer and analyze, then write a manifest.
    Experiment(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file, or a manifest.txt from an earlier experiment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set transfer.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    /// Builds the run config; flags win over `--set`, which wins over the file.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            pairs.push(("run.seed".into(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            pairs.push(("run.out".into(), out.display().to_string()));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &pairs),
            None => RunConfig::from_overrides(&pairs),
        }
    }
}

/// Runs one command and returns the lines to print on success.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    let show = |paths: Vec<PathBuf>| paths.iter().map(|p| p.display().to_string()).collect();
    match &cli.command {
        Command::Pretrain(c) => Ok(show(pipeline::cmd_pretrain(&c.resolve()?)?)),
        Command::Transfer(c) => Ok(show(pipeline::cmd_transfer(&c.resolve()?)?)),
        Command::Analyze(c) => Ok(show(pipeline::cmd_analyze(&c.resolve()?)?)),
        Command::Experiment(c) => {
            let cfg = c.resolve()?;
            let manifest = pipeline::cmd_experiment(&cfg)?;
            let mut lines: Vec<String> = manifest.artifacts.iter().map(|(p, h)| format!("{h}  {p}")).collect();
            lines.push(cfg.out.join("manifest.txt").display().to_string());
            Ok(lines)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
