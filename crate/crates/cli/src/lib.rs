//! Command-line front end for `volflow`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "volflow", version, about = "Train a 3D flow on volumes and reconstruct volumes from projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantoms and a train/test manifest into --out.
    Phantoms(Common),
    /// Train a model on the training split of `data_dir`.
    Train(Common),
    /// Draw volumes from a trained model.
    Sample(Common),
    /// Recover a volume (or a likelihood family) from projections.
    Reconstruct(Recon),
    /// Score uniplanar and biplanar reconstructions over the test split.
    Evaluate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Recon {
    #[command(flatten)]
    pub common: Common,
    /// Coronal image only.
    #[arg(long, conflicts_with = "biplanar")]
    pub uniplanar: bool,
    /// Coronal and sagittal images.
    #[arg(long)]
    pub biplanar: bool,
    /// Comma-separated likelihood targets; one reconstruction per target.
    #[arg(long = "logp0-list", value_name = "V1,V2,...", allow_hyphen_values = true)]
    pub logp0_list: Option<String>,
    #[arg(long = "lambda-l", value_name = "X", allow_hyphen_values = true)]
    pub lambda_l: Option<String>,
}

/// Defaults, then the file, then `X2CT_*` variables from `env`, then flags.
pub fn resolve(
    common: &Common,
    extra: &[(&str, String)],
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    cfg.apply_env(env)?;
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(s) = common.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(o) = &common.out {
        flags.push(("out", o.display().to_string()));
    }
    if let Some(c) = &common.checkpoint {
        flags.push(("checkpoint", c.display().to_string()));
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| volflow::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    flags.extend(extra.iter().cloned());
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let env = || std::env::vars();
    match &cli.command {
        Command::Phantoms(c) => commands::phantoms(&resolve(c, &[], env())?),
        Command::Train(c) => commands::train(&resolve(c, &[], env())?),
        Command::Sample(c) => commands::sample(&resolve(c, &[], env())?),
        Command::Evaluate(c) => commands::evaluate(&resolve(c, &[], env())?),
        Command::Reconstruct(r) => {
            let mut extra = Vec::new();
            if r.uniplanar {
                extra.push(("mode", "uniplanar".to_string()));
            }
            if r.biplanar {
                extra.push(("mode", "biplanar".to_string()));
            }
            if let Some(l) = &r.logp0_list {
                extra.push(("logp0_list", l.clone()));
            }
            if let Some(l) = &r.lambda_l {
                extra.push(("lambda_l", l.clone()));
            }
            commands::reconstruct_cmd(&resolve(&r.common, &extra, env())?)
        }
    }
}

/// Machine-readable category of a failure: the library's own category when
/// the chain holds a library error, otherwise `io` or `error`.
pub fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<volflow::Error>() {
            return e.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}
