//! `rmflow`: command-line driver for Riemannian mean-flow models, one
//! subcommand per workflow, configured by TOML files.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 bad config or
//! input, 3 training diverged.

mod commands;
mod config;
mod data;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rmflow_core::certify::Faults;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rmflow", version, about = "Few-step generative flow maps on manifolds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints and a loss log.
    Train(Common),
    /// Draw samples from a checkpoint.
    Sample(Common),
    /// Score sample batches against reference data with MMD.
    Eval(Common),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
    /// Render samples on S² as an SVG.
    Plot(Common),
    /// Sweep reward guidance settings on a checkpoint.
    Guide(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `sampler.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Deliberately break a primitive to confirm the checks catch it.
    #[arg(long, hide = true, value_parser = ["log-sign"])]
    inject_fault: Option<String>,
}

/// An error that carries its own process exit code.
#[derive(Debug)]
pub struct Exit {
    code: u8,
    msg: String,
}

impl Exit {
    pub fn new(code: u8, msg: String) -> Self {
        Exit { code, msg }
    }
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn setup(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.sampler.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Ok(t) = std::env::var("RMFLOW_THREADS") {
        cfg.threads = t.trim().parse().with_context(|| format!("RMFLOW_THREADS={t:?} is not a thread count"))?;
    }
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("configuring the thread pool")?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(c) => commands::train(&setup(&c)?),
        Cmd::Sample(c) => commands::sample(&setup(&c)?),
        Cmd::Eval(c) => commands::eval(&setup(&c)?),
        Cmd::Plot(c) => commands::plot(&setup(&c)?),
        Cmd::Guide(c) => commands::guide(&setup(&c)?),
        Cmd::Verify(v) => {
            let faults = Faults {
                flip_log_sign: v.inject_fault.as_deref() == Some("log-sign"),
            };
            commands::verify(&setup(&v.common)?, faults)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Exit>().map_or(2, |x| x.code))
        }
    }
}
