//! Command-line front end: configuration, orchestration and output files.

mod commands;
pub mod config;
pub mod oracle;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

pub use commands::Mode;
use commands::Ctx;
use config::{load_config, Config, ModelConfig};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rpmeas", version, about = "Periodic measures and linear response of periodically forced SDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config, or a `meta.json` from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "RPMEAS_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Verify the dissipativity envelope and report moment certificates.
    Check,
    /// Pullback random periodic path and two-point contraction.
    Pullback,
    /// Empirical periodic measure at equally spaced phases.
    Measure,
    /// Direct and/or fluctuation-dissipation response.
    Respond,
    /// Self-test against the closed-form OU response.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Check => "check",
            Self::Pullback => "pullback",
            Self::Measure => "measure",
            Self::Respond => "respond",
            Self::Oracle => "oracle",
        }
    }
}

pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::InvalidParam { .. }
        | Error::DimensionMismatch { .. }
        | Error::GridMisaligned(_)
        | Error::Json(_)
        | Error::Unsupported(_)
        | Error::LagCoverage { .. } => EXIT_CONFIG,
        Error::NonConvergence(_) => EXIT_NONCONVERGENCE,
        Error::Divergence { .. } | Error::EnsembleDivergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAIL,
    }
}

fn write_meta(out: &Path, command: Command, mode: Option<Mode>, cfg: &Config) -> Result<()> {
    let meta = json!({
        "tool": "rpmeas",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "mode": mode,
        "seed": cfg.sim.seed,
        "config": cfg,
    });
    std::fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Config equivalent to running the oracle without `--config`.
pub fn default_oracle_config() -> Config {
    let oc = oracle::OracleConfig::default();
    Config {
        model: ModelConfig::Ou(oc.params),
        sim: config::SimConfig {
            seed: oc.seed,
            n_paths: oc.n_paths,
            steps_per_period: Some(oc.steps_per_period),
            ..Default::default()
        },
        perturbation: None,
        observables: None,
        envelope: None,
        output: Default::default(),
    }
}

fn oracle(ctx: &Ctx) -> Result<bool> {
    let c = ctx.cfg;
    let mut oc = oracle::OracleConfig::default();
    if let ModelConfig::Ou(p) = c.model {
        oc.params = p;
    }
    oc.seed = c.sim.seed;
    oc.n_paths = c.sim.n_paths.max(crate::response::MIN_PATHS);
    let model = c.build_model()?;
    if let Some(n) = c.grid(&model)?.steps_per_period() {
        oc.steps_per_period = n as usize;
        oc.table_steps_per_period = oc.table_steps_per_period.min(n as usize);
    }
    let report = oracle::run_oracle(&oc)?;
    std::fs::write(ctx.out.join("oracle_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if let (Some(d), Some(p)) = (&report.direct, &report.predicted) {
        let f = std::io::BufWriter::new(std::fs::File::create(ctx.out.join("response.csv"))?);
        crate::response::write_response_csv(f, Some(d), Some(p), None)?;
    }
    if !ctx.quiet {
        for c in &report.checks {
            eprintln!("{} {}: {:.4e} (threshold {:.4e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
        }
    }
    Ok(report.pass)
}

fn execute(cli: &Cli) -> Result<bool> {
    let loaded = cli.config.as_deref().map(load_config).transpose()?;
    let (mut cfg, meta_mode) = match (loaded, cli.command) {
        (Some(l), _) => l,
        (None, Command::Oracle) => (default_oracle_config(), None),
        (None, _) => {
            return Err(Error::Config {
                pointer: "/".into(),
                message: "--config is required for this command".into(),
            })
        }
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    let mode = match cli.command {
        Command::Respond => Some(cli.mode.or_else(|| meta_mode.as_deref().and_then(Mode::parse)).unwrap_or(Mode::Both)),
        _ => None,
    };
    let out = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out)?;
    write_meta(&out, cli.command, mode, &cfg)?;
    let ctx = Ctx {
        cfg: &cfg,
        out: &out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Check => commands::check(&ctx),
        Command::Pullback => commands::pullback(&ctx),
        Command::Measure => commands::measure(&ctx),
        Command::Respond => commands::respond(&ctx, mode.unwrap_or(Mode::Both)),
        Command::Oracle => oracle(&ctx),
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be positive");
            return EXIT_CONFIG;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(true) => 0,
        // Dissipativity and oracle failures are reports, not errors; only the
        // oracle signals them through the exit code.
        Ok(false) if cli.command == Command::Oracle => EXIT_FAIL,
        Ok(false) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
