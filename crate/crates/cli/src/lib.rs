//! Command-line front end for the quasispec toolkit.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::Parser;
use serde_json::Value;

use commands::{Command, Errors, EXIT_CONFIG, EXIT_NUMERICAL};
use config::{parse_override, RunConfig};
use output::OutputDir;

pub const THREADS_ENV: &str = "QUASISPEC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "quasispec", version, about = "Multiscale spectral data for quasi-periodic polyharmonic operators")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub potential: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only the first N levels of `radii` (isocurve).
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub r1: Option<f64>,
    #[arg(long)]
    pub r2: Option<f64>,
    /// Any config field by dotted path, e.g. `--set regions.phi0=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, Value)>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
        if let Some(x) = &self.output {
            put("output", Value::String(x.display().to_string()));
        }
        if let Some(x) = self.threads {
            put("threads", x.into());
        }
        if let Some(x) = self.k {
            put("k", x.into());
        }
        if let Some(x) = self.lambda {
            put("lambda", x.into());
        }
        if let Some(x) = &self.mode {
            put("mode", x.clone().into());
        }
        if let Some(x) = &self.alpha {
            // a JSON array selects a continued fraction
            put("alpha", serde_json::from_str(x).unwrap_or_else(|_| Value::String(x.clone())));
        }
        if let Some(x) = &self.potential {
            put("potential", Value::String(x.display().to_string()));
        }
        if let Some(x) = self.seed {
            put("seed", x.into());
        }
        if let Some(x) = self.r1 {
            put("regions.r1", x.into());
        }
        if let Some(x) = self.r2 {
            put("regions.r2", x.into());
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

fn thread_count(cfg: &RunConfig) -> Result<Option<usize>, String> {
    if cfg.threads.is_some() {
        return Ok(cfg.threads);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV}: expected a positive integer, got {v:?}")),
        },
        Err(_) => Ok(None),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let mut cfg = match config::load(cli.config.as_deref(), &cli.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(n) = cli.levels {
        if n == 0 || n > cfg.radii.len() {
            eprintln!("invalid configuration:\n  --levels: expected 1..={}", cfg.radii.len());
            return EXIT_CONFIG;
        }
        cfg.radii.truncate(n);
        cfg.pole_radii.truncate(n - 1);
    }
    let resolved = match cfg.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprint!("{e}");
            return EXIT_CONFIG;
        }
    };
    let threads = match thread_count(&cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("invalid configuration:\n  {e}");
            return EXIT_CONFIG;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("thread pool: {e}");
            return EXIT_NUMERICAL;
        }
    };
    let mut out = match OutputDir::create(&cfg.output) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{}: {e}", cfg.output.display());
            return EXIT_NUMERICAL;
        }
    };
    let mut errs = Errors::default();
    let summary = pool.install(|| commands::run(cli.command, &cfg, &resolved, &mut out, &mut errs));
    let code = errs.exit_code();
    for e in &errs.0 {
        eprintln!("error [{}]: {}", e.stage, e.message);
    }
    let cfg_json = serde_json::to_value(&cfg).unwrap_or(Value::Null);
    match out.finish(cli.command.name(), cfg_json, pool.current_num_threads(), summary, errs.0, code) {
        Ok(_) => {
            println!("{}", cfg.output.join(output::MANIFEST).display());
            code
        }
        Err(e) => {
            eprintln!("manifest: {e}");
            EXIT_NUMERICAL
        }
    }
}
