//! Command-line front end. Exit codes: 0 pass, 1 scientific failure, 2 usage or config error,
//! 3 runtime abort.

mod commands;
mod selftest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{content_hash, RunConfig};
use crate::dynamics::{write_file, Manifest};

pub use selftest::{run_selftest, SelftestOutcome};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "polyrelax", version, about = "Stress-relaxation experiments for polyconvex elastodynamics and two-pressure gas dynamics")]
pub struct Cli {
    /// Worker threads for sampling and independent eps runs (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.directory`; created when missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated eps values (overrides `relax.eps_list`, or `relax.epsilon` for one value).
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Seed of every sampling RNG (overrides `check.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify the configured model: (h0)-(h2), (char), delta, dissipation bound, ellipticity;
    /// or (a0)-(a3) for a gas configuration.
    CheckModel(CommonArgs),
    /// Run the configured slab system (or the Eulerian gas solver) and write snapshots.
    Simulate(CommonArgs),
    /// eps-convergence study against a refined equilibrium reference.
    Converge(CommonArgs),
    /// Eulerian pressure-relaxation gas dynamics.
    #[command(subcommand)]
    Gas(GasCommand),
    /// Run the embedded analytic oracles end to end.
    Selftest {
        /// Perturb a named internal constant (test hook).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GasCommand {
    /// (a0)-(a3) certificate and H-convexity sampling.
    Check(CommonArgs),
    /// Eulerian run with snapshots (x, rho, u, tau, H).
    Simulate(CommonArgs),
    /// eps-study against the p_E-Euler reference.
    Converge(CommonArgs),
    /// Lagrangean (slab solver) versus Eulerian density under refinement.
    Crosscheck(CommonArgs),
}

/// Failure of a command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn abort(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_ABORT, message: message.into() }
    }
}

/// Loaded configuration plus the manifest that is written before any computation.
pub(crate) struct Session {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
    pub manifest: Manifest,
    pub start: Instant,
}

impl Session {
    pub fn open(command: &str, args: &CommonArgs, threads: Option<usize>) -> Result<Session, CliError> {
        let (mut cfg, text) = RunConfig::load(&args.config).map_err(|e| CliError::usage(e.to_string()))?;
        if let Some(seed) = args.seed {
            cfg.check.seed = seed;
        }
        if let Some(eps) = &args.eps {
            if eps.len() == 1 && command.ends_with("simulate") {
                cfg.relax.epsilon = eps[0];
            } else {
                cfg.relax.eps_list = eps.clone();
            }
        }
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let out = args.out.clone().or_else(|| cfg.output.directory.as_ref().map(PathBuf::from));
        let config_json = serde_json::to_value(&cfg).map_err(|e| CliError::usage(e.to_string()))?;
        let mut manifest = Manifest::new(command, &content_hash(text.as_bytes()), config_json);
        manifest.summary = serde_json::json!({ "seed": cfg.check.seed, "threads": threads });
        let s = Session { cfg, out, manifest, start: Instant::now() };
        s.write_manifest()?;
        Ok(s)
    }

    pub fn write_manifest(&self) -> Result<(), CliError> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir).map_err(|e| CliError::abort(format!("{}: {e}", dir.display())))?;
            self.manifest.write(dir).map_err(|e| CliError::abort(e.to_string()))?;
        }
        Ok(())
    }

    /// Writes `name` into the output directory when one is set and records it.
    pub fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        if let Some(dir) = &self.out {
            write_file(&dir.join(name), text).map_err(|e| CliError::abort(e.to_string()))?;
            self.manifest.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        if self.cfg.writes_json() {
            let text = serde_json::to_string_pretty(value).map_err(|e| CliError::abort(e.to_string()))?;
            self.write(name, &text)?;
        }
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        if self.cfg.writes_csv() {
            self.write(name, text)?;
        }
        Ok(())
    }

    /// Final manifest update; `summary` is merged over the seed and thread entries.
    pub fn close(&mut self, status: &str, abort_reason: Option<String>, summary: serde_json::Value) -> Result<(), CliError> {
        self.manifest.status = status.to_string();
        self.manifest.abort_reason = abort_reason;
        self.manifest.wall_clock_s = self.start.elapsed().as_secs_f64();
        if let (serde_json::Value::Object(base), serde_json::Value::Object(extra)) = (&mut self.manifest.summary, summary) {
            base.extend(extra);
        }
        self.write_manifest()
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    if cli.threads == Some(0) {
        let _ = writeln!(out, "error: --threads must be >= 1");
        return EXIT_USAGE;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(out, "error: cannot start thread pool: {e}");
            return EXIT_ABORT;
        }
    };
    let threads = cli.threads;
    // command output is buffered inside the pool and forwarded afterwards
    let (result, text) = pool.install(|| {
        let mut buf: Vec<u8> = Vec::new();
        let r = dispatch(cli.command, threads, &mut buf);
        (r, buf)
    });
    let _ = out.write_all(&text);
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::CheckModel(a) => commands::check_model(&a, threads, out),
        Command::Simulate(a) => commands::simulate(&a, threads, out),
        Command::Converge(a) => commands::converge(&a, threads, out),
        Command::Gas(GasCommand::Check(a)) => commands::gas_check(&a, threads, out),
        Command::Gas(GasCommand::Simulate(a)) => commands::gas_simulate(&a, threads, out),
        Command::Gas(GasCommand::Converge(a)) => commands::gas_converge(&a, threads, out),
        Command::Gas(GasCommand::Crosscheck(a)) => commands::gas_crosscheck(&a, threads, out),
        Command::Selftest { perturb } => {
            let outcome = run_selftest(perturb.as_deref(), out);
            Ok(if outcome.pass() { EXIT_PASS } else { EXIT_FAIL })
        }
    }
}
