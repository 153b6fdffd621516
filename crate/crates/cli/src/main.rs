mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{CmdError, Ctx};
use config::ExperimentConfig;
use manifest::{Outputs, RunManifest, MANIFEST_FILE};

/// Small-time heat-kernel experiments for fBm-driven SDEs.
#[derive(Parser, Debug)]
#[command(name = "fbmheat", version, about)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: FBMHEAT_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Re-hash the outputs listed in a manifest and report mismatches.
    #[arg(long, value_name = "MANIFEST")]
    verify: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// fBm paths (CSV and FBM1), increment Gram matrix and covariance check.
    Sample,
    /// Geodesic distance from `points.x` to `points.y` and over the box lattice.
    Distance,
    /// Minimise the rate functional subject to reaching `points.y`.
    RateMin,
    /// Structure constants of the fields over the box lattice.
    CheckStructure,
    /// Exp-Lie order probe and per-word Lambda statistics.
    Expand,
    /// Monte Carlo densities over the t ladder.
    Density,
    /// On-diagonal expansion fit and comparison with the closed-form a0.
    Ondiag,
    /// The constant q_H(omega) by the fit and quadrature methods.
    Qh,
    /// Girsanov weight checks for a constant control.
    GirsanovCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Distance => "distance",
            Command::RateMin => "rate-min",
            Command::CheckStructure => "check-structure",
            Command::Expand => "expand",
            Command::Density => "density",
            Command::Ondiag => "ondiag",
            Command::Qh => "qh",
            Command::GirsanovCheck => "girsanov-check",
        }
    }
}

fn init_threads(n: Option<usize>) {
    let n = n.or_else(|| std::env::var("FBMHEAT_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = n.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: &Cli, cmd: Command) -> Result<(), (u8, String)> {
    let cfg_err = |m: String| (2u8, m);
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = ExperimentConfig::parse(&text).map_err(|e| cfg_err(e.0))?;
    let seed = cli.seed.unwrap_or(cfg.run.seed);
    let dir = cli.out.clone().or_else(|| cfg.run.out.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("fbmheat-out"));
    let mut outputs = Outputs::new(&dir).map_err(|e| (3, format!("{}: {e}", dir.display())))?;
    let t0 = Instant::now();
    let mut ctx = Ctx { cfg: &cfg, seed, out: &mut outputs, lineage: Default::default() };
    let result = match cmd {
        Command::Sample => commands::sample(&mut ctx),
        Command::Distance => commands::distance(&mut ctx),
        Command::RateMin => commands::rate_min(&mut ctx),
        Command::CheckStructure => commands::check_structure(&mut ctx),
        Command::Expand => commands::expand(&mut ctx),
        Command::Density => commands::density(&mut ctx),
        Command::Ondiag => commands::ondiag(&mut ctx),
        Command::Qh => commands::qh(&mut ctx),
        Command::GirsanovCheck => commands::girsanov_check(&mut ctx),
    };
    let lineage = std::mem::take(&mut ctx.lineage);
    let (status, error) = match &result {
        Ok(()) => ("ok", None),
        Err(CmdError::Config(m)) | Err(CmdError::Numerical(m)) => ("failed", Some(m.clone())),
    };
    let m = RunManifest {
        tool: "fbmheat".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cmd.name().into(),
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: manifest::sha256_hex(text.as_bytes()),
        seed,
        seed_lineage: lineage,
        outputs: outputs.entries.clone(),
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        status: status.into(),
        error,
    };
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serialises");
    s.push('\n');
    std::fs::write(outputs.dir().join(MANIFEST_FILE), s).map_err(|e| (3, format!("writing manifest: {e}")))?;
    match result {
        Ok(()) => Ok(()),
        Err(CmdError::Config(m)) => Err((2, m)),
        Err(CmdError::Numerical(m)) => Err((3, m)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    if let Some(path) = &cli.verify {
        return match manifest::verify(path) {
            Ok(r) if r.mismatched.is_empty() => {
                println!("verified {} outputs", r.checked);
                ExitCode::SUCCESS
            }
            Ok(r) => {
                for f in &r.mismatched {
                    eprintln!("mismatch: {f}");
                }
                ExitCode::from(1)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: a subcommand or --verify is required (see --help)");
        return ExitCode::from(2);
    };
    match run(&cli, cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
