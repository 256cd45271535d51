use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hallkit_harness::{exit, run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "hallkit", version, about = "Finite-volume quantum Hall transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized inputs (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build and diagonalize the model; write the spectrum and a snapshot.
    Build,
    /// Kubo-Streda trace at the configured Fermi energy.
    Kubo,
    /// Driven evolution and currents at the probe values of s.
    Evolve,
    /// Current residual against tau with a log-log fit.
    SweepTau,
    /// Normalized Kubo trace over a coupling grid.
    SweepLambda,
    /// Nenciu terms, hierarchy residuals and truncation remainders.
    Expansion,
    /// Decay profiles, light cone and energy bounds.
    Diagnostics,
    /// Every stage with a section in the config.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Build => Command::Build,
            Cmd::Kubo => Command::Kubo,
            Cmd::Evolve => Command::Evolve,
            Cmd::SweepTau => Command::SweepTau,
            Cmd::SweepLambda => Command::SweepLambda,
            Cmd::Expansion => Command::Expansion,
            Cmd::Diagnostics => Command::Diagnostics,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match go(&cli) {
        Ok(code) => code,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    };
    ExitCode::from(code as u8)
}

fn go(cli: &Cli) -> Result<i32, (i32, String)> {
    let path = cli.config.as_ref().ok_or((exit::CONFIG, "--config <path> is required".to_string()))?;
    let mut cfg = RunConfig::load(path).map_err(|e| (e.exit_code(), e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = Some(out.clone());
    }
    let dir = cfg
        .output
        .directory
        .clone()
        .ok_or((exit::CONFIG, "no output directory: pass --out or set output.directory".to_string()))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| (exit::FAILURE, e.to_string()))?;
    }
    let out = run(cli.command.into(), &cfg, &dir).map_err(|e| (e.exit_code(), e.to_string()))?;
    for c in &out.checks {
        println!("{} {} = {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
    }
    println!("wrote {}", dir.display());
    Ok(out.exit_code())
}
