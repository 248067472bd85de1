//! `chb6` — drive the coupled Brinkman/phase-field solver from JSON
//! configurations: forward simulation, sparse optimal control, the
//! verification battery, and sparsity-weight sweeps.
//!
//! Exit codes: 0 success (including an optimizer that stopped at its
//! iteration cap, recorded as `converged = false`); 1 verification checks
//! failed; 2 unusable configuration or command line; 3 solver breakdown;
//! 4 optimizer breakdown.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chb6::run::{self, RunConfig, RunError};

#[derive(Parser)]
#[command(
    name = "chb6",
    version,
    about = "Sparse distributed control of a Brinkman flow coupled to a sixth-order phase field",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IoArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (else config `output.out_dir`, else `$CHB6_OUT`,
    /// else ./chb6-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's `output.seed` for every synthetic field.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the state system and write the series, snapshots, and
    /// metadata.
    Simulate(IoArgs),
    /// Minimize the tracking cost over the control; writes the iterate log,
    /// the final trajectory, and the control field.
    Optimize(IoArgs),
    /// Run the verification battery and write its report.
    Verify {
        /// Output directory for verify.csv / verify.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of checks to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Flip the sign of the adjoint transport coupling to prove the
        /// battery catches a broken transpose (the duality check must then
        /// fail loudly, so the process exits 1).
        #[arg(long)]
        mutation: bool,
    },
    /// Optimize once per sparsity weight in the config's `kappa_sweep`
    /// list, each into its own subdirectory.
    SweepKappa {
        #[command(flatten)]
        io: IoArgs,
        /// Worker threads for fanning out the sweep (outputs are identical
        /// for any thread count).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn load(io: &IoArgs) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::from_path(&io.config)?;
    if let Some(seed) = io.seed {
        cfg.output.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    run::resolve_out_dir(cli, cfg.output.out_dir.as_deref())
}

fn real_main(cli: Cli) -> Result<i32, RunError> {
    match cli.command {
        Command::Simulate(io) => {
            let cfg = load(&io)?;
            let out = out_dir(io.out.as_deref(), &cfg);
            let s = run::run_simulate(&cfg, &out)?;
            println!(
                "simulate: {} steps, final energy {:.6e}, final mean {:.6e}, max |phi| {:.3}, {} snapshots -> {}",
                s.n_steps,
                s.final_energy,
                s.final_mean,
                s.max_abs_phi,
                s.snapshots,
                out.display()
            );
            Ok(0)
        }
        Command::Optimize(io) => {
            let cfg = load(&io)?;
            let out = out_dir(io.out.as_deref(), &cfg);
            let s = run::run_optimize(&cfg, &out, |row| {
                println!(
                    "iter {:4}  total {:.6e}  residual {:.3e}  alpha {:.2e}  zero fraction {:.3}",
                    row.iter, row.total, row.residual, row.alpha, row.sparsity_fraction
                );
            })?;
            println!(
                "optimize: converged={} after {} steps, cost {:.6e}, residual {:.3e}, zero fraction {:.3} -> {}",
                s.converged,
                s.iterations,
                s.cost_total,
                s.residual,
                s.sparsity_fraction,
                out.display()
            );
            Ok(0)
        }
        Command::Verify { out, only, mutation } => {
            let out = run::resolve_out_dir(out.as_deref(), None);
            let selection = if only.is_empty() { None } else { Some(&only[..]) };
            let report = run::run_verify(&out, selection, mutation)?;
            for c in &report.checks {
                println!(
                    "[{}] {:<13} value {:>11.4e}  threshold {:>8.1e}  ({:.2}s)  {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold,
                    c.seconds,
                    c.detail
                );
            }
            let passed = report.checks.iter().filter(|c| c.pass).count();
            println!("verify: {passed}/{} checks passed -> {}", report.checks.len(), out.display());
            Ok(if report.all_pass() { 0 } else { 1 })
        }
        Command::SweepKappa { io, threads } => {
            let cfg = load(&io)?;
            let out = out_dir(io.out.as_deref(), &cfg);
            let s = run::run_sweep(&cfg, &out, threads)?;
            for r in &s.rows {
                println!(
                    "kappa {:.6e}: converged={} in {} steps, cost {:.6e}, zero fraction {:.3} -> {}",
                    r.kappa,
                    r.summary.converged,
                    r.summary.iterations,
                    r.summary.cost_total,
                    r.summary.sparsity_fraction,
                    r.dir
                );
            }
            println!("sweep: {} runs -> {}", s.rows.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
