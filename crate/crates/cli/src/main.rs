//! Command-line harness for the rare-event estimation experiments.
//!
//! Every subcommand reads the same flat TOML config (all keys optional, see
//! the crate README), applies `--override key=value` pairs on top, then runs
//! one study and writes its artifacts into `--out`/`out_dir`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use smallnoise::experiments::{
    self, build_config, run_doublewell, run_gaussian_oracle, run_pde, run_sweep,
};

#[derive(Parser)]
#[command(
    name = "smallnoise",
    about = "Rare-event estimation for small-noise diffusions: cross-entropy \
             trained importance sampling with a PDE reference oracle",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Double-well crossing study: crude MC, cross-entropy training,
    /// importance sampling and the PDE reference, plus plotting tables.
    Doublewell(RunArgs),
    /// Zero-drift benchmark with a closed-form answer (requires kappa = 0;
    /// this subcommand defaults kappa to 0).
    Gaussian(RunArgs),
    /// Noise-level sweep of the log-efficiency diagnostics.
    Sweep(RunArgs),
    /// Reference PDE solve only.
    Pde(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed; any integer is accepted.
    #[arg(long, allow_negative_numbers = true)]
    seed: Option<i64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets any config key, e.g. --override epsilon=0.1 or
    /// --override 'epsilons=[0.4,0.2]'. Repeatable; later entries win.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn config(&self, pre: &[&str]) -> Result<experiments::ExperimentConfig> {
        let file_text = match &self.config {
            Some(path) => Some(
                fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?,
            ),
            None => None,
        };
        let overrides: Vec<&str> = self.overrides.iter().map(String::as_str).collect();
        let mut config = build_config(file_text.as_deref(), pre, &overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.display().to_string();
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Doublewell(args) => {
            let config = args.config(&[])?;
            let outcome = run_doublewell(&config)?;
            println!(
                "mc:  rho_hat = {:.6e} (cov {:.3}, degenerate: {})",
                outcome.mc.rho_hat, outcome.mc.cov, outcome.mc.degenerate
            );
            println!(
                "is:  rho_hat = {:.6e} (cov {:.3}, ess {:.0})",
                outcome.is.rho_hat, outcome.is.cov, outcome.is.ess
            );
            println!("pde: rho_ref = {:.6e}", outcome.pde.rho_ref);
            println!(
                "ce: converged = {} after {} iterations; crossing fraction {:.3} controlled vs {:.5} uncontrolled",
                outcome.ce.converged,
                outcome.ce.iterations_used,
                outcome.frac_controlled_above,
                outcome.frac_uncontrolled_above
            );
            println!("artifacts in {}", config.out_dir);
            Ok(())
        }
        Command::Gaussian(args) => {
            let config = args.config(&["kappa = 0"])?;
            let outcome = run_gaussian_oracle(&config)?;
            println!("closed form: {:.6e}", outcome.closed_form);
            println!(
                "mc:  rho_hat = {:.6e} (degenerate: {})",
                outcome.mc.rho_hat, outcome.mc.degenerate
            );
            println!("is:  rho_hat = {:.6e}", outcome.is.rho_hat);
            println!("pde: rho_ref = {:.6e}", outcome.rho_ref);
            println!("artifacts in {}", config.out_dir);
            Ok(())
        }
        Command::Sweep(args) => {
            let config = args.config(&[])?;
            let epsilons = config.epsilons.clone();
            let report = run_sweep(&config, &epsilons)?;
            for point in &report.points {
                match &point.error {
                    Some(error) => println!("eps {:.3}: failed: {error}", point.epsilon),
                    None => println!(
                        "eps {:.3}: eps*log(R) = {:.4} (mc {:.4}), ess = {:.0}",
                        point.epsilon, point.eps_log_ratio, point.eps_log_ratio_mc, point.ess
                    ),
                }
            }
            println!("artifacts in {}", config.out_dir);
            Ok(())
        }
        Command::Pde(args) => {
            let config = args.config(&[])?;
            let solution = run_pde(&config)?;
            println!("rho_ref = {:.6e}", solution.rho_ref);
            println!("artifacts in {}", config.out_dir);
            Ok(())
        }
    }
}
