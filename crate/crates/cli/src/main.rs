//! `proxyrl`: runs protocol experiments from TOML configs.
//!
//! Exit codes: 0 success, 1 run failure, 2 invalid config, 3 numeric
//! divergence (partial logs are still written).

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CommandError, EXIT_CONFIG, EXIT_FAILED, EXIT_OK};

#[derive(Parser)]
#[command(name = "proxyrl", version, about = "Proxy-reward RL simulation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured protocol.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "n-mc")]
        n_mc: Option<usize>,
        /// Grader snapshot (JSON) to measure ρ for; defaults to the initial proxy.
        #[arg(long)]
        grader: Option<PathBuf>,
    },
    /// Run the cross product of `--set key=v1,v2,...` overrides.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

fn fail(e: &CommandError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => match commands::cmd_run(&config, seed, out) {
            Ok(s) => {
                let pgr = s.pgr.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into());
                println!(
                    "{:?}: baseline {:.2}, achieved {:.2} at step {}, maximum {:.2}, PGR {pgr}, expert grades {}",
                    s.mode, s.baseline_j, s.achieved_j, s.achieved_step, s.maximum_j, s.budget.protocol_total
                );
                ExitCode::from(EXIT_OK as u8)
            }
            Err(e) => fail(&e),
        },
        Command::Eval { checkpoint, config, n_mc, grader } => {
            match commands::cmd_eval(&checkpoint, &config, n_mc, grader.as_deref()) {
                Ok(r) => {
                    println!("step {}: expert reward {:.3} ± {:.3} (n = {})", r.checkpoint_step, r.expert_reward, r.expert_se, r.n_mc);
                    match (r.rho, r.rho_lo, r.rho_hi) {
                        (Some(rho), Some(lo), Some(hi)) => println!("rho {rho:.3} [{lo:.3}, {hi:.3}]"),
                        _ => println!("rho undefined (no informative prompt groups)"),
                    }
                    println!("{}", serde_json::to_string(&r).expect("report serializes"));
                    ExitCode::from(EXIT_OK as u8)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { config, sets } => {
            let parsed: Result<Vec<_>, String> = sets.iter().map(|s| run_config::parse_sweep_arg(s)).collect();
            let parsed = match parsed {
                Ok(p) => p,
                Err(m) => {
                    eprintln!("error: {m}");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            match commands::cmd_sweep(&config, &parsed) {
                Ok(cells) => {
                    let failed = cells.iter().filter(|c| c.exit_code != EXIT_OK).count();
                    println!("{} cells, {} failed", cells.len(), failed);
                    ExitCode::from(if failed == 0 { EXIT_OK } else { EXIT_FAILED } as u8)
                }
                Err(e) => fail(&e),
            }
        }
    }
}
