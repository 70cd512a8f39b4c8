use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use optreg::dataset::read_manifest;
use optreg::pipeline::{self, Problem, RunConfig, DATASET_DIR};
use optreg::systems::Vector;
use optreg::Error;

/// Optimal-trajectory datasets, learned regulators and LQR comparisons.
///
/// The config is a single JSON document; see `configs/` for one per
/// benchmark. Defaults when a key is omitted: generation δ=0.05, step 1e-3,
/// tol 1e-3, 8 Newton iterations; training 300 epochs, batch 256, lr 1e-3
/// halved after 50 stalled epochs, loss weights V=1 u=1 grad=0.1, stride 20,
/// hidden layers [64, 64]; correction k=0.1 in `margin` mode; simulation
/// 10 s at step 1e-3, tolerance 1e-3, 20 boundary test points.
///
/// Exit codes: 0 success, 1 I/O or configuration error, 2 more than 10% of
/// targets failed, 3 divergence during simulation or comparison.
#[derive(Parser, Debug)]
#[command(name = "optreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Target every region grid point and save the dataset.
    Generate,
    /// Fit the value and policy networks to a dataset.
    Train {
        /// Dataset directory; defaults to `<out>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll out the corrected learned policy.
    Simulate {
        /// Checkpoint directory; defaults to `<out>`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Initial state as comma-separated values; repeatable. Defaults to
        /// the boundary test points.
        #[arg(long = "x0")]
        x0: Vec<String>,
    },
    /// Compare the corrected learned policy with LQR on the boundary points.
    Compare {
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Print a dataset manifest summary.
    Inspect {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn parse_state(s: &str) -> Result<Vector, Error> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|t| t.trim().parse::<f64>()).collect();
    v.map(|v| Vector::from_vec(v))
        .map_err(|e| Error::InvalidArgument(format!("bad state `{s}`: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let config = cli
        .config
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let mut cfg = RunConfig::load(&config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let or_out = |p: Option<PathBuf>, sub: &str| p.unwrap_or_else(|| if sub.is_empty() { out.clone() } else { out.join(sub) });

    if let Command::Inspect { dataset } = cli.command {
        return inspect(&or_out(dataset, DATASET_DIR));
    }
    let problem = Problem::new(&cfg)?;
    match cli.command {
        Command::Generate => {
            let report = pipeline::generate(&cfg, &problem, &out)?;
            println!(
                "targets attempted {}, converged {}, mean residual {:.3e}",
                report.attempted, report.converged, report.mean_residual
            );
            if report.failure_fraction() > 0.1 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Train { dataset } => {
            let output = pipeline::train_stage(&cfg, &problem, &or_out(dataset, DATASET_DIR), &out)?;
            if let Some(last) = output.history.iter().find(|h| h.epoch == output.best_epoch) {
                println!(
                    "best epoch {}: val loss {:.3e} (value MSE {:.3e}, policy MSE {:.3e})",
                    last.epoch, last.val_loss, last.val_value_mse, last.val_policy_mse
                );
            }
        }
        Command::Simulate { checkpoints, x0 } => {
            let x0s = if x0.is_empty() {
                problem.test_points(&cfg)?
            } else {
                x0.iter().map(|s| parse_state(s)).collect::<Result<_, _>>()?
            };
            let results = pipeline::simulate_stage(&cfg, &problem, &or_out(checkpoints, ""), &x0s, &out)?;
            let mut any = false;
            for (i, r) in results.iter().enumerate() {
                match r {
                    Ok(res) => {
                        any |= res.converged;
                        println!(
                            "{i}: cost {:.6}, converged {}, corrections {}",
                            res.accumulated_cost, res.converged, res.corrections.corrected
                        );
                    }
                    Err(e) => println!("{i}: {e}"),
                }
            }
            if !any {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Compare { checkpoints } => {
            let rows = pipeline::compare_stage(&cfg, &problem, &or_out(checkpoints, ""), &out)?;
            let wins = rows.iter().filter(|r| r.learned_wins()).count();
            println!("learned policy better on {wins}/{} points", rows.len());
            if rows.iter().any(|r| r.failure.as_deref().is_some_and(|f| f.starts_with("learned"))) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect(dataset: &Path) -> Result<ExitCode, Error> {
    let m = read_manifest(dataset)?;
    println!("system {} (n = {}, m = {})", m.system, m.state_dim, m.control_dim);
    println!("trajectories {}, samples {}", m.n_traj, m.n_samples);
    println!("delta {}, T default {:.4}, step {}", m.delta, m.t_default, m.step);
    println!("P = {:?}", m.p);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
