use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ditcal::harness::{
    cmd_ablate, cmd_calibrate, cmd_eval, cmd_sweep_scale, cmd_train, run_selftest, RunConfig, SelftestOptions,
};
use ditcal::Error;

#[derive(Parser)]
#[command(
    name = "ditcal",
    version,
    about = "Train a toy DiT and calibrate its gates with CMA-ES"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; affects wall time only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write a checkpoint and loss curve.
    Train,
    /// Reward with each block's gates set to zero.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reward over a grid of per-block gate scales.
    SweepScale {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Search calibration parameters and write a sidecar.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reward and diversity across sampling step counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Built-in numerical checks.
    Selftest {
        /// Corrupt the optimizer covariance to exercise the failure path.
        #[arg(long)]
        inject_asymmetry: bool,
    },
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build().map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let out = cli.common.out.clone();
    pool.install(|| match cli.command {
        Command::Train => {
            let s = cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps, final loss {:.6}; wrote {}",
                s.losses.len(),
                s.losses.last().copied().unwrap_or(f64::NAN),
                s.checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { checkpoint } => {
            let rows = cmd_ablate(&cfg, &checkpoint, &out)?;
            println!("wrote {} ablation rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepScale { checkpoint } => {
            let rows = cmd_sweep_scale(&cfg, &checkpoint, &out)?;
            println!("wrote {} sweep rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { checkpoint } => {
            let s = cmd_calibrate(&cfg, &checkpoint, &out)?;
            println!(
                "stopped by {} after {} generations (sigma {:.4}); held-out reward {:.6} vs baseline {:.6}",
                s.trigger.name(),
                s.generations.len(),
                s.final_sigma,
                s.sidecar.provenance.selected_heldout_reward,
                s.baseline_heldout
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            calibration,
        } => {
            let rows = cmd_eval(&cfg, &checkpoint, calibration.as_deref(), &out)?;
            println!("wrote {} evaluation rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { inject_asymmetry } => {
            let report = run_selftest(SelftestOptions { inject_asymmetry })?;
            println!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
