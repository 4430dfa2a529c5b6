use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nclaw_cli::{
    cmd_eval, cmd_export, cmd_generate, cmd_train, configure_threads, parse_override, CliResult, EvalArgs, ExportFormat, GenerateArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "nclaw", version, about = "Differentiable MPM with learned constitutive laws")]
struct Cli {
    /// Worker thread cap.
    #[arg(long, env = "NCLAW_THREADS", global = true)]
    threads: Option<usize>,
    /// Force fixed-order reductions (bit-identical reruns).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with its analytic laws and write a full-state trajectory.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Material parameter override, e.g. `--param youngs_modulus=2e5`.
        #[arg(long = "param", value_parser = parse_override)]
        params: Vec<(String, f64)>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a neural constitutive law on a ground-truth trajectory.
    Train {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// TOML training configuration; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from an existing checkpoint instead of a random init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Roll out a checkpoint (or the scenario's analytic laws) and report the position MSE.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        /// Reference trajectory; regenerated from the scenario when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        every: usize,
        /// Per-frame MSE series as CSV.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Convert a trajectory to CSV or a PLY sequence.
    Export {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ExportFormat,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Generate { scenario, out, params, seed, steps } => {
            let r = cmd_generate(&GenerateArgs { scenario, overrides: params, out: out.clone(), seed, steps })?;
            println!("wrote {} frames of {} particles to {} in {:.2} s", r.frames, r.particles, out.display(), r.seconds);
        }
        Command::Train { gt, scenario, config, out, metrics, seed, epochs, init } => {
            let r = cmd_train(&TrainArgs { gt, scenario, config, out: out.clone(), metrics, seed, epochs, init, deterministic: cli.deterministic })?;
            if let Some(last) = r.history.last() {
                println!("final eval_loss_every5 {:e}; checkpoint {}", last.eval_loss_every5, out.display());
            }
        }
        Command::Eval { checkpoint, scenario, gt, every, series } => {
            let r = cmd_eval(&EvalArgs { checkpoint, scenario, gt, every, series, deterministic: cli.deterministic })?;
            println!("mse_every{every} {:e}", r.mse_every);
            println!("finite {} in_domain {}", r.all_finite, r.in_domain);
        }
        Command::Export { trajectory, format, out_dir } => {
            let files = cmd_export(&trajectory, format, &out_dir)?;
            println!("wrote {} files to {}", files.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
