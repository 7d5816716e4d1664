use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neural_mms_cli::commands::{self, CertifyOptions, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "neural-mms", version, about = "Neural minimizing-movement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or configured experiment.
    Run {
        /// track1d, regress10d, csv_regression or custom.
        #[arg(long)]
        preset: Option<String>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        outer_steps: Option<usize>,
        /// Comma-separated list of gn, adam, gd, exact.
        #[arg(long)]
        solvers: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Run the solver sweep concurrently.
        #[arg(long)]
        parallel: bool,
        /// Any config key, as KEY=VALUE (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check the tracking recurrence on a trajectory CSV.
    Certify {
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Contraction factor (defaults to the file's rho column).
        #[arg(long)]
        rho: Option<f64>,
        /// Jacobian-Lipschitz estimate for the non-degeneracy budget.
        #[arg(long)]
        l_hat: Option<f64>,
        /// Certificate CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diff two trajectory CSVs, or two iterate CSVs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> neural_mms_cli::Result<i32> {
    match cli.command {
        Command::Run {
            preset,
            config,
            out,
            seed,
            tau,
            outer_steps,
            solvers,
            epsilon,
            delta,
            parallel,
            set,
        } => {
            let mut overrides: Vec<(String, String)> = Vec::new();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((k.to_string(), v));
                }
            };
            push("preset", preset);
            push("output_dir", out.map(|p| p.display().to_string()));
            push("seed", seed.map(|v| v.to_string()));
            push("tau", tau.map(|v| v.to_string()));
            push("outer_steps", outer_steps.map(|v| v.to_string()));
            push("solvers", solvers);
            push("epsilon", epsilon.map(|v| v.to_string()));
            push("delta", delta.map(|v| v.to_string()));
            push("parallel", parallel.then(|| "true".to_string()));
            for kv in set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| neural_mms_cli::CliError::Input(format!("--set expects KEY=VALUE, got '{kv}'")))?;
                overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            commands::run(config.as_deref(), &overrides)
        }
        Command::Certify {
            trajectory,
            epsilon,
            rho,
            l_hat,
            out,
        } => commands::certify(
            &trajectory,
            &CertifyOptions {
                epsilon,
                rho,
                l_hat,
                output: out,
            },
        ),
        Command::Compare { a, b, out } => commands::compare(&a, &b, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = dispatch(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_RUNTIME
    });
    ExitCode::from(code as u8)
}
