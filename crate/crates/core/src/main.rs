//! Command-line front end: reference solves, dataset generation, training,
//! full experiment cases, and metrics summaries.
//!
//! Exit status 0 on success, 1 for usage and configuration problems, 2 for
//! numerical failures (solver non-convergence, or training where every
//! replicate diverged).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavity_pinn::experiment::{
    field_file_name, parse_config, run_experiment, run_generate, run_report, run_solve, run_train,
    ExperimentConfig, ExperimentError, Overrides,
};
use cavity_pinn::physics::LidProfile;

#[derive(Parser)]
#[command(
    name = "cavity-pinn",
    version,
    about = "Lid-driven cavity surrogate models: reference solver, datasets, \
             physics-informed training, experiment cases"
)]
struct Cli {
    /// Experiment configuration file (required by generate/train/experiment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output override: a directory for config-driven commands, a file for
    /// solve and report.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Base seed override; replicate r trains from seed + r.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for experiment runs (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one cavity flow and write the field as CSV.
    Solve {
        /// Reynolds number of the flow.
        #[arg(long, allow_negative_numbers = true)]
        re: f64,
        /// Grid nodes per side.
        #[arg(long)]
        n: usize,
        /// Lid velocity profile: constant or regularized.
        #[arg(long, default_value = "regularized")]
        lid: String,
        /// Convergence tolerance on the vorticity-transport residual.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Build train/test/collocation datasets from already-solved fields.
    Generate,
    /// Run the first configured training unit (replicate 0) end to end.
    Train,
    /// Run the full case: every strategy or weight, every replicate, then
    /// metrics and a quartile report.
    Experiment,
    /// Summarize a metrics CSV into per-group quartile statistics.
    Report {
        /// Metrics CSV produced by `train` or `experiment`.
        #[arg(long = "in", value_name = "METRICS_CSV")]
        input: PathBuf,
    },
}

fn load_config(
    config: Option<&PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExperimentConfig, ExperimentError> {
    let path = config.ok_or_else(|| {
        ExperimentError::Invalid("--config <FILE> is required for this command".into())
    })?;
    parse_config(path, &Overrides { out_dir: out, seed })
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let Cli {
        config,
        out,
        seed: _seed,
        threads,
        cmd,
    } = cli;
    match cmd {
        Cmd::Solve { re, n, lid, tol } => {
            let lid = LidProfile::parse(&lid)
                .ok_or_else(|| ExperimentError::Invalid(format!("unknown lid profile {lid:?}")))?;
            let out = out.unwrap_or_else(|| PathBuf::from(field_file_name(re, n, lid)));
            let s = run_solve(re, n, lid, tol, &out)?;
            println!(
                "converged in {} fine-grid sweeps, final residual {:.3e}",
                s.iters, s.final_residual
            );
            println!("wrote {}", s.out_path.display());
        }
        Cmd::Generate => {
            let cfg = load_config(config.as_ref(), out, _seed)?;
            let s = run_generate(&cfg)?;
            println!(
                "wrote datasets under {} ({} train rows, {} test rows)",
                s.out_dir.display(),
                s.train_rows,
                s.test_rows
            );
        }
        Cmd::Train => {
            let cfg = load_config(config.as_ref(), out, _seed)?;
            let s = run_train(&cfg)?;
            for st in &s.stages {
                println!(
                    "{} stage {}: {} epochs, stopped by {}",
                    s.label, st.stage, st.epochs, st.stop_reason
                );
            }
            println!("wrote {}", s.metrics_path.display());
        }
        Cmd::Experiment => {
            let cfg = load_config(config.as_ref(), out, _seed)?;
            let s = run_experiment(&cfg, threads)?;
            println!(
                "{} runs finished ({} converged, {} diverged)",
                s.runs, s.survivors, s.divergences
            );
            println!("wrote {}", s.metrics_path.display());
            println!("wrote {}", s.report_path.display());
        }
        Cmd::Report { input } => {
            let out = out.unwrap_or_else(|| input.with_file_name("report.csv"));
            let s = run_report(&input, &out)?;
            println!("wrote {} ({} groups)", s.out_path.display(), s.groups);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
