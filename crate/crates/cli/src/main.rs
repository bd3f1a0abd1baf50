use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfgp::experiment::{
    bench_scaling, emit_report, read_results_csv, run_experiment, theory_check, write_bench_report,
    ExperimentConfig, Method,
};
use pfgp::pf::AuxKind;

/// Sparse GP experiments with inducing points fitted by the preconditioned
/// Fisher divergence.
#[derive(Parser)]
#[command(name = "pfgp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep methods, inducing-set sizes and seeds from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Desk-scale checks of the objective and its guarantees.
    TheoryCheck,
    /// Time one objective-and-gradient evaluation over a grid of N.
    BenchScaling {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render SVG charts from an existing results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the directory holding the CSV.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    validation_mode: bool,
    #[arg(long)]
    emit_svg: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
            cfg.bench.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.validation_mode |= self.validation_mode;
        cfg.emit_svg |= self.emit_svg;
    }
}

fn load(config: &PathBuf, overrides: &Overrides) -> pfgp::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> pfgp::Result<u8> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let out = run_experiment(&cfg)?;
            println!("results: {}", out.results_path.display());
            for p in &out.svg_paths {
                println!("chart: {}", p.display());
            }
            if cfg.compute_eps && cfg.aux_kind == AuxKind::SorLowRank && cfg.methods.contains(&Method::PfDtc) {
                println!("note: eps_bound uses a SoR auxiliary and is a heuristic, not a certified bound");
            }
            let failed = out.failures();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see the status column", out.rows.len());
            }
            Ok(out.exit_code() as u8)
        }
        Command::TheoryCheck => {
            let checks = theory_check()?;
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 2 })
        }
        Command::BenchScaling { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let report = bench_scaling(&cfg.bench)?;
            for p in &report.points {
                println!("N = {:>6}: {:.4e} s", p.n, p.seconds);
            }
            println!("log-log slope {:.3}", report.slope);
            let (c, j) = write_bench_report(&report, &cfg.out_dir)?;
            println!("wrote {} and {}", c.display(), j.display());
            Ok(0)
        }
        Command::Report { results, out_dir } => {
            let rows = read_results_csv(&results)?;
            let dir = out_dir.unwrap_or_else(|| {
                results
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            for p in emit_report(&rows, &dir)? {
                println!("chart: {}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
