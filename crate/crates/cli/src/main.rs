use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flwire_core::harness::{oracle, run, sweep};
use flwire_core::{Error, ExperimentConfig, Result, Variant};

#[derive(Parser)]
#[command(name = "flwire", version, about = "Federated learning over a simulated OFDMA cell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Run every (variant, seed) pair in parallel.
    Sweep(SweepArgs),
    /// Run with gradient tracing and check the measured gaps against the bound.
    Bounds(RunArgs),
    /// Check solvers and gradients against independent oracles.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// First seed of the sweep.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Variants to run (all four when omitted).
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn print_summary(out: &run::RunOutput) {
    let s = &out.summary;
    println!(
        "{} seed={} converged={} rounds={} convergence_time={:.6e}s final_loss={:.6e} final_metric={:.6}",
        s.variant, s.seed, s.converged, s.convergence_round, s.convergence_time, s.final_loss, s.final_metric
    );
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, dir) = load(args)?;
    let out = run::run_to_dir(&cfg, &dir)?;
    print_summary(&out);
    Ok(())
}

fn cmd_bounds(args: &RunArgs) -> Result<()> {
    let (mut cfg, dir) = load(args)?;
    cfg.trace_bounds = true;
    let out = run::run_to_dir(&cfg, &dir)?;
    let report = out.bound_report.as_ref().expect("tracing was enabled");
    println!(
        "checked {} rounds, skipped {}, violations {} (tolerance {:e})",
        report.rows.len(),
        report.skipped,
        report.violations,
        report.tolerance
    );
    if report.violations > 0 {
        return Err(Error::Domain(format!(
            "{} bound violations, see {}",
            report.violations,
            dir.join("bound_report.json").display()
        )));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = ExperimentConfig::from_file(&args.config)?;
    let variants = if args.variant.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variant.clone()
    };
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let dir = args
        .out
        .clone()
        .or_else(|| base.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let outputs = sweep::run_sweep(&base, &variants, &seeds, Some(&dir))?;
    let summaries: Vec<_> = outputs.iter().map(|o| &o.summary).collect();
    for m in sweep::medians(&summaries, &variants) {
        println!(
            "{}: {}/{} converged, median convergence time {:.6e}s, median final metric {:.6}",
            m.variant, m.converged, m.runs, m.median_convergence_time, m.median_final_metric
        );
    }
    Ok(())
}

fn cmd_oracle_check(seed: u64) -> Result<bool> {
    let reports = oracle::run_all(seed)?;
    for r in &reports {
        println!(
            "{} {}: {} cases, {} failures, worst {:e} (tolerance {:e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.worst,
            r.tolerance
        );
    }
    Ok(reports.iter().all(oracle::CheckReport::passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::OracleCheck { seed } => match cmd_oracle_check(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Domain("oracle check failed".into())),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
