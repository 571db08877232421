use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hostcp::harness::{
    emit_report, gen_data, run_experiment, run_train, ExperimentConfig, ExperimentKind, Report,
};
use hostcp::Error;

#[derive(Parser)]
#[command(name = "hostcp", version, about = "Data valuation with a learned, differentiable subset-selection layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Retrain on the most valuable fractions against random subsets.
    Addition(RunArgs),
    /// Retrain without the most valuable fractions against random removals.
    Removal(RunArgs),
    /// Find flipped labels by inspecting the least valuable points.
    Mislabel(RunArgs),
    /// Rank flipped labels and score the ranking with NDCG.
    Ndcg(RunArgs),
    /// Time one training epoch across training-set sizes.
    Timing(RunArgs),
    /// Joint training only; writes the training logs.
    Train(RunArgs),
    /// Write a synthetic dataset as CSV.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(kind: ExperimentKind, args: &RunArgs) -> hostcp::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })?;
    if let Some(k) = config.experiment {
        if k != kind {
            return Err(Error::Config(format!(
                "config names experiment {:?} but {:?} was requested",
                k.name(),
                kind.name()
            )));
        }
    }
    config.experiment = Some(kind);
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    config.output_dir = Some(out.clone());
    Ok((config, out))
}

fn summarize(report: &Report) {
    println!("{:>10} {:>10} {:>10} {:>10}", "fraction", "mean", "stddev", "baseline");
    for a in &report.aggregates {
        let base = a.baseline_mean.map_or("-".to_string(), |b| format!("{b:.4}"));
        println!("{:>10} {:>10.4} {:>10.4} {:>10}", a.fraction, a.mean, a.stddev, base);
    }
    if let Some(t) = &report.timings {
        println!("seconds per training row {:.3e}, R^2 {:.4}", t.slope, t.r_squared);
    }
}

fn execute(kind: ExperimentKind, args: &RunArgs) -> hostcp::Result<()> {
    let (config, out) = load(kind, args)?;
    let report = if kind == ExperimentKind::Train {
        let (report, logs) = run_train(&config)?;
        std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        let path = out.join("trainlog.json");
        let json = serde_json::to_string_pretty(&logs)? + "\n";
        std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
        report
    } else {
        run_experiment(&config)?
    };
    for path in emit_report(&report, &out)? {
        eprintln!("wrote {}", path.display());
    }
    summarize(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Addition(a) => (ExperimentKind::Addition, a),
        Command::Removal(a) => (ExperimentKind::Removal, a),
        Command::Mislabel(a) => (ExperimentKind::Mislabel, a),
        Command::Ndcg(a) => (ExperimentKind::Ndcg, a),
        Command::Timing(a) => (ExperimentKind::Timing, a),
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::GenData { n, d, seed, out } => {
            let result = gen_data(*n, *d, *seed, out).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            });
            return match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            };
        }
    };
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config() {
        ExitCode::from(2)
    } else if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(1)
    }
}
