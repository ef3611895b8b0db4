use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmdgm::experiment::{run_eval, run_experiment, ExperimentConfig};
use gmdgm::models::ModelKind;
use gmdgm::selftest::{run_selftest, Hooks};

#[derive(Parser)]
#[command(name = "gmdgm", version, about = "Semi-unsupervised learning with GM-DGM and M2")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeded runs from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split described by a config file.
    Eval(EvalArgs),
    /// Run the fast invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (TOML). Defaults to the bundled MNIST protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Overrides,
    /// Checkpoint directory (holding manifest.txt and params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: gmdgm::Error| e.to_string())
}

fn load_config(o: &Overrides) -> gmdgm::Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::mnist_semiunsup(),
    };
    if let Some(m) = o.model {
        cfg.train.model = m;
    }
    if let Some(out) = &o.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn train(args: &TrainArgs) -> gmdgm::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(r) = args.repeats {
        cfg.output.repeats = r;
    }
    cfg.validate()?;
    let result = run_experiment(&cfg, true)?;
    for r in &result.runs {
        println!(
            "{} seed={} best_epoch={} val_elbo={:.4} test_accuracy={:.4}",
            r.name, r.seed, r.outcome.best_epoch, r.outcome.best_val_elbo, r.report.accuracy
        );
    }
    let best = result.best_run();
    println!(
        "best run by validation ELBO: {} (test accuracy {:.4})",
        best.name, best.report.accuracy
    );
    println!("artifacts in {}", cfg.output.dir.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> gmdgm::Result<()> {
    let cfg = load_config(&args.common)?;
    let out = args.common.out.clone().unwrap_or_else(|| args.checkpoint.join("eval"));
    let report = run_eval(&args.checkpoint, &cfg, &out)?;
    print!("{}", report.metrics_text());
    println!("report written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Selftest { seed } => {
            let results = run_selftest(Hooks::default(), *seed);
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{} {} ({:.1}s): {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                println!("all {} checks passed", results.len());
                Ok(())
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                return ExitCode::FAILURE;
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
