use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hedonic_core::error::Error;
use hedonic_core::pipeline::{self, RunConfig, Stage, StageSelection};
use hedonic_core::simoracle::{write_fixture, FixtureConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_OTHER: u8 = 1;
const EXIT_VERIFY: u8 = 3;
const EXIT_ROBUSTNESS: u8 = 20;

#[derive(Parser)]
#[command(name = "hedonic", version, about = "Discourse-to-price hedonic pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages (text, panel, visual, merge, estimate).
    Run(RunArgs),
    /// Refit the sample and window variants on the merged table.
    Robustness(RunArgs),
    /// Check an output directory against its manifest.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic input fixture and a matching run.conf.
    SimulateFixture(FixtureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `all` or a single stage.
    #[arg(long, default_value = "all")]
    stage: String,
    /// lag1, lag2 or roll3.
    #[arg(long)]
    window: Option<String>,
    /// s0, s1, s2 or s3.
    #[arg(long)]
    sensitivity: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    collections: usize,
    #[arg(long, default_value_t = 40)]
    nfts: usize,
    #[arg(long, default_value_t = 240)]
    trades: usize,
    /// Extra trades per collection index.
    #[arg(long, default_value_t = 40)]
    trade_step: usize,
    #[arg(long, default_value_t = 90)]
    days: usize,
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let cwd = Path::new(".");
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = &args.window {
        cfg.set("window", w, cwd)?;
    }
    if let Some(s) = &args.sensitivity {
        cfg.set("sensitivity", s, cwd)?;
    }
    if let Some(o) = &args.out {
        cfg.set("out", &o.to_string_lossy(), cwd)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim(), cwd)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Stage { stage, .. } => Stage::from_name(stage).map_or(EXIT_OTHER, |s| s.exit_code() as u8),
        _ => EXIT_OTHER,
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_for(err))
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let selection = StageSelection::parse(&args.stage)?;
    let manifest = pipeline::run_pipeline(&cfg, selection)?;
    println!("wrote {} files to {} (config {})", manifest.files.len(), cfg.out.display(), &manifest.config_hash[..12]);
    Ok(())
}

fn robustness(args: &RunArgs) -> Result<bool, Error> {
    let cfg = load_config(args)?;
    let report = pipeline::run_robustness(&cfg)?;
    let mut all_ok = true;
    for r in &report.results {
        match &r.outcome {
            Ok((d, fit)) => println!("{:3} {:24} n={} loglik={:.4}", r.variant.id, r.variant.heading, d.n_obs(), fit.loglik),
            Err(e) => {
                all_ok = false;
                println!("{:3} {:24} failed: {e}", r.variant.id, r.variant.heading);
            }
        }
    }
    Ok(all_ok)
}

fn simulate_fixture(args: &FixtureArgs) -> Result<(), Error> {
    let cfg = FixtureConfig {
        n_collections: args.collections,
        nfts_per_collection: args.nfts,
        trades_per_collection: args.trades,
        trade_step: args.trade_step,
        days: args.days,
        seed: args.seed,
        ..FixtureConfig::default()
    };
    let files = write_fixture(&args.out, &cfg)?;
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let conf = format!(
        "transactions = {}\nmarket = {}\ndiscourse = {}\nfeatures = {}\nout = out\nseed = {}\n",
        name(&files.transactions),
        name(&files.market),
        name(&files.discourse),
        name(&files.features),
        args.seed
    );
    let path = args.out.join("run.conf");
    std::fs::write(&path, conf).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote fixture with {} transactions (largest collection {}) to {}",
        files.n_transactions,
        files.largest_collection,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a).map(|_| ExitCode::SUCCESS),
        Command::Robustness(a) => {
            robustness(a).map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_ROBUSTNESS) })
        }
        Command::Verify { out } => pipeline::verify_manifest(out).map(|bad| {
            if bad.is_empty() {
                println!("manifest ok");
                ExitCode::SUCCESS
            } else {
                for b in &bad {
                    println!("mismatch: {b}");
                }
                ExitCode::from(EXIT_VERIFY)
            }
        }),
        Command::SimulateFixture(a) => simulate_fixture(a).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| fail(&e))
}
