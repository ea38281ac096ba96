use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use onebit_lab::config::{OptimizerKind, Overrides, RunConfig, TransportKind};
use onebit_lab::error::LabError;
use onebit_lab::output::{write_run, PresetTag};
use onebit_lab::verify::{run_suite, Suite};
use onebit_lab::{launch, presets, run_training};

#[derive(Parser)]
#[command(name = "onebit", version, about = "Error-compensated 1-bit Adam experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with a config file and/or a preset; writes CSV + JSON summary.
    Run(RunArgs),
    /// Run an acceptance suite; exits nonzero if any check fails.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// One rank of a multi-process TCP run (started by `run`).
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        record: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = presets::PRESETS)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    /// Number of workers.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    transport: Option<TransportKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ONEBIT_LOG", "warn"))
        .format_timestamp(None)
        .init();
}

fn run(args: RunArgs) -> Result<(), LabError> {
    let mut cfg = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(presets::FIGURE1_NAME)) | (None, Some(presets::VOLUME_NAME)) => presets::figure1_config(),
        (None, _) => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        optimizer: args.optimizer,
        workers: args.n,
        transport: args.transport,
        seed: args.seed,
        out: args.out.clone(),
        steps: args.steps,
        warmup_steps: args.warmup_steps,
    });
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("onebit-out"));

    match args.preset.as_deref() {
        Some(presets::FIGURE1_NAME) => return presets::run_figure1(&cfg, &out),
        Some(presets::VOLUME_NAME) => return presets::run_volume_report(&cfg, &out),
        _ => {}
    }

    let record = if cfg.transport == TransportKind::Tcp && cfg.workers > 1 {
        let exe = std::env::current_exe().map_err(|e| LabError::io("locate executable", e))?;
        launch::run_multiprocess(&cfg, &exe, &out.join(".workers"))?
    } else {
        run_training(&cfg)?
    };
    let stem = cfg.optimizer.name();
    let (csv, json) = write_run(&out, stem, &record, None::<&PresetTag>)?;
    println!(
        "{stem}: final loss {:.6}; wrote {} and {}",
        record.final_loss().unwrap_or(f64::NAN),
        csv.display(),
        json.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Worker { config, rank, record } => launch::worker_main(&config, rank, &record),
        Cmd::Verify { suite } => {
            let reports = run_suite(suite);
            for r in &reports {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", reports.len());
                return ExitCode::from(1);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
