//! Frozen experiment presets. Changing what a preset does requires bumping
//! its version, which every summary records.

use std::path::Path;

use log::info;
use serde_json::json;

use onebit_core::volume::{ratio_f64, volume_table};

use crate::config::{AccountingConfig, OptimizerKind, ProblemKindConfig, RunConfig};
use crate::error::{LabError, Result};
use crate::harness::run_training;
use crate::output::{volume_json, write_run, PresetTag};

pub const FIGURE1_NAME: &str = "figure1-analog";
pub const FIGURE1_VERSION: u32 = 1;
pub const VOLUME_NAME: &str = "volume-report";
pub const VOLUME_VERSION: u32 = 1;

pub const PRESETS: [&str; 2] = [FIGURE1_NAME, VOLUME_NAME];

/// Logistic regression on 8 workers, 2000 steps, 10% warmup.
pub fn figure1_config() -> RunConfig {
    let mut cfg = RunConfig {
        optimizer: OptimizerKind::OnebitAdam,
        workers: 8,
        seed: 2021,
        steps: 2000,
        warmup_steps: Some(200),
        ..RunConfig::default()
    };
    cfg.problem.kind = ProblemKindConfig::Logistic;
    cfg.problem.dim = 50;
    cfg.problem.samples_per_worker = 256;
    cfg.problem.batch_size = 16;
    cfg.problem.sigma = 0.0;
    cfg.problem.l2 = 1e-3;
    cfg.hyper.lr = 1e-2;
    cfg
}

/// Adam, 1-bit Adam and the naive baseline on a shared seed; three CSVs.
pub fn run_figure1(base: &RunConfig, out: &Path) -> Result<()> {
    let tag = PresetTag {
        name: FIGURE1_NAME.into(),
        version: FIGURE1_VERSION,
    };
    for optimizer in [
        OptimizerKind::Adam,
        OptimizerKind::OnebitAdam,
        OptimizerKind::NaiveCompressedAdam,
    ] {
        let cfg = RunConfig {
            optimizer,
            ..base.clone()
        };
        let record = run_training(&cfg)?;
        let (csv, _) = write_run(out, optimizer.name(), &record, Some(&tag))?;
        info!("{}: final loss {:?} -> {}", optimizer.name(), record.final_loss(), csv.display());
        println!("{:<24} final loss {:.6}", optimizer.name(), record.final_loss().unwrap_or(f64::NAN));
    }
    Ok(())
}

/// Measured per-element payload reduction in both accounting modes plus the
/// end-to-end ratio for a 16K/118K warmup split; prints a table and writes
/// `volume-report.json`.
pub fn run_volume_report(base: &RunConfig, out: &Path) -> Result<()> {
    let mut measured = Vec::new();
    for accounting in [AccountingConfig::Fp32, AccountingConfig::Fp16] {
        let mut cfg = RunConfig {
            optimizer: OptimizerKind::OnebitAdam,
            workers: base.workers.max(2),
            steps: 40,
            warmup_steps: Some(10),
            ..base.clone()
        };
        cfg.metrics.fp_accounting = accounting;
        measured.push((accounting, run_training(&cfg)?.volume));
    }
    let table = volume_table(16_000, 118_000);

    println!("{:<34} {:>10}", "quantity", "value");
    for (accounting, report) in &measured {
        let label = match accounting {
            AccountingConfig::Fp32 => "fp32",
            AccountingConfig::Fp16 => "fp16",
        };
        let reduction = report.payload_reduction.unwrap_or(f64::NAN);
        println!("{:<34} {:>9.3}%", format!("compression-stage reduction ({label})"), reduction * 100.0);
    }
    println!(
        "{:<34} {:>9.2}x  ({}/{})",
        "end-to-end fp16, warmup 16K/118K",
        ratio_f64(table.end_to_end_fp16),
        table.end_to_end_fp16.numer(),
        table.end_to_end_fp16.denom()
    );

    std::fs::create_dir_all(out).map_err(|e| LabError::io(out.display().to_string(), e))?;
    let doc = json!({
        "preset": PresetTag { name: VOLUME_NAME.into(), version: VOLUME_VERSION },
        "config": base.to_json(),
        "measured": measured.iter().map(|(_, r)| volume_json(r)).collect::<Vec<_>>(),
        "table": {
            "fp32_reduction": table.fp32_reduction,
            "fp16_reduction": table.fp16_reduction,
            "warmup_fraction": format!("{}/{}", table.warmup_fraction.numer(), table.warmup_fraction.denom()),
            "end_to_end_fp16": {
                "exact": format!("{}/{}", table.end_to_end_fp16.numer(), table.end_to_end_fp16.denom()),
                "value": ratio_f64(table.end_to_end_fp16),
            },
        },
    });
    let path = out.join("volume-report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("json") + "\n")
        .map_err(|e| LabError::io(path.display().to_string(), e))
}
