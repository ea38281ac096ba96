//! Metrics files: one CSV per run and a JSON summary next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use onebit_core::volume::ratio_f64;
use onebit_core::{FpAccounting, Ratio, VolumeReport};

use crate::error::{LabError, Result};
use crate::harness::{RunRecord, StepRow};

pub const CSV_HEADER: &str = "step,loss,grad_norm,v_norm,bytes_sent,phase";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetTag {
    pub name: String,
    pub version: u32,
}

pub fn write_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path.display().to_string(), e))
}

pub fn read_csv(path: &Path) -> Result<Vec<StepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<StepRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path.display().to_string(), std::io::Error::other(e))
}

fn ratio_json(r: Option<Ratio<u64>>) -> Value {
    match r {
        Some(r) => json!({ "exact": format!("{}/{}", r.numer(), r.denom()), "value": ratio_f64(r) }),
        None => Value::Null,
    }
}

pub fn volume_json(v: &VolumeReport) -> Value {
    json!({
        "accounting": match v.accounting { FpAccounting::Fp32 => "fp32", FpAccounting::Fp16 => "fp16" },
        "payload_ratio": ratio_json(v.payload_ratio),
        "payload_reduction": v.payload_reduction,
        "wire_ratio": v.wire_ratio,
        "warmup_fraction": ratio_json(Some(v.warmup_fraction)),
        "end_to_end": ratio_json(v.end_to_end),
        "warmup_bytes_per_step": ratio_json(v.warmup_bytes_per_step),
        "compression_bytes_per_step": ratio_json(v.compression_bytes_per_step),
    })
}

pub fn summary_json(record: &RunRecord, preset: Option<&PresetTag>) -> Value {
    let steps = record.wall_seconds.len().max(1) as f64;
    json!({
        "schema_version": record.schema_version,
        "preset": preset,
        "config": record.config.to_json(),
        "final_loss": record.final_loss(),
        "final_grad_norm": record.rows.last().map(|r| r.grad_norm),
        "volume": volume_json(&record.volume),
        "probes": {
            "variance_stable_step": record.stability_step,
            "steps": record.rows.len(),
        },
        "theory": {
            "smoothness": record.theory.l,
            "sigma": record.theory.sigma,
            "max_residual_norm": record.theory.epsilon,
            "beta1": record.theory.beta,
            "min_frozen_variance": record.theory.v_min,
        },
        "mean_step_seconds": record.wall_seconds.iter().sum::<f64>() / steps,
    })
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
pub fn write_run(dir: &Path, stem: &str, record: &RunRecord, preset: Option<&PresetTag>) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir.display().to_string(), e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_csv(&csv_path, &record.rows)?;
    let text = serde_json::to_string_pretty(&summary_json(record, preset)).expect("json values serialize");
    fs::write(&json_path, text + "\n").map_err(|e| LabError::io(json_path.display().to_string(), e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::PhaseLabel;

    #[test]
    fn csv_has_expected_header_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            StepRow {
                step: 0,
                loss: 0.6931471805599453,
                grad_norm: 1e-3,
                v_norm: 0.0,
                bytes_sent: 42,
                phase: PhaseLabel::Warmup,
            },
            StepRow {
                step: 1,
                loss: 0.5,
                grad_norm: 2.5,
                v_norm: 1.25,
                bytes_sent: 7,
                phase: PhaseLabel::Compression,
            },
        ];
        let path = dir.path().join("r.csv");
        write_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some(CSV_HEADER));
        assert!(text.contains(",compression"));
        assert_eq!(read_csv(&path).unwrap(), rows);
    }
}
