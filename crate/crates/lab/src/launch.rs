//! Multi-process TCP runs on localhost: the coordinator writes a derived
//! config, starts one `worker` process per rank and merges their records.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus};

use log::info;

use crate::config::{RunConfig, TransportKind};
use crate::error::{LabError, Result, EXIT_CONFIG, EXIT_NUMERIC};
use crate::harness::{assemble, run_worker, RunRecord, WorkerRecord};
use crate::transport::{local_listeners, TcpTransport, DEFAULT_TIMEOUT};

/// Pick free localhost ports by binding and releasing them.
fn free_peers(n: usize) -> Result<Vec<String>> {
    let (_listeners, addrs) = local_listeners(n).map_err(|e| LabError::io("bind", e))?;
    Ok(addrs.iter().map(|a| a.to_string()).collect())
}

pub fn record_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("worker-{rank}.json"))
}

pub fn run_multiprocess(cfg: &RunConfig, exe: &Path, scratch: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let mut derived = cfg.clone();
    derived.transport = TransportKind::Tcp;
    if derived.peers.is_empty() {
        derived.peers = free_peers(cfg.workers)?;
    }
    fs::create_dir_all(scratch).map_err(|e| LabError::io(scratch.display().to_string(), e))?;
    let config_path = scratch.join("worker-config.toml");
    fs::write(&config_path, derived.to_toml()?).map_err(|e| LabError::io(config_path.display().to_string(), e))?;
    info!("launching {} worker processes on {:?}", cfg.workers, derived.peers);

    let children = (0..cfg.workers)
        .map(|rank| {
            Command::new(exe)
                .arg("worker")
                .arg("--config")
                .arg(&config_path)
                .arg("--rank")
                .arg(rank.to_string())
                .arg("--record")
                .arg(record_path(scratch, rank))
                .spawn()
                .map_err(|e| LabError::io(format!("spawn worker {rank}"), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let statuses = children
        .into_iter()
        .map(|mut c| c.wait().map_err(|e| LabError::io("wait for worker", e)))
        .collect::<Result<Vec<ExitStatus>>>()?;

    if let Some(err) = worst_failure(&statuses) {
        return Err(err);
    }
    let records = (0..cfg.workers)
        .map(|rank| {
            let path = record_path(scratch, rank);
            let text = fs::read_to_string(&path).map_err(|e| LabError::io(path.display().to_string(), e))?;
            serde_json::from_str::<WorkerRecord>(&text)
                .map_err(|e| LabError::Worker(format!("unreadable record from rank {rank}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    for rank in 0..cfg.workers {
        let _ = fs::remove_file(record_path(scratch, rank));
    }
    let _ = fs::remove_file(&config_path);
    // the record echoes the user's config, not the derived one
    assemble(cfg, records)
}

fn worst_failure(statuses: &[ExitStatus]) -> Option<LabError> {
    let codes: Vec<(usize, Option<i32>)> = statuses
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.success())
        .map(|(rank, s)| (rank, s.code()))
        .collect();
    if codes.is_empty() {
        return None;
    }
    let describe = || {
        codes
            .iter()
            .map(|(r, c)| format!("rank {r} exited with {c:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    if codes.iter().any(|(_, c)| *c == Some(EXIT_NUMERIC)) {
        Some(LabError::Numeric(describe()))
    } else if codes.iter().any(|(_, c)| *c == Some(EXIT_CONFIG)) {
        Some(LabError::Config(describe()))
    } else {
        Some(LabError::Worker(describe()))
    }
}

/// Body of the `worker` subcommand.
pub fn worker_main(config: &Path, rank: usize, record: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let addrs = cfg.peer_addrs()?;
    if addrs.len() != cfg.workers || rank >= cfg.workers {
        return Err(LabError::Config(format!("rank {rank} has no entry in the peer table")));
    }
    let problem = onebit_core::Problem::new(cfg.problem_spec())?;
    let transport = TcpTransport::connect(rank, &addrs, DEFAULT_TIMEOUT)?;
    let rec = run_worker(&cfg, &problem, transport)?;
    let text = serde_json::to_string(&rec).expect("record serializes");
    fs::write(record, text).map_err(|e| LabError::io(record.display().to_string(), e))
}
