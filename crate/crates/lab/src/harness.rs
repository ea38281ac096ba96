//! The distributed training loop: one thread (or process) per worker, all
//! interaction through [`Collective`].

use std::sync::Arc;
use std::thread;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use onebit_core::probe::{default_stability_window, variance_stability_trace, DEFAULT_STABILITY_THRESHOLD};
use onebit_core::volume::volume_report;
use onebit_core::{
    l2_norm, DenseVector, OneBitAdamState, Phase, PhaseCounters, Problem, SeededRng, TheoryParams, VolumeMeter,
    VolumeReport,
};

use crate::collective::Collective;
use crate::config::{OptimizerKind, RunConfig, TransportKind};
use crate::error::{LabError, Result};
use crate::transport::{local_listeners, InProcTransport, TcpTransport, Transport, DEFAULT_TIMEOUT};

/// Bumped whenever the per-step record layout changes.
pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    Warmup,
    Compression,
}

impl From<Phase> for PhaseLabel {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Warmup => PhaseLabel::Warmup,
            Phase::Compression => PhaseLabel::Compression,
        }
    }
}

impl PhaseLabel {
    pub fn phase(self) -> Phase {
        match self {
            PhaseLabel::Warmup => Phase::Warmup,
            PhaseLabel::Compression => Phase::Compression,
        }
    }
}

/// One optimizer step, measured after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    /// Global objective at the new iterate.
    pub loss: f64,
    /// Norm of the exact global gradient at the new iterate.
    pub grad_norm: f64,
    /// Norm of the second-moment estimate the optimizer holds.
    pub v_norm: f64,
    /// Wire bytes sent by all workers during the step.
    pub bytes_sent: u64,
    pub phase: PhaseLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_bits_sent: u64,
    pub messages_sent: u64,
    pub steps: u64,
}

impl From<&PhaseCounters> for Counters {
    fn from(c: &PhaseCounters) -> Self {
        Self {
            bytes_sent: c.bytes_sent,
            bytes_received: c.bytes_received,
            payload_bits_sent: c.payload_bits_sent,
            messages_sent: c.messages_sent,
            steps: c.steps,
        }
    }
}

impl From<Counters> for PhaseCounters {
    fn from(c: Counters) -> Self {
        Self {
            bytes_sent: c.bytes_sent,
            bytes_received: c.bytes_received,
            payload_bits_sent: c.payload_bits_sent,
            messages_sent: c.messages_sent,
            steps: c.steps,
        }
    }
}

/// What one worker hands back after its loop. Only rank 0 fills `rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub rank: usize,
    pub rows: Vec<StepRow>,
    pub wall_seconds: Vec<f64>,
    pub bytes_per_step: Vec<u64>,
    pub warmup: Counters,
    pub compression: Counters,
    pub smoothness: f32,
    pub epsilon: f32,
    pub v_min: f32,
    pub final_x: Vec<f32>,
    pub trajectory: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub rows: Vec<StepRow>,
    pub wall_seconds: Vec<f64>,
    pub volume: VolumeReport,
    pub theory: TheoryParams,
    /// First step after which `||v||` stays within 1% per step.
    pub stability_step: Option<usize>,
    pub final_x: Vec<f32>,
    /// Iterates after every step, when requested.
    pub trajectory: Option<Vec<Vec<f32>>>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Run every worker of `cfg` in this process, one thread each.
/// `TransportKind::Tcp` uses real sockets on 127.0.0.1.
pub fn run_training(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let problem = Arc::new(Problem::new(cfg.problem_spec())?);
    info!(
        "run {} n={} transport={:?} steps={} warmup={}",
        cfg.optimizer.name(),
        cfg.workers,
        cfg.transport,
        cfg.steps,
        cfg.resolved_warmup()
    );
    let results: Vec<Result<WorkerRecord>> = match cfg.transport {
        TransportKind::Inproc => spawn_workers(cfg, &problem, InProcTransport::mesh(cfg.workers)),
        TransportKind::Tcp => {
            let (listeners, addrs) = local_listeners(cfg.workers).map_err(|e| LabError::io("bind", e))?;
            thread::scope(|s| {
                let handles: Vec<_> = listeners
                    .into_iter()
                    .enumerate()
                    .map(|(rank, l)| {
                        let addrs = addrs.clone();
                        let problem = Arc::clone(&problem);
                        s.spawn(move || {
                            let t = TcpTransport::from_listener(rank, l, &addrs, DEFAULT_TIMEOUT)?;
                            run_worker(cfg, &problem, t)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        }
    };
    let records = first_cause(results)?;
    assemble(cfg, records)
}

fn spawn_workers<T: Transport + 'static>(
    cfg: &RunConfig,
    problem: &Arc<Problem>,
    endpoints: Vec<T>,
) -> Vec<Result<WorkerRecord>> {
    thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|t| {
                let problem = Arc::clone(problem);
                s.spawn(move || run_worker(cfg, &problem, t))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// All records, or the error that started the failure cascade (a peer's
/// disconnect is only reported when nothing more specific exists).
pub fn first_cause(results: Vec<Result<WorkerRecord>>) -> Result<Vec<WorkerRecord>> {
    let mut secondary = None;
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if e.is_secondary() => {
                secondary.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match secondary {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

/// One worker's loop.
pub fn run_worker<T: Transport>(cfg: &RunConfig, problem: &Problem, transport: T) -> Result<WorkerRecord> {
    let rank = transport.rank();
    let hyper = cfg.adam_hyper();
    let dim = problem.param_dim();
    let mut coll = Collective::new(transport, dim, cfg.accounting())?;
    let owned = coll.topology().chunk(rank);
    let mut state = OneBitAdamState::new(problem.initial_point(), cfg.effective_warmup());
    let mut rng = SeededRng::for_stream(cfg.seed, rank as u64);
    state.theory_mut().l = problem.smoothness_estimate();
    state.theory_mut().sigma = problem.spec().sigma;
    state.theory_mut().beta = hyper.beta1;

    let steps = cfg.steps as usize;
    let mut rows = Vec::new();
    let mut wall = Vec::with_capacity(steps);
    let mut bytes_per_step = Vec::with_capacity(steps);
    let mut trajectory = cfg.metrics.trajectory.then(Vec::new);

    for t in 0..cfg.steps {
        let started = Instant::now();
        let g = problem.sample_gradient(rank, state.x(), &mut rng)?;
        if state.ready_to_freeze() {
            state.freeze_variance()?;
            debug!("rank {rank}: variance frozen at step {t}");
        }
        let phase = match cfg.optimizer {
            OptimizerKind::NaiveCompressedAdam => Phase::Compression,
            _ => state.phase(),
        };

        match (cfg.optimizer, phase) {
            (OptimizerKind::NaiveCompressedAdam, _) => {
                let ct = state.naive_local(&g)?;
                let residual = &mut state.server_error_mut().as_mut_slice()[owned.clone()];
                let avg = coll.compressed_allreduce(t, phase, &ct, residual)?;
                state.naive_apply(&avg.decompress(), &hyper)?;
            }
            (_, Phase::Warmup) => {
                let avg = coll.fp_allreduce(t, phase, &g)?;
                state.adam_step(&avg, &hyper)?;
            }
            (OptimizerKind::OnebitAdam, Phase::Compression) => {
                let ct = state.compression_step_local(&g, &hyper)?;
                let residual = &mut state.server_error_mut().as_mut_slice()[owned.clone()];
                let avg = coll.compressed_allreduce(t, phase, &ct, residual)?;
                state.apply_global_dense(avg.decompress(), &hyper)?;
            }
            (OptimizerKind::OnebitAdamIdentityCompressor, Phase::Compression) => {
                let local = state.local_momentum(&g, &hyper)?;
                let avg = coll.fp_allreduce(t, phase, &local)?;
                state.apply_global_dense(avg, &hyper)?;
            }
            (OptimizerKind::MomentumSgd, Phase::Compression) => {
                let avg = coll.fp_allreduce(t, phase, &g)?;
                state.momentum_sgd_step(&avg, &hyper)?;
            }
            (OptimizerKind::Adam, Phase::Compression) => unreachable!("adam never leaves warmup"),
        }

        bytes_per_step.push(coll.end_step(phase));
        if rank == 0 {
            let loss = problem.loss(state.x())?;
            if !loss.is_finite() {
                return Err(LabError::Numeric(format!("loss is {loss} after step {t}")));
            }
            let grad = problem.full_gradient(state.x())?;
            rows.push(StepRow {
                step: t,
                loss,
                grad_norm: f64::from(l2_norm(&grad)),
                v_norm: f64::from(l2_norm(state.v())),
                bytes_sent: 0,
                phase: phase.into(),
            });
        }
        if let Some(traj) = trajectory.as_mut() {
            traj.push(state.x().as_slice().to_vec());
        }
        wall.push(started.elapsed().as_secs_f64());
    }

    let (_transport, meter) = coll.into_parts();
    Ok(WorkerRecord {
        rank,
        rows,
        wall_seconds: wall,
        bytes_per_step,
        warmup: meter.phase(Phase::Warmup).into(),
        compression: meter.phase(Phase::Compression).into(),
        smoothness: state.theory().l,
        epsilon: state.theory().epsilon,
        v_min: state.theory().v_min,
        final_x: state.x().as_slice().to_vec(),
        trajectory,
    })
}

/// Merge per-worker records into the run record (rank 0's metrics, traffic
/// summed over all workers).
pub fn assemble(cfg: &RunConfig, mut records: Vec<WorkerRecord>) -> Result<RunRecord> {
    records.sort_by_key(|r| r.rank);
    if records.len() != cfg.workers || records.iter().enumerate().any(|(i, r)| r.rank != i) {
        return Err(LabError::Worker(format!(
            "expected one record per rank 0..{}, got {}",
            cfg.workers,
            records.len()
        )));
    }
    let steps = cfg.steps as usize;
    if records.iter().any(|r| r.bytes_per_step.len() != steps) || records[0].rows.len() != steps {
        return Err(LabError::Worker("workers disagree on the number of steps".into()));
    }
    let mut rows = std::mem::take(&mut records[0].rows);
    for (i, row) in rows.iter_mut().enumerate() {
        row.bytes_sent = records.iter().map(|r| r.bytes_per_step[i]).sum();
    }
    let meters: Vec<VolumeMeter> = records
        .iter()
        .map(|r| VolumeMeter::from_counters(r.rank, cfg.accounting(), r.warmup.into(), r.compression.into()))
        .collect();
    let warmup_steps = match cfg.optimizer {
        OptimizerKind::NaiveCompressedAdam => 0,
        _ => cfg.effective_warmup().min(cfg.steps),
    };
    let volume = volume_report(&meters, warmup_steps, cfg.steps);

    let v_norms: Vec<f64> = rows.iter().map(|r| r.v_norm).collect();
    let stability_step = variance_stability_trace(&v_norms, DEFAULT_STABILITY_THRESHOLD, default_stability_window(steps));

    let hyper = cfg.adam_hyper();
    let problem_spec = cfg.problem_spec();
    let theory = TheoryParams {
        l: records[0].smoothness,
        sigma: problem_spec.sigma,
        epsilon: records.iter().map(|r| r.epsilon).fold(0.0, f32::max),
        beta: hyper.beta1,
        v_min: records[0].v_min,
    };
    let wall_seconds = std::mem::take(&mut records[0].wall_seconds);
    let final_x = std::mem::take(&mut records[0].final_x);
    let trajectory = records[0].trajectory.take();
    Ok(RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        wall_seconds,
        volume,
        theory,
        stability_step,
        final_x,
        trajectory,
    })
}

/// Initial iterate and problem for `cfg`, for oracles that replay a run.
pub fn problem_for(cfg: &RunConfig) -> Result<(Problem, DenseVector)> {
    let p = Problem::new(cfg.problem_spec())?;
    let x0 = p.initial_point();
    Ok((p, x0))
}
