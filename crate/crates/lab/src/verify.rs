//! Executable checks, grouped into suites. Every check compares the
//! implementation against an independently computed expectation and reports
//! the measured discrepancy next to its threshold.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use onebit_core::compression::{decompress, onebit_compress};
use onebit_core::probe::speedup_probe;
use onebit_core::topology::aggregate_by_chunk;
use onebit_core::volume::{end_to_end_ratio, payload_ratio, reduction, volume_table};
use onebit_core::{
    AdamHyper, BufferRole, ChunkedTensor, CompressedTensor, DenseVector, ErrorBuffer, EtaMode, FpAccounting,
    LrSchedule, OneBitAdamState, Problem, ProblemKind, ProblemSpec, Ratio, SeededRng, Topology,
};

use crate::collective::Collective;
use crate::config::{AccountingConfig, OptimizerKind, RunConfig, TransportKind};
use crate::error::{LabError, Result};
use crate::harness::{run_training, RunRecord};
use crate::presets;
use crate::transport::{local_listeners, InProcTransport, TcpTransport, Transport, DEFAULT_TIMEOUT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Identities,
    Protocol,
    Convergence,
    Volume,
    Speedup,
    All,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    /// Acceptance criterion number; `None` for supporting checks.
    pub criterion: Option<u8>,
    pub name: &'static str,
    pub pass: bool,
    pub measured: f64,
    pub threshold: String,
    pub seconds: f64,
    pub limit_seconds: f64,
    pub detail: String,
}

impl CheckReport {
    pub fn line(&self) -> String {
        let tag = match self.criterion {
            Some(c) => format!("criterion {c}"),
            None => "check".to_string(),
        };
        format!(
            "{tag} {}: {} (measured {:.6e}, threshold {}, {:.2}s of {:.0}s) {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.measured,
            self.threshold,
            self.seconds,
            self.limit_seconds,
            self.detail
        )
    }
}

/// Time `f`, which returns (value within tolerance, measured, threshold, detail).
fn timed(
    criterion: Option<u8>,
    name: &'static str,
    limit: Duration,
    f: impl FnOnce() -> Result<(bool, f64, String, String)>,
) -> CheckReport {
    let start = Instant::now();
    let outcome = f();
    let seconds = start.elapsed().as_secs_f64();
    let (ok, measured, threshold, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, f64::NAN, "-".into(), format!("error: {e}")),
    };
    CheckReport {
        criterion,
        name,
        pass: ok && seconds < limit.as_secs_f64(),
        measured,
        threshold,
        seconds,
        limit_seconds: limit.as_secs_f64(),
        detail,
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Identities {
        out.extend([
            error_cancellation(),
            history_error_accumulates(),
            identity_compressor(),
            warmup_matches_adam_oracle(),
            magnitude_preservation(),
        ]);
    }
    if all || suite == Suite::Protocol {
        out.push(protocol_equivalence());
    }
    if all || suite == Suite::Speedup {
        out.push(linear_speedup());
    }
    if all || suite == Suite::Convergence {
        out.push(convergence_ordering());
    }
    if all || suite == Suite::Volume {
        out.push(volume_arithmetic());
    }
    if all || suite == Suite::Convergence {
        out.push(variance_stabilization());
    }
    out
}

fn quadratic(dim: usize, workers: usize, sigma: f32, seed: u64) -> Result<Problem> {
    Ok(Problem::new(ProblemSpec {
        kind: ProblemKind::Quadratic,
        dim,
        workers,
        sigma,
        seed,
        ..ProblemSpec::default()
    })?)
}

fn norm64(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Single worker, compressed updates with error feedback and a
/// pass-through server: the iterate differs from exact SGD on the same
/// gradients by the last residual only.
pub fn error_cancellation() -> CheckReport {
    timed(Some(1), "error-cancellation", Duration::from_secs(5), || {
        let (dim, steps, lr) = (32, 1000u64, 1e-3f32);
        let problem = quadratic(dim, 1, 0.0, 1)?;
        let hyper = AdamHyper {
            schedule: LrSchedule::Constant(lr),
            beta1: 0.0,
            beta2: 0.999,
            eta: 1.0,
            eta_mode: EtaMode::Inside,
        };
        let x0 = DenseVector::new((0..dim).map(|i| (i as f32 * 0.7).sin()).collect())?;
        let mut state = OneBitAdamState::new(x0.clone(), 0);
        let mut grad_sum = vec![0f64; dim];
        for _ in 0..steps {
            let g = problem.exact_gradient(0, state.x())?;
            grad_sum.iter_mut().zip(g.as_slice()).for_each(|(s, &v)| *s += f64::from(v));
            let ct = state.compression_step_local(&g, &hyper)?;
            state.apply_global(&ct, &hyper)?;
        }
        let lr = f64::from(lr);
        let sgd: Vec<f64> = x0
            .as_slice()
            .iter()
            .zip(&grad_sum)
            .map(|(&x, &s)| f64::from(x) - lr * s)
            .collect();
        let delta = state.worker_error().delta().as_slice();
        let gap = norm64(
            state
                .x()
                .as_slice()
                .iter()
                .zip(&sgd)
                .zip(delta)
                .map(|((&x, &s), &d)| f64::from(x) - s - lr * f64::from(d)),
        );
        let rel = gap / norm64(sgd.iter().copied());
        let residual_norm = norm64(delta.iter().map(|&d| f64::from(d)));
        Ok((
            rel <= 1e-5,
            rel,
            "1e-5".into(),
            format!("steps={steps} |delta_T|={residual_norm:.3e}"),
        ))
    })
}

/// Without feedback the deviation from SGD is the sum of every step's
/// compression error.
pub fn history_error_accumulates() -> CheckReport {
    timed(None, "history-error", Duration::from_secs(5), || {
        let (dim, steps, lr) = (32, 1000usize, 1e-3f32);
        let problem = quadratic(dim, 1, 0.0, 2)?;
        let mut x = DenseVector::new((0..dim).map(|i| (i as f32 * 0.3).cos()).collect())?;
        let x0 = x.clone();
        let mut grad_sum = vec![0f64; dim];
        let mut err_sum = vec![0f64; dim];
        for _ in 0..steps {
            let g = problem.exact_gradient(0, &x)?;
            let c = decompress(&onebit_compress(&g));
            let mut next = x.clone().into_vec();
            for i in 0..dim {
                grad_sum[i] += f64::from(g.as_slice()[i]);
                err_sum[i] += f64::from(g.as_slice()[i]) - f64::from(c.as_slice()[i]);
                next[i] -= lr * c.as_slice()[i];
            }
            x = DenseVector::new(next)?;
        }
        let lr = f64::from(lr);
        let gap: Vec<f64> = (0..dim)
            .map(|i| f64::from(x.as_slice()[i]) - (f64::from(x0.as_slice()[i]) - lr * grad_sum[i]))
            .collect();
        let expected: Vec<f64> = err_sum.iter().map(|e| lr * e).collect();
        let rel = norm64(gap.iter().zip(&expected).map(|(g, e)| g - e)) / norm64(expected.iter().copied());
        Ok((
            rel <= 1e-5,
            rel,
            "1e-5".into(),
            format!("|sum of errors|={:.3e}", norm64(expected)),
        ))
    })
}

/// Largest `|a_i - b_i| / |b_i|` over every coordinate of every iterate.
/// Coordinates whose reference magnitude is below `floor` times the
/// iterate's largest coordinate are compared against that floor instead.
fn max_relative_gap(a: &[Vec<f32>], b: &[Vec<f32>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(xa, xb)| {
            let top = xb.iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max);
            xa.iter()
                .zip(xb)
                .map(|(&p, &q)| {
                    let denom = f64::from(q.abs()).max(floor * top).max(f64::MIN_POSITIVE);
                    f64::from((p - q).abs()) / denom
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn with_trajectory(mut cfg: RunConfig) -> RunConfig {
    cfg.metrics.trajectory = true;
    cfg
}

fn trajectory(record: &RunRecord) -> &[Vec<f32>] {
    record.trajectory.as_deref().unwrap_or(&[])
}

/// With the identity compressor the compression phase is momentum SGD
/// preconditioned by the frozen variance.
pub fn identity_compressor() -> CheckReport {
    timed(Some(2), "identity-compressor", Duration::from_secs(10), || {
        let warmup = 50;
        let (mut worst, mut strict) = (0f64, 0f64);
        for workers in [1, 4] {
            let base = with_trajectory(RunConfig {
                workers,
                steps: warmup + 500,
                warmup_steps: Some(warmup),
                ..presets::figure1_config()
            });
            let ident = run_training(&RunConfig {
                optimizer: OptimizerKind::OnebitAdamIdentityCompressor,
                ..base.clone()
            })?;
            let msgd = run_training(&RunConfig {
                optimizer: OptimizerKind::MomentumSgd,
                ..base
            })?;
            let w = warmup as usize;
            // Averaging momenta versus averaging gradients rounds differently in
            // f32, so near-zero coordinates are judged against the iterate's scale.
            let (a, b) = (&trajectory(&ident)[w..], &trajectory(&msgd)[w..]);
            worst = worst.max(max_relative_gap(a, b, 1.0));
            strict = strict.max(max_relative_gap(a, b, 0.0));
        }
        Ok((
            worst <= 1e-6,
            worst,
            "1e-6".into(),
            format!("n in {{1, 4}}, 500 compression steps; per-coordinate relative {strict:.2e}"),
        ))
    })
}

/// Straight-line Adam without bias correction, written out per coordinate,
/// replaying the workers' gradient streams.
pub fn adam_oracle(cfg: &RunConfig, steps: u64) -> Result<Vec<Vec<f32>>> {
    let problem = Problem::new(cfg.problem_spec())?;
    let n = cfg.workers;
    let h = cfg.adam_hyper();
    let mut rngs: Vec<SeededRng> = (0..n).map(|w| SeededRng::for_stream(cfg.seed, w as u64)).collect();
    let mut x = problem.initial_point().into_vec();
    let d = x.len();
    let mut m = vec![0f32; d];
    let mut v = vec![0f32; d];
    let mut out = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        let xv = DenseVector::new(x.clone())?;
        let mut sum = vec![0f64; d];
        for (w, rng) in rngs.iter_mut().enumerate() {
            let g = problem.sample_gradient(w, &xv, rng)?;
            sum.iter_mut().zip(g.as_slice()).for_each(|(s, &gi)| *s += f64::from(gi));
        }
        let lr = h.lr(t);
        for i in 0..d {
            let g = (sum[i] / n as f64) as f32;
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            let g2 = g * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g2;
            let denom = match h.eta_mode {
                EtaMode::Inside => (v[i] + h.eta).sqrt(),
                EtaMode::Outside => v[i].sqrt() + h.eta,
            };
            let direction = m[i] / denom;
            x[i] -= lr * direction;
        }
        out.push(x.clone());
    }
    Ok(out)
}

pub fn warmup_matches_adam_oracle() -> CheckReport {
    timed(Some(3), "warmup-equivalence", Duration::from_secs(5), || {
        let warmup = 200u64;
        let cfg = with_trajectory(RunConfig {
            workers: 4,
            steps: warmup + 20,
            warmup_steps: Some(warmup),
            ..presets::figure1_config()
        });
        let run = run_training(&cfg)?;
        let oracle = adam_oracle(&cfg, warmup)?;
        let gap = max_relative_gap(&trajectory(&run)[..warmup as usize], &oracle, 0.0);
        Ok((gap <= 1e-6, gap, "1e-6".into(), format!("n=4, {warmup} warmup steps")))
    })
}

pub fn magnitude_preservation() -> CheckReport {
    timed(Some(4), "magnitude-preservation", Duration::from_secs(2), || {
        let mut rng = SeededRng::new(4);
        let mut worst = 0f64;
        let mut zero_signs_ok = true;
        for _ in 0..1000 {
            let d = rng.random_range(1..=1000usize);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let values: Vec<f32> = (0..d)
                .map(|_| {
                    if rng.random_range(0..8) == 0 {
                        0.0
                    } else {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * scale) as f32
                    }
                })
                .collect();
            if values.iter().all(|&v| v == 0.0) {
                continue;
            }
            let v = DenseVector::new(values)?;
            let ct = onebit_compress(&v);
            let back = decompress(&ct);
            let n_in = norm64(v.as_slice().iter().map(|&x| f64::from(x)));
            let n_out = norm64(back.as_slice().iter().map(|&x| f64::from(x)));
            worst = worst.max((n_out - n_in).abs() / n_in);
            zero_signs_ok &= v
                .as_slice()
                .iter()
                .zip(back.as_slice())
                .all(|(&a, &b)| a != 0.0 || b > 0.0);
        }
        Ok((
            worst <= 1e-5 && zero_signs_ok,
            worst,
            "1e-5".into(),
            format!("sign(0)=+1 honored: {zero_signs_ok}"),
        ))
    })
}

fn allreduce_grid_case<T: Transport + 'static>(
    endpoints: Vec<T>,
    d: usize,
    inputs: &[Vec<CompressedTensor>],
) -> Result<Vec<Vec<ChunkedTensor>>> {
    let handles: Vec<_> = endpoints
        .into_iter()
        .map(|t| {
            let inputs = inputs.to_vec();
            std::thread::spawn(move || -> Result<Vec<ChunkedTensor>> {
                let me = t.rank();
                let mut c = Collective::new(t, d, FpAccounting::Fp32)?;
                let mut residual = vec![0f32; c.topology().chunk(me).len()];
                let mut outs = Vec::with_capacity(inputs.len());
                for (s, step) in inputs.iter().enumerate() {
                    let phase = onebit_core::Phase::Compression;
                    outs.push(c.compressed_allreduce(s as u64, phase, &step[me], &mut residual)?);
                    c.end_step(phase);
                }
                Ok(outs)
            })
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("allreduce worker panicked"))
        .collect()
}

fn tcp_endpoints(n: usize) -> Result<Vec<TcpTransport>> {
    let (listeners, addrs) = local_listeners(n).map_err(|e| LabError::io("bind", e))?;
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let addrs = addrs.clone();
            std::thread::spawn(move || TcpTransport::from_listener(rank, l, &addrs, DEFAULT_TIMEOUT))
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("connect thread panicked").map_err(LabError::from))
        .collect()
}

/// Chunked allreduce on real transports against the single-process
/// per-chunk oracle, then whole runs on both transports.
pub fn protocol_equivalence() -> CheckReport {
    timed(Some(5), "protocol-oracle", Duration::from_secs(60), || {
        let steps = 4;
        let mut mismatches = 0usize;
        let mut cases = 0usize;
        for n in [1usize, 2, 3, 4, 8] {
            for d in [1usize, 5, 8, 1000] {
                let mut rng = SeededRng::new((n * 7919 + d) as u64);
                let inputs: Vec<Vec<CompressedTensor>> = (0..steps)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                                DenseVector::new(v).map(|v| onebit_compress(&v))
                            })
                            .collect::<onebit_core::Result<Vec<_>>>()
                    })
                    .collect::<onebit_core::Result<Vec<_>>>()?;
                let topo = Topology::new(n, d)?;
                let mut oracle_err: Vec<ErrorBuffer> = (0..n)
                    .map(|w| ErrorBuffer::new(topo.chunk(w).len().max(1), BufferRole::Server))
                    .collect();
                let expected: Vec<ChunkedTensor> = inputs
                    .iter()
                    .map(|s| aggregate_by_chunk(topo, s, &mut oracle_err))
                    .collect::<onebit_core::Result<Vec<_>>>()?;
                for outs in [
                    allreduce_grid_case(InProcTransport::mesh(n), d, &inputs)?,
                    allreduce_grid_case(tcp_endpoints(n)?, d, &inputs)?,
                ] {
                    cases += 1;
                    if outs.iter().any(|o| o != &expected) {
                        mismatches += 1;
                    }
                }
            }
        }

        let base = with_trajectory(RunConfig {
            workers: 4,
            steps: 120,
            warmup_steps: Some(20),
            ..presets::figure1_config()
        });
        let inproc = run_training(&base)?;
        let tcp = run_training(&RunConfig {
            transport: TransportKind::Tcp,
            ..base
        })?;
        let same_rows = csv_bytes(&inproc)? == csv_bytes(&tcp)?;
        let same_traj = trajectory(&inproc) == trajectory(&tcp);
        let ok = mismatches == 0 && same_rows && same_traj;
        Ok((
            ok,
            mismatches as f64,
            "0 mismatches".into(),
            format!("{cases} grid cases; inproc vs tcp metrics identical: {same_rows}, iterates identical: {same_traj}"),
        ))
    })
}

fn csv_bytes(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &record.rows {
        w.serialize(row)
            .map_err(|e| LabError::io("csv", std::io::Error::other(e)))?;
    }
    w.into_inner()
        .map_err(|e| LabError::io("csv", std::io::Error::other(e.to_string())))
}

pub fn linear_speedup() -> CheckReport {
    timed(Some(6), "linear-speedup", Duration::from_secs(30), || {
        let sigma = 1.0f32;
        let problem = quadratic(32, 8, sigma, 6)?;
        let x = problem.initial_point();
        let table = speedup_probe(&problem, &x, &[1, 2, 4, 8], 10_000, &mut SeededRng::new(6))?;
        let slope = table.slope.unwrap_or(f64::NAN);
        let base_ratio = table.rows[0].variance / f64::from(sigma * sigma);
        let vars: Vec<String> = table.rows.iter().map(|r| format!("n={}:{:.4}", r.workers, r.variance)).collect();
        Ok((
            (slope + 1.0).abs() <= 0.2,
            slope,
            "-1.0 +/- 0.2".into(),
            format!("var(n=1)/sigma^2={base_ratio:.3} [{}]", vars.join(" ")),
        ))
    })
}

/// The three figure-1 runs, in the order adam, onebit_adam, naive.
pub fn figure1_runs() -> Result<Vec<RunRecord>> {
    [
        OptimizerKind::Adam,
        OptimizerKind::OnebitAdam,
        OptimizerKind::NaiveCompressedAdam,
    ]
    .into_iter()
    .map(|optimizer| {
        run_training(&RunConfig {
            optimizer,
            ..presets::figure1_config()
        })
    })
    .collect()
}

pub fn convergence_ordering() -> CheckReport {
    timed(Some(7), "convergence-ordering", Duration::from_secs(120), || {
        let runs = figure1_runs()?;
        let loss = |i: usize| runs[i].final_loss().unwrap_or(f64::NAN);
        let (adam, onebit, naive) = (loss(0), loss(1), loss(2));
        let onebit_gap = (onebit - adam).abs() / adam;
        let naive_excess = (naive - adam) / adam;
        Ok((
            onebit_gap <= 0.05 && naive_excess >= 0.10,
            onebit_gap,
            "onebit within 5%, naive >= 10% worse".into(),
            format!("final loss adam={adam:.6} onebit_adam={onebit:.6} naive={naive:.6} (naive excess {:.1}%)", naive_excess * 100.0),
        ))
    })
}

pub fn variance_stabilization() -> CheckReport {
    timed(Some(9), "variance-stabilization", Duration::from_secs(60), || {
        let cfg = RunConfig {
            optimizer: OptimizerKind::Adam,
            ..presets::figure1_config()
        };
        let run = run_training(&cfg)?;
        let total = cfg.steps as f64;
        let frac = run.stability_step.map_or(f64::INFINITY, |s| s as f64 / total);
        Ok((
            frac < 0.5,
            frac,
            "< 0.5 of total steps".into(),
            format!("stable from step {:?} of {}", run.stability_step, cfg.steps),
        ))
    })
}

fn measured_payload_ratio(accounting: AccountingConfig) -> Result<Option<Ratio<u64>>> {
    let mut cfg = RunConfig {
        optimizer: OptimizerKind::OnebitAdam,
        workers: 4,
        steps: 40,
        warmup_steps: Some(10),
        ..presets::figure1_config()
    };
    cfg.metrics.fp_accounting = accounting;
    Ok(run_training(&cfg)?.volume.payload_ratio)
}

pub fn volume_arithmetic() -> CheckReport {
    timed(Some(8), "volume-arithmetic", Duration::from_secs(1), || {
        let fp32 = measured_payload_ratio(AccountingConfig::Fp32)?;
        let fp16 = measured_payload_ratio(AccountingConfig::Fp16)?;
        let table = volume_table(16_000, 118_000);
        let checks = [
            fp32 == Some(Ratio::from_integer(32)),
            fp32.map(reduction) == Some(0.96875),
            fp16 == Some(Ratio::from_integer(16)),
            fp16.map(reduction) == Some(0.9375),
            table.fp32_reduction == 0.96875,
            table.fp16_reduction == 0.9375,
            table.end_to_end_fp16 == Ratio::new(944, 179),
            end_to_end_ratio(Ratio::new(16_000, 118_000), payload_ratio(FpAccounting::Fp16)) == Ratio::new(944, 179),
        ];
        let failed = checks.iter().filter(|ok| !**ok).count();
        let e2e = onebit_core::volume::ratio_f64(table.end_to_end_fp16);
        Ok((
            failed == 0 && (e2e * 100.0).round() / 100.0 == 5.27,
            failed as f64,
            "0 (exact)".into(),
            format!(
                "measured fp32 {:?}, fp16 {:?}; end-to-end {}/{} = {e2e:.4}",
                fp32.map(|r| r.to_string()),
                fp16.map(|r| r.to_string()),
                table.end_to_end_fp16.numer(),
                table.end_to_end_fp16.denom()
            ),
        ))
    })
}
