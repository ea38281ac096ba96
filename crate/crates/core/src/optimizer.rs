//! Adam without bias correction, preconditioned momentum SGD, the naive
//! compressed-Adam baseline, and the two-phase 1-bit Adam state machine.
//!
//! A 1-bit Adam worker runs plain Adam for `warmup_steps` steps, freezes the
//! variance, then switches to error-compensated 1-bit momentum SGD that uses
//! the frozen variance as a fixed coordinate-wise preconditioner:
//!
//! ```text
//! warmup (t < T_w):  m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2;  x -= lr(t) m / sqrt(v + eta)
//! switch (t = T_w):  v_frozen = v
//! compression:       m_i  = b1 m + (1-b1) g_i                       (per worker, m shared)
//!                    mh_i = C[m_i + delta_i];  delta_i = m_i + delta_i - mh_i
//!                    mbar = C[mean(mh_i) + dbar]; dbar = mean(mh_i) + dbar - mbar
//!                    m = mbar;  x -= lr(t) m / sqrt(v_frozen + eta)
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::compression::{
    compress_feedback_slice, compress_with_error_feedback, decompress, naive_compress, BufferRole,
    CompressedTensor, ErrorBuffer,
};
use crate::error::{Error, Result};
use crate::numerics::{denominator, l2_norm, DenseVector, EtaMode};

/// Learning-rate schedule `step -> lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f32),
    /// Linear ramp to `peak` over `warmup` steps, then multiply by `factor`
    /// every `interval` steps.
    WarmupDecay {
        peak: f32,
        warmup: u64,
        interval: u64,
        factor: f32,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f32 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupDecay {
                peak,
                warmup,
                interval,
                factor,
            } => {
                if step < warmup {
                    peak * (step + 1) as f32 / warmup as f32
                } else {
                    let decays = (step - warmup) / interval.max(1);
                    peak * libm::powf(factor, decays as f32)
                }
            }
        }
    }

    /// `lr(t) / lr(t - 1)`, the weight applied to the carried residual.
    pub fn ratio(&self, step: u64) -> f32 {
        if step == 0 {
            return 1.0;
        }
        match self {
            LrSchedule::Constant(_) => 1.0,
            _ => self.lr(step) / self.lr(step - 1),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant(lr) => lr > 0.0 && lr.is_finite(),
            LrSchedule::WarmupDecay {
                peak,
                warmup,
                factor,
                ..
            } => peak > 0.0 && peak.is_finite() && warmup > 0 && factor > 0.0 && factor <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Hyper("learning-rate schedule must stay positive"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub schedule: LrSchedule,
    pub beta1: f32,
    pub beta2: f32,
    pub eta: f32,
    pub eta_mode: EtaMode,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::Constant(1e-3),
            beta1: 0.9,
            beta2: 0.999,
            eta: 1e-8,
            eta_mode: EtaMode::Inside,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Hyper("beta1 must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Hyper("beta2 must lie in [0, 1)"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Hyper("eta must be positive"));
        }
        self.schedule.validate()
    }

    pub fn lr(&self, step: u64) -> f32 {
        self.schedule.lr(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Compression,
}

/// Diagnostic estimates of the constants in the convergence analysis.
/// Nothing here feeds back into the algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TheoryParams {
    /// Smoothness constant estimate.
    pub l: f32,
    /// Gradient-noise bound.
    pub sigma: f32,
    /// Largest residual norm seen so far.
    pub epsilon: f32,
    pub beta: f32,
    /// Smallest coordinate of the frozen variance.
    pub v_min: f32,
}

/// Per-worker 1-bit Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitAdamState {
    pub(crate) phase: Phase,
    pub(crate) t: u64,
    pub(crate) warmup_steps: u64,
    pub(crate) x: DenseVector,
    pub(crate) m: DenseVector,
    pub(crate) v: DenseVector,
    pub(crate) v_frozen: DenseVector,
    pub(crate) worker_error: ErrorBuffer,
    pub(crate) server_error: ErrorBuffer,
    pub(crate) theory: TheoryParams,
}

impl OneBitAdamState {
    /// Fresh state at `x0` with zero moments and residuals. With
    /// `warmup_steps == 0` the variance is frozen (at zero) immediately.
    pub fn new(x0: DenseVector, warmup_steps: u64) -> Self {
        let dim = x0.dim();
        let mut state = Self {
            phase: Phase::Warmup,
            t: 0,
            warmup_steps,
            x: x0,
            m: DenseVector::zeros(dim),
            v: DenseVector::zeros(dim),
            v_frozen: DenseVector::zeros(dim),
            worker_error: ErrorBuffer::new(dim, BufferRole::Worker),
            server_error: ErrorBuffer::new(dim, BufferRole::Server),
            theory: TheoryParams::default(),
        };
        if warmup_steps == 0 {
            state.freeze_variance().expect("t == T_w == 0");
        }
        state
    }

    /// Rebuild a state from its parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        phase: Phase,
        t: u64,
        warmup_steps: u64,
        x: DenseVector,
        m: DenseVector,
        v: DenseVector,
        v_frozen: DenseVector,
        worker_error: DenseVector,
        server_error: DenseVector,
    ) -> Result<Self> {
        let dim = x.dim();
        for other in [&m, &v, &v_frozen, &worker_error, &server_error] {
            other.check_dim(dim)?;
        }
        for vec in [&v, &v_frozen] {
            if let Some(index) = vec.as_slice().iter().position(|&e| e < 0.0) {
                return Err(Error::NegativeVariance {
                    index,
                    value: vec.as_slice()[index],
                });
            }
        }
        let warm = t < warmup_steps;
        if warm != (phase == Phase::Warmup) && !(phase == Phase::Warmup && t == warmup_steps) {
            return Err(Error::Phase {
                op: "restore",
                phase,
                step: t,
            });
        }
        let mut state = Self {
            phase,
            t,
            warmup_steps,
            x,
            m,
            v,
            v_frozen,
            worker_error: ErrorBuffer::with_delta(worker_error, BufferRole::Worker),
            server_error: ErrorBuffer::with_delta(server_error, BufferRole::Server),
            theory: TheoryParams::default(),
        };
        if phase == Phase::Compression {
            state.theory.v_min = min_coordinate(&state.v_frozen);
        }
        Ok(state)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn x(&self) -> &DenseVector {
        &self.x
    }

    pub fn m(&self) -> &DenseVector {
        &self.m
    }

    pub fn v(&self) -> &DenseVector {
        &self.v
    }

    pub fn v_frozen(&self) -> &DenseVector {
        &self.v_frozen
    }

    pub fn worker_error(&self) -> &ErrorBuffer {
        &self.worker_error
    }

    pub fn server_error(&self) -> &ErrorBuffer {
        &self.server_error
    }

    pub fn server_error_mut(&mut self) -> &mut ErrorBuffer {
        &mut self.server_error
    }

    pub fn theory(&self) -> &TheoryParams {
        &self.theory
    }

    pub fn theory_mut(&mut self) -> &mut TheoryParams {
        &mut self.theory
    }

    /// Whether the variance should be frozen before the next step.
    pub fn ready_to_freeze(&self) -> bool {
        self.phase == Phase::Warmup && self.t == self.warmup_steps
    }

    /// Denominator the next update will divide by: `v` during warmup and the
    /// frozen variance afterwards.
    pub fn denominator(&self, hyper: &AdamHyper) -> DenseVector {
        let v = match self.phase {
            Phase::Warmup => &self.v,
            Phase::Compression => &self.v_frozen,
        };
        DenseVector::from_vec_unchecked(
            v.as_slice()
                .iter()
                .map(|&vi| denominator(vi, hyper.eta, hyper.eta_mode))
                .collect(),
        )
    }

    fn require(&self, op: &'static str, phase: Phase) -> Result<()> {
        let ok = match phase {
            Phase::Warmup => self.phase == Phase::Warmup && self.t < self.warmup_steps,
            Phase::Compression => self.phase == Phase::Compression,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Phase {
                op,
                phase: self.phase,
                step: self.t,
            })
        }
    }

    /// One uncompressed Adam step on the (already averaged) gradient `g`.
    pub fn adam_step(&mut self, g: &DenseVector, hyper: &AdamHyper) -> Result<()> {
        self.require("adam_step", Phase::Warmup)?;
        g.check_dim(self.dim())?;
        self.adam_update(g.as_slice(), hyper)
    }

    fn adam_update(&mut self, g: &[f32], hyper: &AdamHyper) -> Result<()> {
        let lr = hyper.lr(self.t);
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let x = self.x.as_mut_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i]);
            x[i] -= lr * (m[i] / denominator(v[i], hyper.eta, hyper.eta_mode));
        }
        self.t += 1;
        finite_or_err(&self.x)
    }

    /// Store the variance and enter the compression phase. Legal only when
    /// exactly `warmup_steps` warmup steps have run.
    pub fn freeze_variance(&mut self) -> Result<()> {
        if !self.ready_to_freeze() {
            return Err(Error::Phase {
                op: "freeze_variance",
                phase: self.phase,
                step: self.t,
            });
        }
        self.v_frozen = self.v.clone();
        self.phase = Phase::Compression;
        self.theory.v_min = min_coordinate(&self.v_frozen);
        Ok(())
    }

    /// `b1 * m + (1 - b1) * g`, starting from the shared momentum.
    pub fn local_momentum(&self, g: &DenseVector, hyper: &AdamHyper) -> Result<DenseVector> {
        g.check_dim(self.dim())?;
        let b1 = hyper.beta1;
        Ok(DenseVector::from_vec_unchecked(
            self.m
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(&m, &g)| b1 * m + (1.0 - b1) * g)
                .collect(),
        ))
    }

    /// Worker half of a compression step: momentum update from the shared
    /// `m`, then error-compensated 1-bit compression. `m` itself is only
    /// replaced once the averaged momentum comes back in [`Self::apply_global`].
    pub fn compression_step_local(&mut self, g: &DenseVector, hyper: &AdamHyper) -> Result<CompressedTensor> {
        self.require("compression_step_local", Phase::Compression)?;
        let local = self.local_momentum(g, hyper)?;
        let lr_scale = hyper.schedule.ratio(self.t);
        let out = compress_with_error_feedback(&local, &mut self.worker_error, lr_scale)?;
        self.track_residual();
        Ok(out)
    }

    /// Adopt the globally averaged momentum and take the preconditioned step.
    pub fn apply_global(&mut self, m_bar: &CompressedTensor, hyper: &AdamHyper) -> Result<()> {
        self.require("apply_global", Phase::Compression)?;
        if m_bar.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: m_bar.dim(),
            });
        }
        self.apply_global_dense(decompress(m_bar), hyper)
    }

    /// [`Self::apply_global`] for a momentum that is already dense, e.g. the
    /// reassembled output of a chunked allreduce or an identity compressor.
    pub fn apply_global_dense(&mut self, m_bar: DenseVector, hyper: &AdamHyper) -> Result<()> {
        self.require("apply_global", Phase::Compression)?;
        m_bar.check_dim(self.dim())?;
        self.m = m_bar;
        step_preconditioned(&mut self.x, &self.m, &self.v_frozen, hyper, self.t)?;
        self.t += 1;
        Ok(())
    }

    /// Uncompressed reference for the compression phase: momentum SGD with
    /// the frozen variance as preconditioner.
    pub fn momentum_sgd_step(&mut self, g: &DenseVector, hyper: &AdamHyper) -> Result<()> {
        self.require("momentum_sgd_step", Phase::Compression)?;
        momentum_sgd_step(&mut self.x, &mut self.m, g, &self.v_frozen, hyper, self.t)?;
        self.t += 1;
        Ok(())
    }

    /// Baseline: compress the gradient with error feedback, then update both
    /// moments from the compressed gradient. The variance never freezes.
    pub fn naive_compressed_adam_step(&mut self, g: &DenseVector, hyper: &AdamHyper) -> Result<()> {
        let ct = self.naive_local(g)?;
        self.naive_apply(&decompress(&ct), hyper)
    }

    /// Worker half of the naive baseline: error-compensated gradient compression.
    pub fn naive_local(&mut self, g: &DenseVector) -> Result<CompressedTensor> {
        g.check_dim(self.dim())?;
        let out = naive_compress(g, &mut self.worker_error)?;
        self.track_residual();
        Ok(out)
    }

    /// Adam update driven by a (decompressed, averaged) compressed gradient.
    pub fn naive_apply(&mut self, g_hat: &DenseVector, hyper: &AdamHyper) -> Result<()> {
        g_hat.check_dim(self.dim())?;
        self.adam_update(g_hat.as_slice(), hyper)
    }

    fn track_residual(&mut self) {
        let norm = l2_norm(self.worker_error.delta());
        if norm > self.theory.epsilon {
            self.theory.epsilon = norm;
        }
    }
}

fn min_coordinate(v: &DenseVector) -> f32 {
    v.as_slice().iter().copied().fold(f32::INFINITY, f32::min)
}

fn finite_or_err(v: &DenseVector) -> Result<()> {
    match v.as_slice().iter().position(|e| !e.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn step_preconditioned(
    x: &mut DenseVector,
    m: &DenseVector,
    precond_v: &DenseVector,
    hyper: &AdamHyper,
    step: u64,
) -> Result<()> {
    let lr = hyper.lr(step);
    let v = precond_v.as_slice();
    for (i, (xi, &mi)) in x.as_mut_slice().iter_mut().zip(m.as_slice()).enumerate() {
        if v[i] < 0.0 {
            return Err(Error::NegativeVariance { index: i, value: v[i] });
        }
        *xi -= lr * (mi / denominator(v[i], hyper.eta, hyper.eta_mode));
    }
    finite_or_err(x)
}

/// `m = b1 m + (1 - b1) g;  x -= lr(step) * m / denom(precond_v)`.
pub fn momentum_sgd_step(
    x: &mut DenseVector,
    m: &mut DenseVector,
    g: &DenseVector,
    precond_v: &DenseVector,
    hyper: &AdamHyper,
    step: u64,
) -> Result<()> {
    let dim = x.dim();
    m.check_dim(dim)?;
    g.check_dim(dim)?;
    precond_v.check_dim(dim)?;
    let b1 = hyper.beta1;
    for (mi, &gi) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
    }
    step_preconditioned(x, m, precond_v, hyper, step)
}

/// Server-side average of worker messages followed by a second
/// error-compensated compression. `server_error` holds the carried residual
/// for exactly the coordinates the messages cover.
pub fn server_aggregate(messages: &[CompressedTensor], server_error: &mut ErrorBuffer) -> Result<CompressedTensor> {
    server_aggregate_slice(messages, server_error.as_mut_slice())
}

/// [`server_aggregate`] over a raw residual slice, used by chunk owners.
pub fn server_aggregate_slice(messages: &[CompressedTensor], server_error: &mut [f32]) -> Result<CompressedTensor> {
    let first = messages.first().ok_or(Error::NoMessages)?;
    let dim = first.dim();
    if server_error.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: server_error.len(),
        });
    }
    if let Some(bad) = messages.iter().find(|m| m.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }
    let mut acc = vec![0f64; dim];
    for msg in messages {
        let s = f64::from(msg.scale());
        for (i, a) in acc.iter_mut().enumerate() {
            *a += if msg.sign(i) { s } else { -s };
        }
    }
    let n = messages.len() as f64;
    let avg: Vec<f32> = acc.into_iter().map(|a| (a / n) as f32).collect();
    Ok(compress_feedback_slice(&avg, server_error, 1.0))
}
