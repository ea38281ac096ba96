//! Run configuration: TOML on disk, overridable from the command line,
//! echoed verbatim (as JSON) into every run summary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use onebit_core::{AdamHyper, EtaMode, FpAccounting, LrSchedule, ProblemKind, ProblemSpec};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    OnebitAdam,
    OnebitAdamIdentityCompressor,
    NaiveCompressedAdam,
    MomentumSgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::OnebitAdam => "onebit_adam",
            OptimizerKind::OnebitAdamIdentityCompressor => "onebit_adam_identity_compressor",
            OptimizerKind::NaiveCompressedAdam => "naive_compressed_adam",
            OptimizerKind::MomentumSgd => "momentum_sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKindConfig {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaModeConfig {
    Inside,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingConfig {
    Fp32,
    Fp16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKindConfig,
    pub dim: usize,
    pub samples_per_worker: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub hidden: usize,
    pub margin: f64,
    pub l2: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKindConfig::Logistic,
            dim: 50,
            samples_per_worker: 256,
            batch_size: 16,
            sigma: 0.0,
            hidden: 16,
            margin: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant,
    /// Linear ramp to `lr` over `ramp_steps`, then multiply by `factor`
    /// every `interval` steps.
    WarmupDecay { ramp_steps: u64, interval: u64, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub lr: f64,
    pub schedule: ScheduleConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub eta_mode: EtaModeConfig,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: ScheduleConfig::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eta: 1e-8,
            eta_mode: EtaModeConfig::Inside,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub fp_accounting: AccountingConfig,
    /// Keep every iterate in the run record (memory heavy).
    pub trajectory: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fp_accounting: AccountingConfig::Fp32,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerKind,
    pub workers: usize,
    pub transport: TransportKind,
    /// `host:port` per rank for TCP runs; empty picks free localhost ports.
    pub peers: Vec<String>,
    pub seed: u64,
    pub steps: u64,
    /// Defaults to 10% of `steps`.
    pub warmup_steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub hyper: HyperConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::OnebitAdam,
            workers: 1,
            transport: TransportKind::Inproc,
            peers: Vec::new(),
            seed: 0,
            steps: 2000,
            warmup_steps: None,
            out: None,
            problem: ProblemConfig::default(),
            hyper: HyperConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Command-line values that replace config-file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub optimizer: Option<OptimizerKind>,
    pub workers: Option<usize>,
    pub transport: Option<TransportKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<u64>,
    pub warmup_steps: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fails only for integers TOML cannot hold (above `i64::MAX`).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(format!("config not representable as TOML: {e}")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always representable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.optimizer {
            self.optimizer = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = o.transport {
            self.transport = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.warmup_steps {
            self.warmup_steps = Some(v);
        }
    }

    pub fn resolved_warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 10)
    }

    /// Warmup length handed to the optimizer state: the whole run for plain
    /// Adam, never for the naive baseline.
    pub fn effective_warmup(&self) -> u64 {
        match self.optimizer {
            OptimizerKind::Adam => self.steps,
            OptimizerKind::NaiveCompressedAdam => u64::MAX,
            _ => self.resolved_warmup(),
        }
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        let p = &self.problem;
        ProblemSpec {
            kind: match p.kind {
                ProblemKindConfig::Quadratic => ProblemKind::Quadratic,
                ProblemKindConfig::Logistic => ProblemKind::Logistic,
                ProblemKindConfig::Mlp => ProblemKind::Mlp,
            },
            dim: p.dim,
            workers: self.workers,
            samples_per_worker: p.samples_per_worker,
            batch_size: p.batch_size,
            sigma: p.sigma as f32,
            hidden: p.hidden,
            margin: p.margin as f32,
            l2: p.l2 as f32,
            seed: self.seed,
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        let h = &self.hyper;
        let lr = h.lr as f32;
        AdamHyper {
            schedule: match h.schedule {
                ScheduleConfig::Constant => LrSchedule::Constant(lr),
                ScheduleConfig::WarmupDecay {
                    ramp_steps,
                    interval,
                    factor,
                } => LrSchedule::WarmupDecay {
                    peak: lr,
                    warmup: ramp_steps,
                    interval,
                    factor: factor as f32,
                },
            },
            beta1: h.beta1 as f32,
            beta2: h.beta2 as f32,
            eta: h.eta as f32,
            eta_mode: match h.eta_mode {
                EtaModeConfig::Inside => EtaMode::Inside,
                EtaModeConfig::Outside => EtaMode::Outside,
            },
        }
    }

    pub fn accounting(&self) -> FpAccounting {
        match self.metrics.fp_accounting {
            AccountingConfig::Fp32 => FpAccounting::Fp32,
            AccountingConfig::Fp16 => FpAccounting::Fp16,
        }
    }

    pub fn peer_addrs(&self) -> Result<Vec<SocketAddr>> {
        self.peers
            .iter()
            .map(|p| {
                p.parse()
                    .map_err(|_| LabError::Config(format!("peer address {p:?} is not host:port")))
            })
            .collect()
    }

    /// Check everything up front and report every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        if self.workers == 0 {
            errs.push("workers must be at least 1".into());
        }
        if self.steps == 0 {
            errs.push("steps must be at least 1".into());
        }
        if let Some(w) = self.warmup_steps {
            if w > self.steps {
                errs.push(format!("warmup_steps ({w}) exceeds steps ({})", self.steps));
            }
        }
        if !self.peers.is_empty() {
            if self.peers.len() != self.workers {
                errs.push(format!("{} peers listed for {} workers", self.peers.len(), self.workers));
            }
            if let Err(LabError::Config(e)) = self.peer_addrs() {
                errs.push(e);
            }
            if self.transport == TransportKind::Inproc {
                errs.push("peers are only meaningful with transport = \"tcp\"".into());
            }
        }
        let h = &self.hyper;
        for (name, v) in [("lr", h.lr), ("beta1", h.beta1), ("beta2", h.beta2), ("eta", h.eta)] {
            if !v.is_finite() {
                errs.push(format!("hyper.{name} must be finite"));
            }
        }
        if let Err(e) = self.adam_hyper().validate() {
            errs.push(format!("hyper: {e}"));
        }
        if let ScheduleConfig::WarmupDecay { interval: 0, .. } = h.schedule {
            errs.push("hyper.schedule.interval must be positive".into());
        }
        // the multi-process launcher hands workers a TOML copy
        let (ramp, interval) = match h.schedule {
            ScheduleConfig::WarmupDecay { ramp_steps, interval, .. } => (Some(ramp_steps), Some(interval)),
            ScheduleConfig::Constant => (None, None),
        };
        let wide = [
            ("seed", Some(self.seed)),
            ("steps", Some(self.steps)),
            ("warmup_steps", self.warmup_steps),
            ("hyper.schedule.ramp_steps", ramp),
            ("hyper.schedule.interval", interval),
        ];
        for (name, v) in wide {
            if v.is_some_and(|v| v > i64::MAX as u64) {
                errs.push(format!("{name} above {} cannot be written to TOML", i64::MAX));
            }
        }
        let p = &self.problem;
        if p.kind != ProblemKindConfig::Mlp && !(1..=4096).contains(&p.dim) {
            errs.push(format!("problem.dim {} outside 1..=4096", p.dim));
        }
        if p.kind == ProblemKindConfig::Quadratic && p.dim > 512 {
            errs.push("quadratic problems store dim x dim per worker; keep dim <= 512".into());
        }
        if self.workers > 0 {
            if let Err(e) = self.problem_spec().validate() {
                errs.push(format!("problem: {e}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("\n")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let c = RunConfig::from_toml("optimizer = \"adam\"\nworkers = 4\n").unwrap();
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.workers, 4);
        assert_eq!(c.hyper, HyperConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("optimiser = \"adam\"").is_err());
        assert!(RunConfig::from_toml("[hyper]\nlearning_rate = 0.1").is_err());
    }

    #[test]
    fn errors_are_aggregated() {
        let mut c = RunConfig {
            workers: 0,
            steps: 0,
            ..RunConfig::default()
        };
        c.hyper.beta1 = 1.5;
        let LabError::Config(msg) = c.validate().unwrap_err() else {
            panic!("expected config error")
        };
        assert!(msg.lines().count() >= 3, "{msg}");
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            workers: Some(3),
            seed: Some(9),
            ..Overrides::default()
        });
        assert_eq!((c.workers, c.seed), (3, 9));
    }

    #[test]
    fn nested_schedule_parses() {
        let c = RunConfig::from_toml(
            "[hyper]\nlr = 0.01\nschedule = { kind = \"warmup_decay\", ramp_steps = 10, interval = 5, factor = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(c.adam_hyper().lr(10), 0.01);
        assert_eq!(c.adam_hyper().lr(15), 0.005);
    }

    #[test]
    fn toml_and_json_round_trip() {
        let mut c = RunConfig {
            optimizer: OptimizerKind::NaiveCompressedAdam,
            warmup_steps: Some(7),
            out: Some("out/dir".into()),
            peers: vec!["127.0.0.1:4000".into()],
            transport: TransportKind::Tcp,
            ..RunConfig::default()
        };
        c.hyper.lr = 0.1 + 0.2;
        c.problem.sigma = 1.0 / 3.0;
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
