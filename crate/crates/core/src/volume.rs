//! Bytes-on-wire ledger and the compression-ratio arithmetic built on it.
//!
//! Two views are kept per message. Wire bytes are the exact encoded length of
//! every message a worker sends or receives. Payload bits count only the
//! tensor elements: one bit per sign for compressed messages, and 32 or 16
//! bits per element for raw messages depending on the accounting mode (the
//! raw wire format itself is always f32).

pub use num_rational::Ratio;

use crate::optimizer::Phase;
use crate::wire::WireMessage;

/// Element width charged for uncompressed payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FpAccounting {
    #[default]
    Fp32,
    Fp16,
}

impl FpAccounting {
    pub fn bits(self) -> u64 {
        match self {
            FpAccounting::Fp32 => 32,
            FpAccounting::Fp16 => 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_bits_sent: u64,
    pub messages_sent: u64,
    pub steps: u64,
}

/// Per-worker traffic counters, split by optimizer phase. All counters only
/// ever increase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeMeter {
    worker: usize,
    accounting: FpAccounting,
    warmup: PhaseCounters,
    compression: PhaseCounters,
    step_bytes_sent: u64,
}

impl VolumeMeter {
    pub fn new(worker: usize, accounting: FpAccounting) -> Self {
        Self {
            worker,
            accounting,
            warmup: PhaseCounters::default(),
            compression: PhaseCounters::default(),
            step_bytes_sent: 0,
        }
    }

    /// Rebuild a meter from counters reported by another process.
    pub fn from_counters(worker: usize, accounting: FpAccounting, warmup: PhaseCounters, compression: PhaseCounters) -> Self {
        Self {
            worker,
            accounting,
            warmup,
            compression,
            step_bytes_sent: 0,
        }
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn accounting(&self) -> FpAccounting {
        self.accounting
    }

    pub fn phase(&self, phase: Phase) -> &PhaseCounters {
        match phase {
            Phase::Warmup => &self.warmup,
            Phase::Compression => &self.compression,
        }
    }

    fn phase_mut(&mut self, phase: Phase) -> &mut PhaseCounters {
        match phase {
            Phase::Warmup => &mut self.warmup,
            Phase::Compression => &mut self.compression,
        }
    }

    pub fn payload_bits(&self, msg: &WireMessage) -> u64 {
        match msg {
            WireMessage::Gather(t) | WireMessage::Scatter(t) => t.dim() as u64,
            WireMessage::FpRaw(v) => v.dim() as u64 * self.accounting.bits(),
        }
    }

    pub fn record_sent(&mut self, phase: Phase, msg: &WireMessage) {
        let bits = self.payload_bits(msg);
        let bytes = msg.encoded_len() as u64;
        let c = self.phase_mut(phase);
        c.bytes_sent += bytes;
        c.payload_bits_sent += bits;
        c.messages_sent += 1;
        self.step_bytes_sent += bytes;
    }

    pub fn record_received(&mut self, phase: Phase, msg: &WireMessage) {
        self.phase_mut(phase).bytes_received += msg.encoded_len() as u64;
    }

    /// Close a step; returns the wire bytes this worker sent during it.
    pub fn end_step(&mut self, phase: Phase) -> u64 {
        self.phase_mut(phase).steps += 1;
        core::mem::take(&mut self.step_bytes_sent)
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.warmup.bytes_sent + self.compression.bytes_sent
    }
}

fn summed(meters: &[VolumeMeter], phase: Phase) -> PhaseCounters {
    meters.iter().fold(PhaseCounters::default(), |mut acc, m| {
        let c = m.phase(phase);
        acc.bytes_sent += c.bytes_sent;
        acc.bytes_received += c.bytes_received;
        acc.payload_bits_sent += c.payload_bits_sent;
        acc.messages_sent += c.messages_sent;
        acc.steps = acc.steps.max(c.steps);
        acc
    })
}

/// `1 - compressed / full`, the fraction of traffic removed.
pub fn reduction(ratio: Ratio<u64>) -> f64 {
    1.0 - *ratio.denom() as f64 / *ratio.numer() as f64
}

/// End-to-end volume reduction of a run that spends `warmup_fraction` of
/// its steps uncompressed and the rest at `stage_ratio`:
/// `1 / (w + (1 - w) / r)`, kept exact.
pub fn end_to_end_ratio(warmup_fraction: Ratio<u64>, stage_ratio: Ratio<u64>) -> Ratio<u64> {
    let one = Ratio::from_integer(1u64);
    one / (warmup_fraction + (one - warmup_fraction) / stage_ratio)
}

/// Ratio of uncompressed to 1-bit payload for one element.
pub fn payload_ratio(accounting: FpAccounting) -> Ratio<u64> {
    Ratio::from_integer(accounting.bits())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub accounting: FpAccounting,
    /// Measured payload bits per warmup step over payload bits per
    /// compression step.
    pub payload_ratio: Option<Ratio<u64>>,
    /// Same with every wire byte counted (headers, scales, bitmap padding).
    pub wire_ratio: Option<f64>,
    pub payload_reduction: Option<f64>,
    pub warmup_fraction: Ratio<u64>,
    /// `1 / (w + (1 - w) / r)` with the measured payload ratio `r`.
    pub end_to_end: Option<Ratio<u64>>,
    pub warmup_bytes_per_step: Option<Ratio<u64>>,
    pub compression_bytes_per_step: Option<Ratio<u64>>,
}

/// Summarize a finished run from every worker's meter. Ratios are `None`
/// when a phase never ran.
pub fn volume_report(meters: &[VolumeMeter], warmup_steps: u64, total_steps: u64) -> VolumeReport {
    let accounting = meters.first().map(|m| m.accounting).unwrap_or_default();
    let warm = summed(meters, Phase::Warmup);
    let comp = summed(meters, Phase::Compression);
    let per_step = |num: u64, steps: u64| (steps > 0).then(|| Ratio::new(num, steps));

    let warm_bits = per_step(warm.payload_bits_sent, warm.steps);
    let comp_bits = per_step(comp.payload_bits_sent, comp.steps);
    let warm_bytes = per_step(warm.bytes_sent, warm.steps);
    let comp_bytes = per_step(comp.bytes_sent, comp.steps);

    let payload_ratio = match (warm_bits, comp_bits) {
        (Some(w), Some(c)) if *c.numer() > 0 => Some(w / c),
        _ => None,
    };
    let wire_ratio = match (warm_bytes, comp_bytes) {
        (Some(w), Some(c)) if *c.numer() > 0 => {
            let r = w / c;
            Some(*r.numer() as f64 / *r.denom() as f64)
        }
        _ => None,
    };
    let warmup_fraction = Ratio::new(warmup_steps.min(total_steps), total_steps.max(1));
    VolumeReport {
        accounting,
        payload_ratio,
        wire_ratio,
        payload_reduction: payload_ratio.map(reduction),
        warmup_fraction,
        end_to_end: payload_ratio.map(|r| end_to_end_ratio(warmup_fraction, r)),
        warmup_bytes_per_step: warm_bytes,
        compression_bytes_per_step: comp_bytes,
    }
}

/// Static volume table: per-element payload reduction for both accounting
/// modes and the end-to-end fp16 ratio for a given warmup split.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTable {
    pub fp32_reduction: f64,
    pub fp16_reduction: f64,
    pub warmup_fraction: Ratio<u64>,
    pub end_to_end_fp16: Ratio<u64>,
}

pub fn volume_table(warmup_steps: u64, total_steps: u64) -> VolumeTable {
    let w = Ratio::new(warmup_steps, total_steps);
    VolumeTable {
        fp32_reduction: reduction(payload_ratio(FpAccounting::Fp32)),
        fp16_reduction: reduction(payload_ratio(FpAccounting::Fp16)),
        warmup_fraction: w,
        end_to_end_fp16: end_to_end_ratio(w, payload_ratio(FpAccounting::Fp16)),
    }
}

/// Exact ratio as f64, for display.
pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::CompressedTensor;
    use crate::numerics::DenseVector;

    #[test]
    fn per_element_reductions() {
        assert_eq!(reduction(payload_ratio(FpAccounting::Fp32)), 0.96875);
        assert_eq!(reduction(payload_ratio(FpAccounting::Fp16)), 0.9375);
    }

    #[test]
    fn end_to_end_for_reference_split() {
        let t = volume_table(16_000, 118_000);
        assert_eq!(t.end_to_end_fp16, Ratio::new(944, 179));
        assert!((ratio_f64(t.end_to_end_fp16) - 5.273_743).abs() < 1e-6);
        assert_eq!(end_to_end_ratio(Ratio::from_integer(0), Ratio::from_integer(16)), Ratio::from_integer(16));
        assert_eq!(end_to_end_ratio(Ratio::from_integer(1), Ratio::from_integer(16)), Ratio::from_integer(1));
    }

    #[test]
    fn meter_counts_payload_and_bytes() {
        let mut m = VolumeMeter::new(0, FpAccounting::Fp32);
        let raw = WireMessage::FpRaw(DenseVector::zeros(100));
        let bits = WireMessage::Gather(CompressedTensor::from_signs(&[true; 100], 1.0).unwrap());
        m.record_sent(Phase::Warmup, &raw);
        assert_eq!(m.end_step(Phase::Warmup), 405);
        m.record_sent(Phase::Compression, &bits);
        m.record_received(Phase::Compression, &bits);
        assert_eq!(m.end_step(Phase::Compression), 22);
        let r = volume_report(&[m.clone()], 1, 2);
        assert_eq!(r.payload_ratio, Some(Ratio::from_integer(32)));
        assert_eq!(r.payload_reduction, Some(0.96875));
        assert!((r.wire_ratio.unwrap() - 405.0 / 22.0).abs() < 1e-12);
        assert_eq!(m.phase(Phase::Compression).bytes_received, 22);

        let mut half = VolumeMeter::new(1, FpAccounting::Fp16);
        half.record_sent(Phase::Warmup, &raw);
        half.end_step(Phase::Warmup);
        half.record_sent(Phase::Compression, &bits);
        half.end_step(Phase::Compression);
        assert_eq!(volume_report(&[half], 1, 2).payload_ratio, Some(Ratio::from_integer(16)));
    }

    #[test]
    fn report_without_compression_phase() {
        let mut m = VolumeMeter::new(0, FpAccounting::Fp32);
        m.record_sent(Phase::Warmup, &WireMessage::FpRaw(DenseVector::zeros(4)));
        m.end_step(Phase::Warmup);
        let r = volume_report(&[m], 1, 1);
        assert_eq!(r.payload_ratio, None);
        assert_eq!(r.end_to_end, None);
    }
}
