//! Diagnostics computed alongside training: the variance of the worker-averaged
//! gradient as a function of worker count, and the step at which the second
//! moment stops moving.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, SeededRng};
use crate::problem::Problem;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub workers: usize,
    /// `E || (1/n) sum_i g_i - (1/n) sum_i grad f_i ||^2`, estimated.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
    /// Least-squares slope of `ln variance` against `ln n`; `None` when any
    /// variance is zero.
    pub slope: Option<f64>,
}

/// Estimate the total variance of the gradient averaged over workers
/// `0..n` for each `n` in `worker_counts`, `trials` draws each.
pub fn speedup_probe(
    problem: &Problem,
    x: &DenseVector,
    worker_counts: &[usize],
    trials: usize,
    rng: &mut SeededRng,
) -> Result<SpeedupTable> {
    if trials == 0 {
        return Err(Error::Hyper("trials must be positive"));
    }
    let mut rows = Vec::with_capacity(worker_counts.len());
    for &n in worker_counts {
        if n == 0 || n > problem.workers() {
            return Err(Error::Topology("worker count outside problem topology"));
        }
        let exact: Vec<DenseVector> = (0..n).map(|w| problem.exact_gradient(w, x)).collect::<Result<_>>()?;
        let dim = x.dim();
        let mut target = alloc::vec![0f64; dim];
        for g in &exact {
            target.iter_mut().zip(g.as_slice()).for_each(|(t, &v)| *t += f64::from(v));
        }
        target.iter_mut().for_each(|t| *t /= n as f64);

        let mut total = 0f64;
        let mut avg = alloc::vec![0f64; dim];
        for _ in 0..trials {
            avg.iter_mut().for_each(|a| *a = 0.0);
            for w in 0..n {
                let g = problem.sample_gradient(w, x, rng)?;
                avg.iter_mut().zip(g.as_slice()).for_each(|(a, &v)| *a += f64::from(v));
            }
            total += avg
                .iter()
                .zip(&target)
                .map(|(a, t)| {
                    let e = a / n as f64 - t;
                    e * e
                })
                .sum::<f64>();
        }
        rows.push(SpeedupRow {
            workers: n,
            variance: total / trials as f64,
        });
    }
    let slope = log_log_slope(&rows);
    Ok(SpeedupTable { rows, slope })
}

fn log_log_slope(rows: &[SpeedupRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.variance > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (libm::log(r.workers as f64), libm::log(r.variance)))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub const DEFAULT_STABILITY_THRESHOLD: f64 = 0.01;

/// Trailing window used when none is given: 5% of the trace, at least one step.
pub fn default_stability_window(steps: usize) -> usize {
    (steps / 20).max(1)
}

/// First step `s` such that `|v_{t+1} - v_t| / v_t < threshold` for every
/// `t` in `s..s + window`. `v_norms[t]` is `||v||` after step `t`. `None`
/// means no such run of stable steps exists.
pub fn variance_stability_trace(v_norms: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    if v_norms.len() < window + 1 {
        return None;
    }
    let mut run = 0usize;
    for t in 0..v_norms.len() - 1 {
        let (prev, next) = (v_norms[t], v_norms[t + 1]);
        if prev > 0.0 && libm::fabs(next - prev) / prev < threshold {
            run += 1;
            if run == window {
                return Some(t + 1 - window);
            }
        } else {
            run = 0;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ProblemKind, ProblemSpec};
    use alloc::vec;

    fn quad(sigma: f32, workers: usize) -> Problem {
        Problem::new(ProblemSpec {
            kind: ProblemKind::Quadratic,
            dim: 16,
            workers,
            sigma,
            seed: 3,
            ..ProblemSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_probe_has_zero_variance() {
        let p = quad(0.0, 8);
        let t = speedup_probe(&p, &DenseVector::zeros(16), &[1, 2, 4, 8], 20, &mut SeededRng::new(1)).unwrap();
        assert!(t.rows.iter().all(|r| r.variance == 0.0));
        assert_eq!(t.slope, None);
    }

    #[test]
    fn variance_shrinks_as_one_over_n() {
        let sigma = 1.5f32;
        let p = quad(sigma, 8);
        let t = speedup_probe(&p, &DenseVector::zeros(16), &[1, 2, 4, 8], 10_000, &mut SeededRng::new(2)).unwrap();
        let s2 = f64::from(sigma * sigma);
        assert!((t.rows[0].variance / s2 - 1.0).abs() < 0.2);
        let slope = t.slope.unwrap();
        assert!((slope + 1.0).abs() < 0.2, "{slope}");
    }

    #[test]
    fn probe_rejects_bad_counts() {
        let p = quad(1.0, 2);
        assert!(speedup_probe(&p, &DenseVector::zeros(16), &[4], 10, &mut SeededRng::new(0)).is_err());
        assert!(speedup_probe(&p, &DenseVector::zeros(16), &[1], 0, &mut SeededRng::new(0)).is_err());
    }

    /// `||v||` for Adam's second moment under a constant gradient `g`:
    /// `v_t = (1 - b2^t) g^2`.
    fn constant_gradient_trace(steps: usize) -> Vec<f64> {
        let b2: f64 = 0.999;
        (1..=steps).map(|t| 1.0 - libm::pow(b2, t as f64)).collect()
    }

    #[test]
    fn constant_gradient_stabilizes() {
        let trace = constant_gradient_trace(2000);
        let s = variance_stability_trace(&trace, 0.01, 100).unwrap();
        // relative change b2^t (1 - b2) / (1 - b2^t) is roughly 1/t early on,
        // so it drops below 1% near t = 100
        assert!((90..=110).contains(&s), "{s}");
    }

    #[test]
    fn unstable_trace_is_not_reached() {
        let trace: Vec<f64> = (0..100).map(|t| if t % 2 == 0 { 1.0 } else { 2.0 }).collect();
        assert_eq!(variance_stability_trace(&trace, 0.01, 5), None);
        assert_eq!(variance_stability_trace(&[1.0], 0.01, 1), None);
        // stable tail shorter than the window
        let mut short = vec![1.0, 2.0, 4.0];
        short.extend(core::iter::repeat_n(4.0, 3));
        assert_eq!(variance_stability_trace(&short, 0.01, 5), None);
        assert_eq!(variance_stability_trace(&short, 0.01, 3), Some(2));
    }

    #[test]
    fn isolated_late_spike_does_not_reset_detection() {
        let mut trace = vec![1.0, 2.0];
        trace.extend(core::iter::repeat_n(2.0, 50));
        trace.push(3.0);
        trace.extend(core::iter::repeat_n(3.0, 10));
        assert_eq!(variance_stability_trace(&trace, 0.01, 20), Some(1));
        assert_eq!(variance_stability_trace(&trace, 0.01, 60), None);
    }

    #[test]
    fn white_noise_stabilizes_early() {
        // E v_t = (1 - b2^t) s^2 under i.i.d. noise of scale s; use the
        // sample path of a seeded run.
        use rand::Rng;
        let mut rng = SeededRng::new(11);
        let b2 = 0.999f64;
        let mut v = vec![0f64; 64];
        let trace: Vec<f64> = (0..4000)
            .map(|_| {
                for vk in &mut v {
                    let g: f64 = rng.random_range(-1.0..1.0);
                    *vk = b2 * *vk + (1.0 - b2) * g * g;
                }
                libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
            })
            .collect();
        let s = variance_stability_trace(&trace, 0.01, default_stability_window(trace.len())).unwrap();
        assert!(s < 400, "{s}");
    }
}
