//! One PASS/FAIL line per acceptance criterion. Lines go straight to stdout
//! so they show up without `--nocapture`.

use std::io::Write;

use onebit_lab::verify::{
    convergence_ordering, error_cancellation, identity_compressor, linear_speedup, magnitude_preservation,
    protocol_equivalence, variance_stabilization, volume_arithmetic, warmup_matches_adam_oracle, CheckReport,
};

#[test]
fn acceptance() {
    let checks: [fn() -> CheckReport; 9] = [
        error_cancellation,
        identity_compressor,
        warmup_matches_adam_oracle,
        magnitude_preservation,
        protocol_equivalence,
        linear_speedup,
        convergence_ordering,
        volume_arithmetic,
        variance_stabilization,
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for check in checks {
        let report = check();
        writeln!(out, "{}", report.line()).unwrap();
        if !report.pass {
            failed.push(report.name);
        }
    }
    out.flush().unwrap();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
