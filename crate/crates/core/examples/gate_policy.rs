//! Evaluating metric thresholds and comparing two metric documents.

use ca_core::feedback::{compare_metrics, evaluate_gate, parse_metrics, GatePolicy};

fn main() -> ca_core::Result<()> {
    let policy = GatePolicy::from_json(
        r#"{"constraints": [
            {"metric": "accuracy", "op": ">=", "threshold": 0.9},
            {"metric": "latency_ms", "op": "<", "threshold": 250},
            {"metric": "calibration_error", "op": "<=", "threshold": 0.05}
        ]}"#,
    )?;

    let before = parse_metrics(br#"{"accuracy": 0.91, "latency_ms": 180, "calibration_error": 0.04}"#)?;
    let after = parse_metrics(br#"{"accuracy": 0.88, "latency_ms": 140}"#)?;

    for (name, metrics) in [("before", &before), ("after", &after)] {
        let report = evaluate_gate(metrics, &policy);
        println!("{name}: gate {}", if report.pass { "passes" } else { "fails" });
        for r in report.results {
            let observed = r.observed.map_or("missing".to_string(), |v| v.to_string());
            println!("  {:<18} {} {:<6} observed {:<8} {}", r.metric, r.op, r.threshold, observed, if r.satisfied { "ok" } else { "FAIL" });
        }
    }

    let (deltas, only_before, only_after) = compare_metrics(&before, &after);
    for d in deltas {
        println!("delta {:<12} {:+.3}", d.metric, d.delta);
    }
    println!("only before: {only_before:?}");
    println!("only after:  {only_after:?}");
    Ok(())
}
