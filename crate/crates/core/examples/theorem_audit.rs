//! Check the sufficient condition for error reduction on random pairs.
//!
//! cargo run --release --example theorem_audit -- [trials] [dim]

use dcbank::{prop1_audit, AuditPairs};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let trials = args.first().copied().unwrap_or(10_000);
    let dim = args.get(1).copied().unwrap_or(64);
    for (label, pairs) in [("random", AuditPairs::Random), ("perfect", AuditPairs::Perfect), ("zero", AuditPairs::Zero)] {
        let r = prop1_audit(trials, dim, 0, pairs);
        println!(
            "{label:>8}: condition held {:>6}/{trials}  error reduced {:>6}  violations {}",
            r.condition_holds, r.error_reduced, r.violations
        );
    }
}
