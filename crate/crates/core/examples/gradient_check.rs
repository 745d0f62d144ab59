//! Finite-difference check of every trainable matrix through a short
//! corrected rollout.
//!
//! cargo run --release --example gradient_check -- [config.json]

use dcbank::cli::RunConfig;

fn main() -> dcbank::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig {
            height: 16,
            width: 16,
            d_model: 8,
            memory_capacity: Some(4),
            t_in: 2,
            t_out: 4,
            ..RunConfig::default()
        },
    };
    let report = dcbank::cli::gradcheck(&cfg)?;
    for e in &report.entries {
        println!("{:<22} {:>4} coords  max rel err {:.3e}", e.name, e.coords, e.max_rel_err);
    }
    println!(
        "overall {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_err(),
        report.tolerance,
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
