//! The full command pipeline on a small budget: generate, train, evaluate
//! and the per-step theorem audit, all under a scratch directory.
//!
//! cargo run --release --example pipeline -- [out_dir]

use std::path::PathBuf;

use dcbank::cli::{self, RunConfig};

fn main() -> dcbank::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dcbank-pipeline"));
    let cfg = RunConfig {
        height: 16,
        width: 16,
        t_in: 3,
        t_out: 8,
        d_model: 16,
        n_train: 32,
        n_val: 4,
        n_test: 8,
        epochs: 5,
        ..RunConfig::default()
    };
    let data = root.join("data");
    let run = root.join("run");
    cli::generate(&cfg, &data)?;
    cli::train(&cfg, &data, &run)?;
    let summary = cli::evaluate(&run.join("checkpoint.json"), &data, &run)?;
    let o = &summary.scores.overall;
    println!("{}: csi_m {:.4}  hss {:.4}  ssim {:.4}  mse {:.6}", summary.run_id, o.csi_m, o.hss, o.ssim, o.mse);
    for row in cli::prop1_rollout(&run.join("checkpoint.json"), &data, &run)? {
        println!(
            "step {:>2}: condition {:.2}  reduced {:.2}  violations {}",
            row.step, row.condition_rate, row.reduced_rate, row.violations
        );
    }
    println!("outputs in {}", run.display());
    Ok(())
}
