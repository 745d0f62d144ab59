//! Run an untrained corrected model and print what the memory bank does at
//! each step: which entries were read, gate mean, retrieval weights.
//!
//! cargo run --release --example rollout_trace

use dcbank::{synthio, FrameGeometry, Mode, Model, ModelConfig};

fn main() -> dcbank::Result<()> {
    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg, FrameGeometry { height: 32, width: 32 }, 0)?;
    model.params.randomize(1);
    let seq = synthio::generate(&Default::default(), 1, 15, 32, 32)?.remove(0);
    let x = seq.slice(0, 5)?;

    let (_, corrected) = model.forecast_mode(&x, 10, Mode::Corrected)?;
    let (_, bypass) = model.forecast_mode(&x, 10, Mode::Bypass)?;
    for (c, b) in corrected.steps.iter().zip(&bypass.steps) {
        let newest: Vec<usize> = corrected
            .access_log
            .iter()
            .filter(|a| a.step == c.step)
            .flat_map(|a| a.read.iter().copied())
            .collect();
        let gap = c.posterior.sub(&b.posterior)?.norm_sq().sqrt();
        let d = &c.diagnostics;
        let weights = d.retrieval.as_ref().map(|r| format!("{:.2?}", r.weights)).unwrap_or_default();
        println!(
            "step {:>2}  newest read {:<4} bypassed {:<5} gate {:<6} |Δ vs bypass| {:.3e}  w {}",
            c.step,
            newest.iter().max().map_or("-".into(), |r| r.to_string()),
            d.bypassed,
            d.gate_mean.map_or("-".into(), |g| format!("{g:.3}")),
            gap,
            weights
        );
    }
    Ok(())
}
