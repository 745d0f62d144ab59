//! Train corrected, bypass and passive models on the synthetic task with
//! matched budgets and compare test MSE over the last five lead times.
//!
//! cargo run --release --example ablation -- [config.json] [seeds]

use std::time::Instant;

use dcbank::cli::{forecast_test_set, RunConfig};
use dcbank::metrics::mse_per_lead;
use dcbank::train::fit;
use dcbank::{Dataset, Mode, Model};

fn main() -> dcbank::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first() {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("seed count"));

    let ds = Dataset::synthesize(
        &base.generator,
        [base.n_train, base.n_val, base.n_test],
        base.t_in + base.t_out,
        base.height,
        base.width,
    )?;
    let start = Instant::now();
    for seed in 0..seeds {
        let mut line = format!("seed {seed}:");
        for mode in [Mode::Corrected, Mode::Bypass, Mode::Passive] {
            let cfg = RunConfig { mode, seed, ..base.clone() };
            let mut model = Model::new(cfg.model_config(), cfg.geometry(), seed)?;
            let log = fit(&mut model, &ds.train, &ds.val, &cfg.train_config())?;
            let (preds, _) = forecast_test_set(&model, &cfg, &ds.test)?;
            let mut late = 0.0;
            for (p, seq) in preds.iter().zip(&ds.test) {
                let (_, y) = cfg.split(seq)?;
                let per = mse_per_lead(p, &y)?.per_lead;
                late += per[per.len() - 5..].iter().sum::<f64>() / 5.0;
            }
            late /= preds.len() as f64;
            let last = log.epochs.last().expect("at least one epoch");
            line += &format!("  {mode}: late {late:.5} (val {:.5})", last.val_mse);
        }
        println!("{line}   [{:.0}s]", start.elapsed().as_secs_f64());
    }
    Ok(())
}
