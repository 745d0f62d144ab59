//! Score persistence forecasts (last input frame repeated) on synthetic
//! data with CSI, HSS, SSIM, MAE and MSE per lead time.
//!
//! cargo run --release --example score_forecasts

use dcbank::metrics::{score_forecasts, SEVIR_THRESHOLDS};
use dcbank::{synthio, FrameSequence};

fn main() -> dcbank::Result<()> {
    let seqs = synthio::generate(&Default::default(), 20, 15, 32, 32)?;
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for s in &seqs {
        let last = s.frame(4).to_vec();
        let values: Vec<f64> = (0..10).flat_map(|_| last.iter().copied()).collect();
        preds.push(FrameSequence::new(10, 32, 32, values)?);
        targets.push(s.slice(5, 10)?);
    }
    let thresholds: Vec<f64> = SEVIR_THRESHOLDS.iter().map(|t| t / 255.0).collect();
    let scores = score_forecasts(&preds, &targets, &thresholds)?;
    println!("lead   csi_m     hss     ssim     mae      mse");
    for (i, s) in scores.per_lead.iter().enumerate() {
        println!("{:>4}  {:.4}  {:.4}  {:.4}  {:.5}  {:.6}", i + 1, s.csi_m, s.hss, s.ssim, s.mae, s.mse);
    }
    let o = &scores.overall;
    println!(" all  {:.4}  {:.4}  {:.4}  {:.5}  {:.6}", o.csi_m, o.hss, o.ssim, o.mae, o.mse);
    Ok(())
}
