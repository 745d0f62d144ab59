//! Generate advection sequences, round-trip one through the frame codec
//! and print per-frame mass and intensity thresholds.
//!
//! cargo run --release --example synthetic_data

use dcbank::synthio::{self, decode_frames, encode_frames, intensity_thresholds, AdvectionConfig};

fn main() -> dcbank::Result<()> {
    let cfg = AdvectionConfig::default();
    let seqs = synthio::generate(&cfg, 8, 25, 32, 32)?;
    let first = &seqs[0];
    let bytes = encode_frames(first);
    let back = decode_frames(&bytes)?;
    println!("extents {:?}, {} bytes encoded, round trip exact: {}", first.extents(), bytes.len(), &back == first);

    let mass: Vec<String> = (0..first.len()).step_by(4).map(|t| format!("{:.1}", first.total_intensity(t))).collect();
    println!("total intensity every 4 frames: {}", mass.join(" "));

    let q = intensity_thresholds(&seqs, &[0.5, 0.9, 0.99]);
    println!("intensity quantiles 50/90/99%: {q:.3?}");

    // Frame 0 as a coarse character map.
    let shades = [' ', '.', ':', '+', '#'];
    for row in first.frame(0).chunks(first.width()).step_by(2) {
        let line: String = row.iter().map(|&v| shades[((v * 5.0) as usize).min(4)]).collect();
        println!("|{line}|");
    }
    Ok(())
}
