//! Generates each excitation family and prints its summary statistics.
//!
//! `cargo run --release --example excitation_signals -- [length] [seed]`

use iclsysid::rng::prng;
use iclsysid::signals::{generate, KindTag, SignalKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let length: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2048);
    let seed: u64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut rng = prng(seed);
    for tag in KindTag::ALL {
        let kind = SignalKind::sample(tag, length, &mut rng);
        let s = generate(&kind, length, seed)?.normalize();
        let mean = s.samples().iter().sum::<f64>() / length as f64;
        let rms = (s.samples().iter().map(|v| v * v).sum::<f64>() / length as f64).sqrt();
        let crossings = s.samples().windows(2).filter(|w| w[0] * w[1] < 0.0).count();
        println!("{:<14} scale {:>8.4}  mean {mean:>7.4}  rms {rms:.4}  zero crossings {crossings}", tag.name(), s.scale());
    }
    Ok(())
}
