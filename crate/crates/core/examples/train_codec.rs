//! Builds a small corpus, trains the codec and reports held-out reconstruction error.
//!
//! `cargo run --release --example train_codec -- [systems] [epochs] [steps_per_epoch] [lr]`

use std::time::Instant;

use iclsysid::codec::{Codec, CodecConfig};
use iclsysid::corpus::{build_records, Corpus, CorpusConfig, Split};
use iclsysid::signals::rmse;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let args: Vec<usize> = args.iter().map(|&a| a as usize).chain(std::iter::once(0)).collect::<Vec<_>>();
    let lr: f64 = std::env::args().nth(4).and_then(|a| a.parse().ok()).unwrap_or(3e-4);
    let systems = args.first().copied().unwrap_or(300);
    let epochs = args.get(1).copied().unwrap_or(4);
    let steps = args.get(2).copied().unwrap_or(50);

    let t0 = Instant::now();
    let (bytes, manifest) = build_records(&CorpusConfig { n_systems: systems, ..Default::default() }, 7)?;
    let corpus = Corpus::from_parts("memory".into(), manifest, bytes)?;
    println!("corpus: {} systems in {:.1?}", systems, t0.elapsed());

    let config = CodecConfig { epochs, steps_per_epoch: steps, learning_rate: lr, ..Default::default() };
    let t0 = Instant::now();
    let (codec, report) = Codec::train(config, &corpus, 1)?;
    println!("trained {} steps in {:.1?}", report.steps, t0.elapsed());
    for (e, (l, r)) in report.loss.iter().zip(&report.reconstruction).enumerate() {
        println!("epoch {e:3}: loss {l:.5}  reconstruction {r:.5}");
    }

    let mut errors = Vec::new();
    for rec in corpus.iterate(Split::Test, 0) {
        let rec = rec?;
        for s in [&rec.x, &rec.y] {
            errors.push(rmse(s, &codec.reconstruct(s)?)?);
        }
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    println!("held-out mean rmse over {} signals: {mean:.4}", errors.len());
    Ok(())
}
