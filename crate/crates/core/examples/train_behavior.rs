//! Trains the behavior model on a frozen codec and compares one-shot
//! prediction against the identity and copy-prompt baselines.
//!
//! `cargo run --release --example train_behavior -- [epochs] [steps_per_epoch] [model_dim] [layers] [lr]`
//!
//! A codec checkpoint is cached at `$TMPDIR/iclsysid_example_codec.bin`.

use std::time::Instant;

use iclsysid::behavior::{BehaviorConfig, BehaviorModel};
use iclsysid::codec::{Codec, CodecConfig};
use iclsysid::corpus::{build_records, Corpus, CorpusConfig, Split};
use iclsysid::signals::rmse;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arg = |i: usize, default: f64| std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default);
    let epochs = arg(1, 5.0) as usize;
    let steps = arg(2, 50.0) as usize;
    let model_dim = arg(3, 128.0) as usize;
    let layers = arg(4, 2.0) as usize;
    let lr = arg(5, 3e-4);

    let (bytes, manifest) = build_records(&CorpusConfig::default(), 7)?;
    let corpus = Corpus::from_parts("memory".into(), manifest, bytes)?;

    let cache = std::env::temp_dir().join("iclsysid_example_codec.bin");
    let codec = match Codec::load(&cache) {
        Ok(c) => c,
        Err(_) => {
            let t0 = Instant::now();
            let config = CodecConfig { epochs: 20, steps_per_epoch: 100, learning_rate: 1e-3, ..Default::default() };
            let (codec, _) = Codec::train(config, &corpus, 1)?;
            codec.save(&cache)?;
            println!("codec trained in {:.1?}", t0.elapsed());
            codec
        }
    };

    let config = BehaviorConfig {
        model_dim,
        layers_embed: layers,
        layers_predict: layers,
        epochs,
        steps_per_epoch: steps,
        learning_rate: lr,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (model, report) = BehaviorModel::train(config, &corpus, &codec, 3)?;
    println!("trained {} steps in {:.1?}", report.steps, t0.elapsed());
    println!("initial validation rmse {:.4}", report.validation_rmse[0]);
    for e in 0..report.loss.len() {
        println!(
            "epoch {e:3}: loss {:.5}  reconstruction {:.5}  contrastive {:.4}  validation rmse {:.4}",
            report.loss[e],
            report.reconstruction[e],
            report.contrastive[e],
            report.validation_rmse[e + 1]
        );
    }

    let (mut ours, mut identity, mut copy, mut n) = (0.0, 0.0, 0.0, 0);
    for id in corpus.system_ids(Split::Test) {
        let recs = corpus.system_records(id)?;
        for q in &recs[1..] {
            let pred = model.one_shot(&codec, &recs[0].x, &recs[0].y, &q.x)?;
            ours += rmse(&pred, &q.y)?;
            identity += rmse(&q.x, &q.y)?;
            copy += rmse(&recs[0].y, &q.y)?;
            n += 1;
        }
    }
    let n = n as f64;
    println!("test one-shot rmse {:.4}  identity {:.4}  copy {:.4}", ours / n, identity / n, copy / n);
    Ok(())
}
