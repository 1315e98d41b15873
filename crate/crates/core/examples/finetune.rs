//! Single-layer finetuning on a handful of pairs and a check that every
//! other parameter stayed bit-identical.
//!
//! `cargo run --release --example finetune -- [epochs] [lr]`

use iclsysid::behavior::{encode_records, BehaviorConfig, BehaviorModel, LayerSelector};
use iclsysid::codec::{Codec, CodecConfig};
use iclsysid::corpus::{build_records, Corpus, CorpusConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let lr: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(1e-3);

    let (bytes, manifest) = build_records(&CorpusConfig { n_systems: 60, length: 512, ..Default::default() }, 2)?;
    let corpus = Corpus::from_parts("memory".into(), manifest, bytes)?;
    let (codec, _) = Codec::train(CodecConfig { epochs: 2, steps_per_epoch: 20, learning_rate: 1e-3, ..Default::default() }, &corpus, 0)?;
    let config = BehaviorConfig { model_dim: 32, heads: 2, layers_embed: 2, layers_predict: 2, epochs: 2, steps_per_epoch: 10, batch_systems: 8, ..Default::default() };
    let (model, _) = BehaviorModel::train(config, &corpus, &codec, 0)?;

    let mut examples = Vec::new();
    for id in corpus.system_ids(Split::Test) {
        let mut enc = encode_records(&corpus.system_records(id)?, &codec)?;
        let query = enc.swap_remove(1);
        examples.push((enc.swap_remove(0), query));
    }
    let before = model.validation_rmse(&codec, &examples.iter().map(|(a, b)| (a, b)).collect::<Vec<_>>())?;
    let tuned = model.finetune_single_layer(&codec, &examples, LayerSelector::LastPredict, epochs, lr)?;
    let after = tuned.validation_rmse(&codec, &examples.iter().map(|(a, b)| (a, b)).collect::<Vec<_>>())?;
    println!("rmse on the {} finetuning pairs: {before:.4} -> {after:.4}", examples.len());

    let prefix = model.net().selector_prefix(LayerSelector::LastPredict)?;
    let (mut changed, mut frozen) = (0, 0);
    for (a, b) in model.params().entries().iter().zip(tuned.params().entries()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.name.starts_with(&prefix) {
            changed += usize::from(!same);
        } else {
            assert!(same, "{} changed", a.name);
            frozen += 1;
        }
    }
    println!("{changed} tensors under `{prefix}` updated; {frozen} others bit-identical");
    Ok(())
}
