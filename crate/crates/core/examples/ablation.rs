//! Runs both ablations (two-stage vs joint training, mixed vs LTI-only
//! pretraining data) at a small scale and writes their reports.
//!
//! `cargo run --release --example ablation -- [systems] [epochs] [steps_per_epoch] [out_dir]`

use std::path::PathBuf;

use iclsysid::behavior::BehaviorConfig;
use iclsysid::codec::CodecConfig;
use iclsysid::corpus::{build_records, Corpus, CorpusConfig};
use iclsysid::harness::{run_ablation, Ablation, AblationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_systems = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("iclsysid_ablation"));

    let config = AblationConfig {
        corpus: CorpusConfig { n_systems, length: 1024, ..Default::default() },
        codec: CodecConfig { epochs, steps_per_epoch: steps, learning_rate: 1e-3, ..Default::default() },
        behavior: BehaviorConfig {
            model_dim: 64,
            layers_embed: 2,
            layers_predict: 2,
            epochs,
            steps_per_epoch: steps,
            learning_rate: 3e-4,
            ..Default::default()
        },
        seed: 1,
    };
    let (bytes, manifest) = build_records(&config.corpus, config.seed)?;
    let corpus = Corpus::from_parts("memory".into(), manifest, bytes)?;
    for (which, dir) in [(Ablation::StageMode, "stage_mode"), (Ablation::PretrainData, "pretrain_data")] {
        let report = run_ablation(which, &config, &corpus, None)?;
        report.write(&out.join(dir))?;
        println!("{dir}:");
        for v in &report.variants {
            println!(
                "  {:<12} one-shot {:.4}  identity {:.4}  copy {:.4}  final loss {:.4}",
                v.name, v.one_shot_rmse, v.identity_rmse, v.copy_rmse, v.final_training_loss
            );
        }
    }
    println!("reports in {}", out.display());
    Ok(())
}
