//! Evaluates saved checkpoints on a corpus directory: codec round trip,
//! one-shot prediction, embedding probes and figures.
//!
//! `cargo run --release --example evaluate -- <corpus_dir> <codec.bin> <model.bin> [out_dir]`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iclsysid::behavior::BehaviorModel;
use iclsysid::codec::Codec;
use iclsysid::corpus::Corpus;
use iclsysid::harness::{
    embedding_figure, eval_codec, eval_one_shot, export_plots, prediction_figure, probe_embeddings, reconstruction_figure, Pipeline,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [corpus, codec, model, rest @ ..] = args.as_slice() else {
        eprintln!("usage: evaluate <corpus_dir> <codec.bin> <model.bin> [out_dir]");
        std::process::exit(2);
    };
    let out = rest.first().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("iclsysid_eval"));
    let corpus = Corpus::open(Path::new(corpus))?;
    let codec = Codec::load(Path::new(codec))?;
    let model = BehaviorModel::load(Path::new(model))?;
    let pipeline = Pipeline { model: &model, codec: &codec };

    let recon = eval_codec(&codec, &corpus, BTreeMap::new(), serde_json::Value::Null)?;
    println!("codec: mean rmse {:.4}, p95 {:.4}", recon.mean(), recon.summary.get(0.95).unwrap_or(f64::NAN));
    let one_shot = eval_one_shot(&pipeline, &corpus, BTreeMap::new(), serde_json::Value::Null)?;
    println!(
        "one-shot: mean rmse {:.4} (identity {:.4}, copy {:.4})",
        one_shot.mean(),
        one_shot.baseline_mean("identity").unwrap_or(f64::NAN),
        one_shot.baseline_mean("copy").unwrap_or(f64::NAN)
    );
    let probe = probe_embeddings(&pipeline, &corpus, 0)?;
    println!("LTI/NTI probe accuracy {:.3}", probe.binary.accuracy);
    if let Some(fc) = &probe.filter_class {
        println!("filter-class probe accuracy {:.3} over {:?}", fc.accuracy, fc.classes);
    }

    recon.write(&out, "codec_eval")?;
    one_shot.write(&out, "one_shot_eval")?;
    let figures = [
        reconstruction_figure(&codec, &corpus, &recon)?,
        prediction_figure(&pipeline, &corpus, &one_shot, 0.5)?,
        prediction_figure(&pipeline, &corpus, &one_shot, 0.95)?,
        embedding_figure(&probe),
    ];
    for p in export_plots(&figures, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
