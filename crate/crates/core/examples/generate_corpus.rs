//! Writes a corpus directory and reopens it to verify its hash.
//!
//! `cargo run --release --example generate_corpus -- <out_dir> [systems] [length] [seed]`

use std::path::PathBuf;

use iclsysid::corpus::{build_corpus, Corpus, CorpusConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| std::env::temp_dir().join("iclsysid_corpus").display().to_string()));
    let n_systems = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let length = args.next().and_then(|a| a.parse().ok()).unwrap_or(2048);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let manifest = build_corpus(&CorpusConfig { n_systems, length, ..Default::default() }, seed, &out)?;
    println!("wrote {} ({} records)", out.display(), manifest.n_records);
    println!("sha256 {}", manifest.sha256);
    println!("{} train / {} test systems, {} LTI / {} NTI", manifest.train_systems, manifest.test_systems, manifest.n_lti, manifest.n_nti);

    let corpus = Corpus::open(&out)?;
    let first = corpus.system_ids(Split::Test)[0];
    let label = corpus.evaluation_label(first)?;
    for rec in corpus.system_records(first)? {
        println!(
            "test system {first} pair {}: {} input, x scale {:.3}, y scale {:.3}, lti {}",
            rec.pair_index,
            rec.input_kind.name(),
            rec.x.scale(),
            rec.y.scale(),
            label.lti
        );
    }
    Ok(())
}
