use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use iclsysid::behavior::{train_behavior, BehaviorConfig, BehaviorModel, TrainMode};
use iclsysid::checkpoint::file_hash;
use iclsysid::codec::{Codec, CodecConfig};
use iclsysid::controlsim::{experiment_protocol, PlantModel, ProtocolConfig};
use iclsysid::corpus::{build_corpus, Corpus, CorpusConfig};
use iclsysid::error::{Error, Result};
use iclsysid::harness::{
    embedding_figure, eval_codec, eval_one_shot, export_plots, prediction_figure, probe_embeddings, reconstruction_figure,
    run_ablation, Ablation, AblationConfig, EvalReport, Pipeline, ProbeReport,
};
use iclsysid::signals::Signal;

#[derive(Parser)]
#[command(name = "iclsysid", version, about = "In-context system identification from input/output pairs")]
struct Cli {
    /// JSON configuration for the chosen stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    TwoStage,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    StageMode,
    PretrainData,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus directory (corpus.bin + manifest.json).
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the signal codec on a corpus.
    TrainCodec {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the behavior model.
    TrainBehavior {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, value_enum, default_value = "two-stage")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Where joint mode writes its codec; defaults to `<out>.codec`.
        #[arg(long)]
        codec_out: Option<PathBuf>,
    },
    /// Evaluate a codec, and a behavior model when given, on the test split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a query output from one prompt pair. Signals are text files with one sample per line.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        prompt_x: PathBuf,
        #[arg(long)]
        prompt_y: PathBuf,
        #[arg(long)]
        query_x: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of a corpus directory or checkpoint.
    Inspect { path: PathBuf },
    /// Run one of the training ablations.
    Ablate {
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen codec for two-stage variants; trained from the config when absent.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the simulated feedforward experiment.
    SimulateControl {
        /// JSON list of plant conditions, replacing those of the protocol.
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export CSV and SVG figures from evaluation reports written by `eval`.
    Plot {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map(read_json).unwrap_or_else(|| Ok(T::default()))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn read_signal(path: &Path) -> Result<Signal> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let samples = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: format!("`{t}`: {e}") }))
        .collect::<Result<Vec<_>>>()?;
    Signal::new(samples)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| io_error(path, e))
}

fn hashes(entries: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    entries.iter().map(|(k, p)| Ok((k.to_string(), file_hash(p)?))).collect()
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate { out } => {
            let config: CorpusConfig = config_or_default(&cli.config)?;
            let m = build_corpus(&config, seed, &out)?;
            println!("{} records, {} train / {} test systems, sha256 {}", m.n_records, m.train_systems, m.test_systems, m.sha256);
        }
        Command::TrainCodec { corpus, out } => {
            let config: CodecConfig = config_or_default(&cli.config)?;
            let corpus = Corpus::open(&corpus)?;
            let (codec, report) = Codec::train(config, &corpus, seed)?;
            let hash = codec.save(&out)?;
            write_json(&out.with_extension("train.json"), &report)?;
            println!("final loss {:.5}, {} steps, sha256 {hash}", report.loss.last().copied().unwrap_or(f64::NAN), report.steps);
        }
        Command::TrainBehavior { corpus, codec, mode, out, codec_out } => {
            let config: BehaviorConfig = config_or_default(&cli.config)?;
            let corpus = Corpus::open(&corpus)?;
            let codec = Codec::load(&codec)?;
            let mode = match mode {
                Mode::TwoStage => TrainMode::TwoStage,
                Mode::Joint => TrainMode::Joint,
            };
            let (model, trained_codec, report) = train_behavior(&corpus, &codec, config, seed, mode)?;
            let hash = model.save(&out)?;
            if mode == TrainMode::Joint {
                let path = codec_out.unwrap_or_else(|| out.with_extension("codec"));
                trained_codec.save(&path)?;
                println!("joint codec written to {}", path.display());
            }
            write_json(&out.with_extension("train.json"), &report)?;
            println!(
                "validation rmse {:.4} -> {:.4}, sha256 {hash}",
                report.validation_rmse.first().copied().unwrap_or(f64::NAN),
                report.validation_rmse.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { corpus: corpus_dir, codec: codec_path, model, out } => {
            let corpus = Corpus::open(&corpus_dir)?;
            let codec = Codec::load(&codec_path)?;
            let config = serde_json::to_value(codec.config())?;
            let r = eval_codec(&codec, &corpus, hashes(&[("codec", &codec_path)])?, config)?;
            r.write(&out, "codec_eval")?;
            println!("codec: mean rmse {:.4}, p95 {:.4}", r.mean(), r.summary.get(0.95).unwrap_or(f64::NAN));
            if let Some(model_path) = model {
                let model = BehaviorModel::load(&model_path)?;
                let pipeline = Pipeline { model: &model, codec: &codec };
                let config = serde_json::to_value(model.config())?;
                let r = eval_one_shot(&pipeline, &corpus, hashes(&[("codec", &codec_path), ("model", &model_path)])?, config)?;
                r.write(&out, "one_shot_eval")?;
                println!(
                    "one-shot: mean rmse {:.4} (identity {:.4}, copy {:.4})",
                    r.mean(),
                    r.baseline_mean("identity").unwrap_or(f64::NAN),
                    r.baseline_mean("copy").unwrap_or(f64::NAN)
                );
                let probe = probe_embeddings(&pipeline, &corpus, seed)?;
                write_json(&out.join("probe.json"), &probe)?;
                println!("probe: LTI/NTI accuracy {:.3}", probe.binary.accuracy);
            }
        }
        Command::Predict { model, codec, prompt_x, prompt_y, query_x, out } => {
            let model = BehaviorModel::load(&model)?;
            let codec = Codec::load(&codec)?;
            let query = read_signal(&query_x)?;
            let y = model.one_shot(&codec, &read_signal(&prompt_x)?, &read_signal(&prompt_y)?, &query)?;
            let text: String = y.samples().iter().map(|v| format!("{v:e}\n")).collect();
            fs::write(&out, text).map_err(|e| io_error(&out, e))?;
        }
        Command::Inspect { path } => {
            if path.is_dir() {
                let corpus = Corpus::open(&path)?;
                println!("{}", serde_json::to_string_pretty(corpus.manifest())?);
            } else {
                let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
                match bytes.get(..8) {
                    Some(m) if m == iclsysid::codec::MAGIC => {
                        let c = Codec::load(&path)?;
                        println!("codec, trained {}\n{}", c.is_trained(), serde_json::to_string_pretty(c.config())?);
                    }
                    Some(m) if m == iclsysid::behavior::MAGIC => {
                        let m = BehaviorModel::load(&path)?;
                        println!(
                            "behavior model, trained {}, {} parameters\n{}",
                            m.is_trained(),
                            m.params().numel(),
                            serde_json::to_string_pretty(m.config())?
                        );
                    }
                    _ => return Err(Error::Corrupt { path, reason: "unknown file type".into() }),
                }
                println!("sha256 {}", file_hash(&path)?);
            }
        }
        Command::Ablate { which, corpus, codec, out } => {
            let mut config: AblationConfig = config_or_default(&cli.config)?;
            config.seed = seed;
            let corpus = Corpus::open(&corpus)?;
            let codec = codec.as_deref().map(Codec::load).transpose()?;
            let which = match which {
                Which::StageMode => Ablation::StageMode,
                Which::PretrainData => Ablation::PretrainData,
            };
            let report = run_ablation(which, &config, &corpus, codec.as_ref())?;
            report.write(&out)?;
            for v in &report.variants {
                println!("{:>12}: one-shot rmse {:.4}", v.name, v.one_shot_rmse);
            }
        }
        Command::SimulateControl { plant, protocol, model, codec, out } => {
            let mut config: ProtocolConfig = match protocol.or(cli.config) {
                Some(p) => read_json(&p)?,
                None => ProtocolConfig::default(),
            };
            if let Some(p) = plant {
                config.conditions = read_json::<Vec<PlantModel>>(&p)?;
            }
            let model = BehaviorModel::load(&model)?;
            let codec = Codec::load(&codec)?;
            let report = experiment_protocol(&config, &model, &codec)?;
            report.write(&out)?;
            for m in iclsysid::controlsim::METHODS {
                println!("{m:>12}: held-out rmse {:.4}", report.held_out_mean(m).unwrap_or(f64::NAN));
            }
        }
        Command::Plot { reports, corpus, codec, model, out } => {
            let corpus = Corpus::open(&corpus)?;
            let codec = Codec::load(&codec)?;
            let codec_eval: EvalReport = read_json(&reports.join("codec_eval.json"))?;
            let mut figures = vec![reconstruction_figure(&codec, &corpus, &codec_eval)?];
            if let Some(model_path) = model {
                let model = BehaviorModel::load(&model_path)?;
                let pipeline = Pipeline { model: &model, codec: &codec };
                let one_shot: EvalReport = read_json(&reports.join("one_shot_eval.json"))?;
                figures.push(prediction_figure(&pipeline, &corpus, &one_shot, 0.5)?);
                figures.push(prediction_figure(&pipeline, &corpus, &one_shot, 0.95)?);
                let probe: ProbeReport = read_json(&reports.join("probe.json"))?;
                figures.push(embedding_figure(&probe));
            }
            for p in export_plots(&figures, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
