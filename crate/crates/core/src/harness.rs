//! Evaluation reports, embedding probes, ablations and plot export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::behavior::{train_behavior, BehaviorConfig, BehaviorModel, TrainMode};
use crate::codec::{Codec, CodecConfig};
use crate::corpus::{build_records, Corpus, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, prng};
use crate::signals::{rmse, Signal};
use crate::systems::FilterClass;

/// Signal-to-signal reconstruction, e.g. a codec round trip.
pub trait Reconstructor {
    fn reconstruct_batch(&self, signals: &[&Signal]) -> Result<Vec<Signal>>;
}

/// One-shot prediction of `y` for `query_x` from a prompt pair.
pub trait OneShotPredictor {
    fn predict_batch(&self, items: &[(&Signal, &Signal, &Signal)]) -> Result<Vec<Signal>>;
}

/// Fixed-size summary of an input/output pair.
pub trait PairEmbedder {
    fn embed_batch(&self, pairs: &[(&Signal, &Signal)]) -> Result<Vec<Vec<f64>>>;
}

impl Reconstructor for Codec {
    fn reconstruct_batch(&self, signals: &[&Signal]) -> Result<Vec<Signal>> {
        let tokens = self.encode_batch(signals)?;
        self.decode_batch(&tokens.iter().collect::<Vec<_>>())
    }
}

/// A behavior model paired with the codec it was trained on.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub model: &'a BehaviorModel,
    pub codec: &'a Codec,
}

impl OneShotPredictor for Pipeline<'_> {
    fn predict_batch(&self, items: &[(&Signal, &Signal, &Signal)]) -> Result<Vec<Signal>> {
        let normalized: Vec<[Signal; 3]> = items.iter().map(|(a, b, c)| [a.normalize(), b.normalize(), c.normalize()]).collect();
        let enc = |k: usize| self.codec.encode_batch(&normalized.iter().map(|s| &s[k]).collect::<Vec<_>>());
        let (px, py, qx) = (enc(0)?, enc(1)?, enc(2)?);
        let zs = self.model.embed_batch(&px.iter().zip(&py).collect::<Vec<_>>())?;
        self.model.predict_batch(&zs.iter().zip(&qx).collect::<Vec<_>>(), self.codec)
    }
}

impl PairEmbedder for Pipeline<'_> {
    fn embed_batch(&self, pairs: &[(&Signal, &Signal)]) -> Result<Vec<Vec<f64>>> {
        let xs: Vec<Signal> = pairs.iter().map(|p| p.0.normalize()).collect();
        let ys: Vec<Signal> = pairs.iter().map(|p| p.1.normalize()).collect();
        let tx = self.codec.encode_batch(&xs.iter().collect::<Vec<_>>())?;
        let ty = self.codec.encode_batch(&ys.iter().collect::<Vec<_>>())?;
        let zs = self.model.embed_batch(&tx.iter().zip(&ty).collect::<Vec<_>>())?;
        Ok(zs.into_iter().map(|z| z.z.iter().map(|&v| v as f64).collect()).collect())
    }
}

/// Value at 1-based rank `ceil(p * n)` of the sorted sample.
pub fn nearest_rank_index(n: usize, p: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::param("values", "percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("{p} not within [0, 1]")));
    }
    Ok(((p * n as f64).ceil() as usize).clamp(1, n) - 1)
}

pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(sorted.len(), p)?])
}

pub const PERCENTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.95, 0.99];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// `(p, value)` with nearest-rank percentiles.
    pub percentiles: Vec<(f64, f64)>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::param("values", "no values to summarize"));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let percentiles = PERCENTILES.iter().map(|&p| Ok((p, percentile(values, p)?))).collect::<Result<_>>()?;
        Ok(Summary { mean, percentiles })
    }

    pub fn get(&self, p: f64) -> Option<f64> {
        self.percentiles.iter().find(|(q, _)| (q - p).abs() < 1e-12).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub system_id: u64,
    /// Pair index of the evaluated signal or query.
    pub pair_index: usize,
    /// `"x"` or `"y"` for reconstruction, `"query"` for prediction.
    pub role: String,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub items: Vec<EvalItem>,
    pub summary: Summary,
    /// Model-free comparisons aligned with `items`.
    pub baselines: BTreeMap<String, Vec<f64>>,
    pub baseline_summaries: BTreeMap<String, Summary>,
    pub train_systems: usize,
    pub test_systems: usize,
    pub hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn rmse_values(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.rmse).collect()
    }

    pub fn mean(&self) -> f64 {
        self.summary.mean
    }

    pub fn baseline_mean(&self, name: &str) -> Option<f64> {
        self.baseline_summaries.get(name).map(|s| s.mean)
    }

    /// Item at the nearest-rank percentile `p` of the RMSE distribution.
    pub fn item_at_percentile(&self, p: f64) -> Result<&EvalItem> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.sort_by(|&a, &b| self.items[a].rmse.total_cmp(&self.items[b].rmse));
        Ok(&self.items[order[nearest_rank_index(order.len(), p)?]])
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut header = vec!["system_id".to_string(), "pair_index".into(), "role".into(), "rmse".into()];
        header.extend(self.baselines.keys().cloned());
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for (k, item) in self.items.iter().enumerate() {
            let mut row = vec![item.system_id.to_string(), item.pair_index.to_string(), item.role.clone(), format!("{:.6e}", item.rmse)];
            row.extend(self.baselines.values().map(|b| format!("{:.6e}", b[k])));
            w.write_record(&row).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn report(
    kind: &str,
    corpus: &Corpus,
    items: Vec<EvalItem>,
    baselines: BTreeMap<String, Vec<f64>>,
    hashes: BTreeMap<String, String>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let summary = Summary::of(&items.iter().map(|i| i.rmse).collect::<Vec<_>>())?;
    let baseline_summaries = baselines.iter().map(|(k, v)| Ok((k.clone(), Summary::of(v)?))).collect::<Result<_>>()?;
    let mut hashes = hashes;
    hashes.insert("corpus".into(), corpus.manifest().sha256.clone());
    Ok(EvalReport {
        kind: kind.into(),
        items,
        summary,
        baselines,
        baseline_summaries,
        train_systems: corpus.manifest().train_systems,
        test_systems: corpus.manifest().test_systems,
        hashes,
        config,
    })
}

/// Round-trip RMSE of every held-out x and y signal.
pub fn eval_codec(codec: &impl Reconstructor, corpus: &Corpus, hashes: BTreeMap<String, String>, config: serde_json::Value) -> Result<EvalReport> {
    let records: Vec<_> = corpus.iterate(Split::Test, 0).collect::<Result<_>>()?;
    let mut items = Vec::new();
    for chunk in records.chunks(32) {
        let signals: Vec<&Signal> = chunk.iter().flat_map(|r| [&r.x, &r.y]).collect();
        let recon = codec.reconstruct_batch(&signals)?;
        for (k, (s, r)) in signals.iter().zip(&recon).enumerate() {
            let rec = &chunk[k / 2];
            items.push(EvalItem {
                system_id: rec.system_id,
                pair_index: rec.pair_index,
                role: if k % 2 == 0 { "x" } else { "y" }.into(),
                rmse: rmse(s, r)?,
            });
        }
    }
    report("codec", corpus, items, BTreeMap::new(), hashes, config)
}

/// Pair 0 prompts every later pair of each test system.
pub fn eval_one_shot(
    predictor: &impl OneShotPredictor,
    corpus: &Corpus,
    hashes: BTreeMap<String, String>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut items = Vec::new();
    let (mut identity, mut copy) = (Vec::new(), Vec::new());
    let ids = corpus.system_ids(Split::Test);
    for chunk in ids.chunks(16) {
        let mut recs = Vec::new();
        for &id in chunk {
            let r = corpus.system_records(id)?;
            if r.len() < 2 {
                return Err(Error::Dimension(format!("test system {id} has fewer than two pairs")));
            }
            recs.push(r);
        }
        let queries: Vec<(&Signal, &Signal, &Signal, &crate::corpus::CorpusRecord)> =
            recs.iter().flat_map(|r| r[1..].iter().map(move |q| (&r[0].x, &r[0].y, &q.x, q))).collect();
        let preds = predictor.predict_batch(&queries.iter().map(|q| (q.0, q.1, q.2)).collect::<Vec<_>>())?;
        for ((_, prompt_y, _, q), pred) in queries.iter().zip(&preds) {
            items.push(EvalItem { system_id: q.system_id, pair_index: q.pair_index, role: "query".into(), rmse: rmse(pred, &q.y)? });
            identity.push(rmse(&q.x, &q.y)?);
            copy.push(rmse(prompt_y, &q.y)?);
        }
    }
    let baselines = BTreeMap::from([("identity".to_string(), identity), ("copy".to_string(), copy)]);
    report("one_shot", corpus, items, baselines, hashes, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` on the probe's test portion.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub system_id: u64,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// LTI vs NTI.
    pub binary: ProbeResult,
    /// Filter class among LTI systems.
    pub filter_class: Option<ProbeResult>,
    pub projection: Vec<ProjectedPoint>,
    pub seed: u64,
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `[classes, dim + 1]`, bias last.
    weights: DMatrix<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64, iters: usize) -> Result<LinearProbe> {
        let n = features.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Probe(format!("{n} feature rows for {} labels", labels.len())));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; d];
        for f in features {
            for ((s, v), m) in std.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-8)).collect();
        let mut probe = LinearProbe { mean, std, weights: DMatrix::zeros(classes, d + 1) };
        let x = probe.design(features);
        let mut y = DMatrix::zeros(n, classes);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        // Gradient descent with a step bounded by the loss curvature.
        let lipschitz = 0.5 * x.iter().map(|v| v * v).sum::<f64>() / n as f64 + l2;
        let step = 1.0 / lipschitz;
        for _ in 0..iters {
            let p = softmax_rows(&(&x * probe.weights.transpose()));
            let mut grad = (p - &y).transpose() * &x / n as f64;
            let mut reg = probe.weights.clone() * l2;
            reg.column_mut(d).fill(0.0);
            grad += reg;
            probe.weights -= grad * step;
        }
        Ok(probe)
    }

    fn design(&self, features: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(features.len(), d + 1, |i, j| if j == d { 1.0 } else { (features[i][j] - self.mean[j]) / self.std[j] })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<usize> {
        let scores = self.design(features) * self.weights.transpose();
        (0..scores.nrows()).map(|i| scores.row(i).transpose().argmax().0).collect()
    }
}

fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Seeded 70/30 split by system, then fit and score a probe.
fn probe_split(features: &[Vec<f64>], labels: &[usize], systems: &[u64], classes: Vec<String>, seed: u64) -> Result<ProbeResult> {
    let k = classes.len();
    let mut ids: Vec<u64> = systems.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut prng(seed));
    let n_train = (ids.len() as f64 * 0.7).round() as usize;
    let train_ids: std::collections::HashSet<u64> = ids[..n_train].iter().copied().collect();
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((f, &l), s) in features.iter().zip(labels).zip(systems) {
        if train_ids.contains(s) {
            xtr.push(f.clone());
            ytr.push(l);
        } else {
            xte.push(f.clone());
            yte.push(l);
        }
    }
    for c in 0..k {
        if !ytr.contains(&c) || !yte.contains(&c) {
            return Err(Error::Probe(format!("class `{}` missing from the probe train or test portion", classes[c])));
        }
    }
    let probe = LinearProbe::fit(&xtr, &ytr, k, 1e-2, 500)?;
    let pred = probe.predict(&xte);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in yte.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = (0..k).map(|c| confusion[c][c] as f64 / confusion[c].iter().sum::<usize>() as f64).collect();
    Ok(ProbeResult {
        classes,
        accuracy: correct as f64 / yte.len() as f64,
        per_class_accuracy,
        confusion,
        train_size: xtr.len(),
        test_size: yte.len(),
    })
}

/// First two principal components of the rows.
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::param("features", "need at least two rows"));
    }
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pc = |k: usize| {
        let mut v = eig.eigenvectors.column(order[k.min(d - 1)]).into_owned();
        // Fix the sign so the projection is deterministic.
        if v.iter().fold(0.0f64, |m, &c| if c.abs() > m.abs() { c } else { m }) < 0.0 {
            v = -v;
        }
        &centered * v
    };
    let (a, b) = (pc(0), pc(1));
    Ok((0..n).map(|i| (a[i], b[i])).collect())
}

/// Embeds every test pair and fits LTI/NTI and filter-class probes.
pub fn probe_embeddings(embedder: &impl PairEmbedder, corpus: &Corpus, seed: u64) -> Result<ProbeReport> {
    let records: Vec<_> = corpus.iterate(Split::Test, 0).collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        features.extend(embedder.embed_batch(&chunk.iter().map(|r| (&r.x, &r.y)).collect::<Vec<_>>())?);
    }
    let systems: Vec<u64> = records.iter().map(|r| r.system_id).collect();
    let labels: Vec<_> = systems.iter().map(|&id| corpus.evaluation_label(id)).collect::<Result<_>>()?;
    let binary_labels: Vec<usize> = labels.iter().map(|l| usize::from(!l.lti)).collect();
    let binary = probe_split(&features, &binary_labels, &systems, vec!["lti".into(), "nti".into()], derive_seed(seed, 0x9b0, 0))?;

    let mut cf = Vec::new();
    let mut cl = Vec::new();
    let mut cs = Vec::new();
    for ((f, l), &s) in features.iter().zip(&labels).zip(&systems) {
        if let Some(c) = l.filter_class {
            cf.push(f.clone());
            cl.push(FilterClass::ALL.iter().position(|&k| k == c).expect("known class"));
            cs.push(s);
        }
    }
    let class_names = FilterClass::ALL.iter().map(|c| format!("{c:?}").to_lowercase()).collect();
    let filter_class = probe_split(&cf, &cl, &cs, class_names, derive_seed(seed, 0x9b0, 1)).ok();

    let coords = pca_2d(&features)?;
    let projection = coords
        .iter()
        .zip(&systems)
        .zip(&labels)
        .map(|((&(x, y), &system_id), l)| ProjectedPoint {
            system_id,
            label: match l.filter_class {
                Some(c) if l.lti => format!("lti_{c:?}").to_lowercase(),
                _ => if l.lti { "lti" } else { "nti" }.into(),
            },
            x,
            y,
        })
        .collect();
    Ok(ProbeReport { binary, filter_class, projection, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    StageMode,
    PretrainData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub behavior: BehaviorConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { corpus: CorpusConfig::default(), codec: CodecConfig::default(), behavior: BehaviorConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub one_shot_rmse: f64,
    pub identity_rmse: f64,
    pub copy_rmse: f64,
    pub final_training_loss: f64,
    pub corpus_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub which: Ablation,
    pub variants: Vec<AblationVariant>,
    /// Motor-experiment RMSEs from the original study for the same comparison;
    /// printed for reference only.
    pub reference: BTreeMap<String, f64>,
    pub seed: u64,
}

impl AblationReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["variant", "one_shot_rmse", "identity_rmse", "copy_rmse", "final_training_loss"])
            .map_err(|e| csv_error(&path, e))?;
        for v in &self.variants {
            w.write_record([
                v.name.clone(),
                format!("{:.6e}", v.one_shot_rmse),
                format!("{:.6e}", v.identity_rmse),
                format!("{:.6e}", v.copy_rmse),
                format!("{:.6e}", v.final_training_loss),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn variant(name: &str, model: &BehaviorModel, codec: &Codec, eval_corpus: &Corpus, train_corpus: &Corpus, loss: &[f64]) -> Result<AblationVariant> {
    let r = eval_one_shot(&Pipeline { model, codec }, eval_corpus, BTreeMap::new(), serde_json::Value::Null)?;
    Ok(AblationVariant {
        name: name.into(),
        one_shot_rmse: r.mean(),
        identity_rmse: r.baseline_mean("identity").unwrap_or(f64::NAN),
        copy_rmse: r.baseline_mean("copy").unwrap_or(f64::NAN),
        final_training_loss: loss.last().copied().unwrap_or(f64::NAN),
        corpus_sha256: train_corpus.manifest().sha256.clone(),
    })
}

/// Trains both variants with shared seeds and evaluates them on the test
/// split of the mixed corpus. `codec`, when given, is the frozen codec for
/// two-stage variants; otherwise one is trained from `config.codec`.
pub fn run_ablation(which: Ablation, config: &AblationConfig, corpus: &Corpus, codec: Option<&Codec>) -> Result<AblationReport> {
    let seed = config.seed;
    let trained;
    let codec = match codec {
        Some(c) => c,
        None => {
            trained = Codec::train(config.codec.clone(), corpus, seed)?.0;
            &trained
        }
    };
    let mut variants = Vec::new();
    let reference;
    match which {
        Ablation::StageMode => {
            let (m, _, r) = train_behavior(corpus, codec, config.behavior.clone(), seed, TrainMode::TwoStage)?;
            variants.push(variant("two_stage", &m, codec, corpus, corpus, &r.loss)?);
            let (m, joint_codec, r) = train_behavior(corpus, codec, config.behavior.clone(), seed, TrainMode::Joint)?;
            variants.push(variant("joint", &m, &joint_codec, corpus, corpus, &r.loss)?);
            reference = BTreeMap::from([("two_stage".into(), 1.13), ("joint".into(), 1.20)]);
        }
        Ablation::PretrainData => {
            let (m, _, r) = train_behavior(corpus, codec, config.behavior.clone(), seed, TrainMode::TwoStage)?;
            variants.push(variant("lti_and_nti", &m, codec, corpus, corpus, &r.loss)?);
            let lti_cfg = CorpusConfig { lti_frac: 1.0, ..corpus.manifest().config.clone() };
            let (bytes, manifest) = build_records(&lti_cfg, corpus.manifest().seed)?;
            let lti = Corpus::from_parts(PathBuf::from("memory:lti_only"), manifest, bytes)?;
            let (m, _, r) = train_behavior(&lti, codec, config.behavior.clone(), seed, TrainMode::TwoStage)?;
            variants.push(variant("lti_only", &m, codec, corpus, &lti, &r.loss)?);
            reference = BTreeMap::from([
                ("lti_and_nti_case_a".into(), 1.13),
                ("lti_only_case_a".into(), 1.17),
                ("lti_and_nti_case_b".into(), 1.79),
                ("lti_only_case_b".into(), 2.16),
            ]);
        }
    }
    Ok(AblationReport { which, variants, reference, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    Line,
    Scatter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    /// File stem of the CSV and SVG outputs.
    pub name: String,
    pub title: String,
    pub kind: FigureKind,
    pub series: Vec<Series>,
}

/// Original and reconstruction of the test signal at the 95th percentile RMSE.
pub fn reconstruction_figure(codec: &impl Reconstructor, corpus: &Corpus, report: &EvalReport) -> Result<Figure> {
    let item = report.item_at_percentile(0.95)?;
    let rec = corpus
        .system_records(item.system_id)?
        .into_iter()
        .find(|r| r.pair_index == item.pair_index)
        .ok_or_else(|| Error::State(format!("record {}:{} not in corpus", item.system_id, item.pair_index)))?;
    let s = if item.role == "x" { rec.x } else { rec.y };
    let r = codec.reconstruct_batch(&[&s])?.remove(0);
    Ok(Figure {
        name: "reconstruction_p95".into(),
        title: format!("Reconstruction at p95 (system {}, rmse {:.4})", item.system_id, item.rmse),
        kind: FigureKind::Line,
        series: vec![indexed("original", s.samples()), indexed("reconstruction", r.samples())],
    })
}

/// True and predicted query output at the given percentile of one-shot RMSE.
pub fn prediction_figure(predictor: &impl OneShotPredictor, corpus: &Corpus, report: &EvalReport, p: f64) -> Result<Figure> {
    let item = report.item_at_percentile(p)?;
    let recs = corpus.system_records(item.system_id)?;
    let q = recs
        .iter()
        .find(|r| r.pair_index == item.pair_index)
        .ok_or_else(|| Error::State(format!("record {}:{} not in corpus", item.system_id, item.pair_index)))?;
    let pred = predictor.predict_batch(&[(&recs[0].x, &recs[0].y, &q.x)])?.remove(0);
    Ok(Figure {
        name: format!("prediction_p{}", (p * 100.0).round()),
        title: format!("One-shot prediction (system {}, rmse {:.4})", item.system_id, item.rmse),
        kind: FigureKind::Line,
        series: vec![
            indexed("query_input", q.x.samples()),
            indexed("true_output", q.y.samples()),
            indexed("predicted", pred.samples()),
        ],
    })
}

pub fn embedding_figure(probe: &ProbeReport) -> Figure {
    let mut groups: BTreeMap<&str, Series> = BTreeMap::new();
    for p in &probe.projection {
        let s = groups.entry(&p.label).or_insert_with(|| Series { name: p.label.clone(), x: Vec::new(), y: Vec::new() });
        s.x.push(p.x);
        s.y.push(p.y);
    }
    Figure {
        name: "embedding_pca".into(),
        title: format!("System embeddings, PCA (LTI/NTI probe accuracy {:.3})", probe.binary.accuracy),
        kind: FigureKind::Scatter,
        series: groups.into_values().collect(),
    }
}

fn indexed(name: &str, y: &[f64]) -> Series {
    Series { name: name.into(), x: (0..y.len()).map(|i| i as f64).collect(), y: y.to_vec() }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG rendering of a figure.
pub fn render_svg(fig: &Figure) -> String {
    let (w, h, m) = (800.0, 480.0, 60.0);
    let all = || fig.series.iter().flat_map(|s| s.x.iter().zip(&s.y));
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in all() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        (x0, x1) = (finite(x0) - 1.0, finite(x0) + 1.0);
    }
    if !(y1 > y0) {
        (y0, y1) = (finite(y0) - 1.0, finite(y0) + 1.0);
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="30" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, xml_escape(&fig.title));
    let _ = writeln!(
        out,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black" stroke-width="1"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    for (label, v, x, y) in [("min", x0, m, h - m + 16.0), ("max", x1, w - m, h - m + 16.0)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.3}</text><!-- x {label} -->"#);
    }
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#, m - 4.0, y + 4.0);
    }
    for (k, s) in fig.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        match fig.kind {
            FigureKind::Line => {
                let pts: Vec<String> = s.x.iter().zip(&s.y).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "));
            }
            FigureKind::Scatter => {
                for (&x, &y) in s.x.iter().zip(&s.y) {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#, px(x), py(y));
                }
            }
        }
        let ly = m + 16.0 + 16.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 150.0, ly - 9.0);
        let _ = writeln!(out, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12">{}</text>"#, w - m - 135.0, xml_escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Long-format CSV (`series,x,y`) holding exactly the plotted data.
pub fn render_csv(fig: &Figure) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Domain(format!("csv: {e}"));
    w.write_record(["series", "x", "y"]).map_err(err)?;
    for s in &fig.series {
        for (x, y) in s.x.iter().zip(&s.y) {
            w.write_record([s.name.as_str(), &format!("{x:e}"), &format!("{y:e}")]).map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Domain(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `<name>.csv` and `<name>.svg` for every figure; returns the paths.
pub fn export_plots(figures: &[Figure], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for fig in figures {
        let csv = dir.join(format!("{}.csv", fig.name));
        fs::write(&csv, render_csv(fig)?).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join(format!("{}.svg", fig.name));
        fs::write(&svg, render_svg(fig)).map_err(|e| Error::io(&svg, e))?;
        paths.extend([csv, svg]);
    }
    Ok(paths)
}
