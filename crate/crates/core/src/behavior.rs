//! System behavior model: a transformer that summarizes one input/output pair
//! into an embedding `z` and predicts the output for a new input from `z`.
//!
//! Both blocks are pre-norm transformers with a learned relative-position
//! bias shared by the layers of a block. Training combines signal-domain
//! reconstruction through the codec decoder with an InfoNCE-style
//! contrastive loss on embeddings of two pairs of the same system.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tape::{cosine_lr, Adam, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::checkpoint::{Reader, Writer};
use crate::codec::{frame_count, swap_last_two, Codec, CodecConfig, CodecNet, TokenSequence};
use crate::corpus::{Corpus, CorpusRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, prng, Prng};
use crate::signals::Signal;

pub const MAGIC: &[u8; 8] = b"ICLBEH01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers_embed: usize,
    pub layers_predict: usize,
    /// Hidden width of the feed-forward sublayers as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub max_offset: usize,
    pub temperature: f64,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Weight of an auxiliary latent-space MSE on the prediction.
    pub latent_weight: f64,
    /// Add the query's own latents to the predicted latents.
    pub residual_skip: bool,
    pub learning_rate: f64,
    pub batch_systems: usize,
    pub epochs: usize,
    /// Steps per epoch; zero means one pass over the training systems.
    pub steps_per_epoch: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            model_dim: 256,
            heads: 4,
            layers_embed: 4,
            layers_predict: 4,
            ff_mult: 4,
            max_offset: 128,
            temperature: 0.1,
            lambda: 1.0,
            latent_weight: 0.0,
            residual_skip: false,
            learning_rate: 1e-4,
            batch_systems: 16,
            epochs: 50,
            steps_per_epoch: 0,
        }
    }
}

impl BehaviorConfig {
    fn steps_per_epoch_for(&self, systems: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (systems / self.batch_systems).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::param("model_dim", format!("{} not divisible by {} heads", self.model_dim, self.heads)));
        }
        if self.layers_embed == 0 || self.layers_predict == 0 {
            return Err(Error::param("layers_predict", "both blocks need at least one layer"));
        }
        if self.ff_mult == 0 {
            return Err(Error::param("ff_mult", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature", format!("{} must be > 0", self.temperature)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !(self.latent_weight >= 0.0) {
            return Err(Error::param("latent_weight", "must be >= 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.batch_systems < 2 {
            return Err(Error::param("batch_systems", "need at least 2 systems per batch"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TwoStage,
    Joint,
}

/// Which layer [`BehaviorModel::finetune_single_layer`] may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "block", content = "layer")]
pub enum LayerSelector {
    /// Last layer of the prediction block.
    LastPredict,
    Predict(usize),
    Embed(usize),
    /// Output projection to latent frames.
    Head,
}

impl Default for LayerSelector {
    fn default() -> Self {
        LayerSelector::LastPredict
    }
}

/// `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0))
}

/// Contrastive loss on `[N, E]` anchors and positives.
///
/// Row `i` of the logits is `cos(a_i, p_j) / tau` over all `j`; the target is
/// `j = i`, so the other systems' positives act as negatives.
pub fn contrastive_loss_graph<T: Real>(g: &Graph<T>, anchors: Var, positives: Var, temperature: f64) -> Var {
    let n = g.shape(anchors)[0];
    let a = g.l2_normalize_rows(anchors);
    let p = g.l2_normalize_rows(positives);
    let sim = g.matmul_t(a, p, false, true);
    let logits = g.scale(sim, T::lit(1.0 / temperature));
    g.cross_entropy(logits, &(0..n).collect::<Vec<_>>())
}

fn embedding_matrix(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let e = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != e) || e == 0 {
        return Err(Error::Dimension("embeddings must share a nonzero width".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::Domain(format!("embedding {i} is the zero vector")));
    }
    Ok(Tensor::new(&[rows.len(), e], rows.concat()))
}

/// Mean over anchors of the contrastive loss, evaluated in double precision.
pub fn contrastive_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if anchors.len() < 2 || anchors.len() != positives.len() {
        return Err(Error::param("anchors", format!("need N >= 2 matched pairs, got {} and {}", anchors.len(), positives.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::param("temperature", format!("{temperature} must be > 0")));
    }
    let g = Graph::<f64>::new();
    let a = g.input(embedding_matrix(anchors)?);
    let p = g.input(embedding_matrix(positives)?);
    let l = contrastive_loss_graph(&g, a, p, temperature);
    Ok(g.value(l).item())
}

/// Mean over the batch of per-signal mean squared error.
pub fn reconstruction_loss(y_true: &[Signal], y_pred: &[Signal]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Dimension(format!("batches of {} and {} signals", y_true.len(), y_pred.len())));
    }
    let mut total = 0.0;
    for (a, b) in y_true.iter().zip(y_pred) {
        if a.len() != b.len() {
            return Err(Error::Dimension(format!("signal lengths {} and {}", a.len(), b.len())));
        }
        total += a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / y_true.len() as f64)
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    layers: Vec<Layer>,
    rel_bias: ParamId,
    ln_out: Norm,
}

/// Parameter layout and forward pass of the behavior model.
#[derive(Clone, Debug)]
pub struct BehaviorNet {
    pair_in: Linear,
    system_token: ParamId,
    embed: Block,
    query_in: Linear,
    predict: Block,
    head: Linear,
    heads: usize,
    model_dim: usize,
    latent_dim: usize,
    max_offset: usize,
    residual_skip: bool,
}

impl BehaviorNet {
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

fn init(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let bound = std * 3f64.sqrt();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect())
}

fn add_linear(store: &mut ParamStore<f32>, rng: &mut Prng, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
    Linear {
        w: store.add(format!("{name}.w"), init(rng, &[fan_in, fan_out], std)),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
    }
}

fn add_norm(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
    }
}

fn add_block(store: &mut ParamStore<f32>, rng: &mut Prng, name: &str, layers: usize, cfg: &BehaviorConfig) -> Block {
    let e = cfg.model_dim;
    let std = (1.0 / e as f64).sqrt();
    let out_std = std / (2.0 * layers as f64).sqrt();
    let layers = (0..layers)
        .map(|i| {
            let p = format!("{name}.layer{i}");
            Layer {
                ln1: add_norm(store, &format!("{p}.ln1"), e),
                qkv: add_linear(store, rng, &format!("{p}.qkv"), e, 3 * e, std),
                proj: add_linear(store, rng, &format!("{p}.proj"), e, e, out_std),
                ln2: add_norm(store, &format!("{p}.ln2"), e),
                ff1: add_linear(store, rng, &format!("{p}.ff1"), e, cfg.ff_mult * e, std),
                ff2: add_linear(store, rng, &format!("{p}.ff2"), cfg.ff_mult * e, e, out_std / (cfg.ff_mult as f64).sqrt()),
            }
        })
        .collect();
    Block {
        layers,
        rel_bias: store.add(format!("{name}.rel_bias"), Tensor::zeros(&[cfg.heads, 2 * cfg.max_offset + 1])),
        ln_out: add_norm(store, &format!("{name}.ln_out"), e),
    }
}

impl BehaviorNet {
    pub fn build(cfg: &BehaviorConfig, latent_dim: usize, store: &mut ParamStore<f32>, rng: &mut Prng) -> BehaviorNet {
        let e = cfg.model_dim;
        let pair_in = add_linear(store, rng, "pair_in", 2 * latent_dim, e, (1.0 / (2 * latent_dim) as f64).sqrt());
        let system_token = store.add("system_token", init(rng, &[e], 0.02));
        let embed = add_block(store, rng, "embed", cfg.layers_embed, cfg);
        let query_in = add_linear(store, rng, "query_in", latent_dim, e, (1.0 / latent_dim as f64).sqrt());
        let predict = add_block(store, rng, "predict", cfg.layers_predict, cfg);
        let head = add_linear(store, rng, "head", e, latent_dim, (1.0 / e as f64).sqrt());
        BehaviorNet {
            pair_in,
            system_token,
            embed,
            query_in,
            predict,
            head,
            heads: cfg.heads,
            model_dim: e,
            latent_dim,
            max_offset: cfg.max_offset,
            residual_skip: cfg.residual_skip,
        }
    }

    fn linear<T: Real>(g: &Graph<T>, p: &Bound, l: &Linear, x: Var) -> Var {
        g.linear(x, p.var(l.w), Some(p.var(l.b)))
    }

    fn norm<T: Real>(g: &Graph<T>, p: &Bound, n: &Norm, x: Var) -> Var {
        g.layer_norm(x, p.var(n.gamma), p.var(n.beta), 1e-5)
    }

    fn attention<T: Real>(&self, g: &Graph<T>, p: &Bound, layer: &Layer, x: Var, bias: Var) -> Var {
        let shape = g.shape(x);
        let (b, s, e) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, e / self.heads);
        let qkv = Self::linear(g, p, &layer.qkv, x);
        let qkv = g.reshape(qkv, &[b, s, 3, h, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let part = |i| {
            let t = g.slice(qkv, 0, i, 1);
            g.reshape(t, &[b, h, s, dh])
        };
        let (q, k, v) = (part(0), part(1), part(2));
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = g.add_broadcast(scores, bias);
        let attn = g.softmax_last(scores);
        let out = g.matmul(attn, v);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, s, e]);
        Self::linear(g, p, &layer.proj, out)
    }

    fn block<T: Real>(&self, g: &Graph<T>, p: &Bound, block: &Block, mut x: Var) -> Var {
        let s = g.shape(x)[1];
        let bias = g.relative_bias(p.var(block.rel_bias), s, self.max_offset);
        for layer in &block.layers {
            let h = Self::norm(g, p, &layer.ln1, x);
            let h = self.attention(g, p, layer, h, bias);
            x = g.add(x, h);
            let h = Self::norm(g, p, &layer.ln2, x);
            let h = Self::linear(g, p, &layer.ff1, h);
            let h = g.gelu(h);
            let h = Self::linear(g, p, &layer.ff2, h);
            x = g.add(x, h);
        }
        Self::norm(g, p, &block.ln_out, x)
    }

    /// Prepends a `[E]` token to every sequence of `x: [B, F, E]`.
    fn prepend<T: Real>(&self, g: &Graph<T>, token: Var, x: Var, batch: usize) -> Var {
        let e = self.model_dim;
        let zeros = g.constant(Tensor::zeros(&[batch, 1, e]));
        let t = g.add_broadcast(zeros, token);
        g.concat(&[t, x], 1)
    }

    /// `x, y: [B, F, D]` latents -> `z: [B, E]`.
    pub fn embed<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var, y: Var) -> Var {
        let shape = g.shape(x);
        let b = shape[0];
        let pair = g.concat(&[x, y], 2);
        let h = Self::linear(g, p, &self.pair_in, pair);
        let seq = self.prepend(g, p.var(self.system_token), h, b);
        let out = self.block(g, p, &self.embed, seq);
        let z = g.slice(out, 1, 0, 1);
        g.reshape(z, &[b, self.model_dim])
    }

    /// `z: [B, E]`, `x2: [B, F, D]` -> predicted latents `[B, F, D]`.
    pub fn predict<T: Real>(&self, g: &Graph<T>, p: &Bound, z: Var, x2: Var) -> Var {
        let shape = g.shape(x2);
        let (b, f) = (shape[0], shape[1]);
        let h = Self::linear(g, p, &self.query_in, x2);
        let z3 = g.reshape(z, &[b, 1, self.model_dim]);
        let seq = g.concat(&[z3, h], 1);
        let out = self.block(g, p, &self.predict, seq);
        let frames = g.slice(out, 1, 1, f);
        let y = Self::linear(g, p, &self.head, frames);
        if self.residual_skip {
            g.add(y, x2)
        } else {
            y
        }
    }

    /// Parameter-name prefix of the layer a selector refers to.
    pub fn selector_prefix(&self, sel: LayerSelector) -> Result<String> {
        match sel {
            LayerSelector::LastPredict => Ok(format!("predict.layer{}.", self.predict.layers.len() - 1)),
            LayerSelector::Predict(i) if i < self.predict.layers.len() => Ok(format!("predict.layer{i}.")),
            LayerSelector::Embed(i) if i < self.embed.layers.len() => Ok(format!("embed.layer{i}.")),
            LayerSelector::Head => Ok("head.".to_string()),
            other => Err(Error::param("layer_selector", format!("{other:?} does not exist"))),
        }
    }
}

/// Embedding of one system, plus its source id for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemEmbedding {
    pub z: Vec<f32>,
    pub system_id: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTrainReport {
    pub loss: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub contrastive: Vec<f64>,
    /// One-shot RMSE on a fixed validation set before training and after each epoch.
    pub validation_rmse: Vec<f64>,
    pub steps: u64,
}

impl BehaviorTrainReport {
    fn push_epoch(&mut self, sums: [f64; 3], steps: usize) {
        let n = steps as f64;
        self.loss.push(sums[0] / n);
        self.reconstruction.push(sums[1] / n);
        self.contrastive.push(sums[2] / n);
    }
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::TrainingDiverged { detail, .. } => Error::TrainingDiverged { epoch, detail },
        other => other,
    }
}

/// Latent inputs of one batch, each `[B, F, D]`, and the query outputs `[B, 1, len]`.
struct BatchVars {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    target: Var,
    len: usize,
}

fn encoded_vars(g: &Graph<f32>, batch: &[(&EncodedPair, &EncodedPair)]) -> Result<BatchVars> {
    let len = batch[0].1.y_samples.len();
    if batch.iter().any(|(_, q)| q.y_samples.len() != len) {
        return Err(Error::Dimension("query outputs differ in length".into()));
    }
    let latents = |query: bool, output: bool| -> Result<Var> {
        let seqs: Vec<&TokenSequence> = batch
            .iter()
            .map(|(a, q)| {
                let e = if query { q } else { a };
                if output { &e.y } else { &e.x }
            })
            .collect();
        Ok(g.constant(stack(&seqs)?))
    };
    let x1 = latents(false, false)?;
    let y1 = latents(false, true)?;
    let x2 = latents(true, false)?;
    let y2 = latents(true, true)?;
    let target = batch.iter().flat_map(|(_, q)| q.y_samples.iter().copied()).collect();
    Ok(BatchVars { x1, y1, x2, y2, target: g.constant(Tensor::new(&[batch.len(), 1, len], target)), len })
}

/// Record indices grouped by system, for sampling B systems x 2 pairs.
struct SystemGroups {
    systems: Vec<u64>,
    members: HashMap<u64, Vec<usize>>,
    batch: usize,
}

impl SystemGroups {
    fn new(ids: impl Iterator<Item = u64>, batch: usize) -> Result<SystemGroups> {
        let mut members: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, id) in ids.enumerate() {
            members.entry(id).or_default().push(i);
        }
        let mut systems: Vec<u64> = members.iter().filter(|(_, v)| v.len() >= 2).map(|(&k, _)| k).collect();
        systems.sort_unstable();
        if systems.len() < batch {
            return Err(Error::param(
                "batch_systems",
                format!("{batch} exceeds the {} systems with two or more pairs", systems.len()),
            ));
        }
        Ok(SystemGroups { systems, members, batch })
    }

    /// Distinct systems, each with an ordered pair of distinct records.
    fn sample(&self, rng: &mut Prng) -> Vec<(usize, usize)> {
        self.systems
            .choose_multiple(rng, self.batch)
            .map(|s| {
                let idx = &self.members[s];
                let a = rng.random_range(0..idx.len());
                let mut b = rng.random_range(0..idx.len() - 1);
                if b >= a {
                    b += 1;
                }
                (idx[a], idx[b])
            })
            .collect()
    }
}

/// First two records of up to 64 test systems, as (prompt, query) pairs.
fn validation_records(corpus: &Corpus) -> Result<Vec<Vec<CorpusRecord>>> {
    let mut out = Vec::new();
    for id in corpus.system_ids(Split::Test).into_iter().take(64) {
        let mut recs = corpus.system_records(id)?;
        if recs.len() >= 2 {
            recs.truncate(2);
            out.push(recs);
        }
    }
    Ok(out)
}

/// Trains a behavior model in either mode. Two-stage mode keeps `codec`
/// frozen; joint mode trains a fresh codec with `codec`'s configuration.
pub fn train_behavior(
    corpus: &Corpus,
    codec: &Codec,
    config: BehaviorConfig,
    seed: u64,
    mode: TrainMode,
) -> Result<(BehaviorModel, Codec, BehaviorTrainReport)> {
    match mode {
        TrainMode::TwoStage => {
            let (model, report) = BehaviorModel::train(config, corpus, codec, seed)?;
            Ok((model, codec.clone(), report))
        }
        TrainMode::Joint => BehaviorModel::train_joint(config, codec.config().clone(), corpus, seed),
    }
}

#[derive(Clone, Debug)]
pub struct BehaviorModel {
    config: BehaviorConfig,
    net: BehaviorNet,
    params: ParamStore<f32>,
    latent_dim: usize,
    trained: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: BehaviorConfig,
    latent_dim: usize,
}

/// Latents `[F, D]` of several sequences stacked to `[B, F, D]`.
fn stack(tokens: &[&TokenSequence]) -> Result<Tensor<f32>> {
    let (f, d) = (tokens[0].frames, tokens[0].dim);
    if tokens.iter().any(|t| t.frames != f || t.dim != d) {
        return Err(Error::Dimension("token sequences differ in shape".into()));
    }
    Ok(Tensor::new(&[tokens.len(), f, d], tokens.iter().flat_map(|t| t.latents.iter().copied()).collect()))
}

/// Encoded training pair plus the raw target output.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    pub system_id: u64,
    pub pair_index: usize,
    pub x: TokenSequence,
    pub y: TokenSequence,
    pub x_samples: Vec<f32>,
    pub y_samples: Vec<f32>,
}

/// Encodes every record of a split, batching equal-length signals.
pub fn encode_split(corpus: &Corpus, codec: &Codec, split: Split) -> Result<Vec<EncodedPair>> {
    let records: Vec<CorpusRecord> = corpus.iterate(split, 0).collect::<Result<_>>()?;
    encode_records(&records, codec)
}

pub fn encode_records(records: &[CorpusRecord], codec: &Codec) -> Result<Vec<EncodedPair>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let xs: Vec<&Signal> = chunk.iter().map(|r| &r.x).collect();
        let ys: Vec<&Signal> = chunk.iter().map(|r| &r.y).collect();
        let tx = codec.encode_batch(&xs)?;
        let ty = codec.encode_batch(&ys)?;
        for ((r, x), y) in chunk.iter().zip(tx).zip(ty) {
            out.push(EncodedPair {
                system_id: r.system_id,
                pair_index: r.pair_index,
                x,
                y,
                x_samples: r.x.samples().iter().map(|&v| v as f32).collect(),
                y_samples: r.y.samples().iter().map(|&v| v as f32).collect(),
            });
        }
    }
    Ok(out)
}

impl BehaviorModel {
    pub fn new(config: BehaviorConfig, latent_dim: usize, seed: u64) -> Result<BehaviorModel> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = BehaviorNet::build(&config, latent_dim, &mut store, &mut prng(seed));
        Ok(BehaviorModel { config, net, params: store, latent_dim, trained: false })
    }

    pub fn config(&self) -> &BehaviorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn net(&self) -> &BehaviorNet {
        &self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("behavior model has not been trained".into()))
        }
    }

    fn check_codec(&self, codec: &Codec) -> Result<()> {
        if codec.config().latent_dim != self.latent_dim {
            return Err(Error::Dimension(format!(
                "codec latent width {} does not match model width {}",
                codec.config().latent_dim,
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Embeddings for a batch of (x, y) token pairs.
    pub fn embed_batch(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Result<Vec<SystemEmbedding>> {
        self.require_trained()?;
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (x, y) in pairs {
            if x.frames != y.frames {
                return Err(Error::Dimension(format!("x has {} frames, y has {}", x.frames, y.frames)));
            }
            if x.dim != self.latent_dim || y.dim != self.latent_dim {
                return Err(Error::Dimension(format!("latent width {} / {} vs {}", x.dim, y.dim, self.latent_dim)));
            }
        }
        let xs: Vec<&TokenSequence> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<&TokenSequence> = pairs.iter().map(|p| p.1).collect();
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let x = g.input(stack(&xs)?);
        let y = g.input(stack(&ys)?);
        let z = self.net.embed(&g, &p, x, y);
        let zv = g.value(z);
        let e = self.config.model_dim;
        Ok(zv.data().chunks(e).map(|c| SystemEmbedding { z: c.to_vec(), system_id: None }).collect())
    }

    pub fn embed_system(&self, x: &TokenSequence, y: &TokenSequence) -> Result<SystemEmbedding> {
        Ok(self.embed_batch(&[(x, y)])?.remove(0))
    }

    /// Predicted latent frames for a batch of (embedding, query) pairs.
    pub fn predict_latents(&self, queries: &[(&SystemEmbedding, &TokenSequence)]) -> Result<Vec<TokenSequence>> {
        self.require_trained()?;
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let e = self.config.model_dim;
        if let Some((z, _)) = queries.iter().find(|(z, _)| z.z.len() != e) {
            return Err(Error::Dimension(format!("embedding of width {} for model width {e}", z.z.len())));
        }
        let xs: Vec<&TokenSequence> = queries.iter().map(|q| q.1).collect();
        let zs: Vec<f32> = queries.iter().flat_map(|q| q.0.z.iter().copied()).collect();
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let z = g.input(Tensor::new(&[queries.len(), e], zs));
        let x = g.input(stack(&xs)?);
        let y = self.net.predict(&g, &p, z, x);
        let yv = g.value(y);
        let per = yv.dim(1) * yv.dim(2);
        Ok(xs
            .iter()
            .enumerate()
            .map(|(i, x)| TokenSequence {
                frames: x.frames,
                dim: x.dim,
                n_codebooks: 0,
                indices: Vec::new(),
                latents: yv.data()[i * per..(i + 1) * per].to_vec(),
                original_length: x.original_length,
                scale: 1.0,
            })
            .collect())
    }

    /// Predicted output signals (normalized units, scale 1).
    pub fn predict_batch(&self, queries: &[(&SystemEmbedding, &TokenSequence)], codec: &Codec) -> Result<Vec<Signal>> {
        self.check_codec(codec)?;
        let latents = self.predict_latents(queries)?;
        let refs: Vec<&TokenSequence> = latents.iter().collect();
        codec.decode_batch(&refs)
    }

    pub fn predict(&self, z: &SystemEmbedding, x2: &TokenSequence, codec: &Codec) -> Result<Signal> {
        Ok(self.predict_batch(&[(z, x2)], codec)?.remove(0))
    }

    /// Embeds the prompt pair and predicts the query output. Inputs are
    /// normalized before encoding; the result is in normalized units.
    pub fn one_shot(&self, codec: &Codec, prompt_x: &Signal, prompt_y: &Signal, query_x: &Signal) -> Result<Signal> {
        self.check_codec(codec)?;
        if prompt_x.len() != prompt_y.len() {
            return Err(Error::Dimension(format!("prompt lengths {} and {}", prompt_x.len(), prompt_y.len())));
        }
        let px = codec.encode(&prompt_x.normalize())?;
        let py = codec.encode(&prompt_y.normalize())?;
        let qx = codec.encode(&query_x.normalize())?;
        if px.frames != qx.frames {
            return Err(Error::Dimension(format!("prompt has {} frames, query has {}", px.frames, qx.frames)));
        }
        let z = self.embed_system(&px, &py)?;
        self.predict(&z, &qx, codec)
    }

    /// Signal-domain reconstruction plus weighted auxiliary and contrastive
    /// terms; returns `(total, reconstruction, contrastive)`.
    fn objective(&self, g: &Graph<f32>, p: &Bound, cp: &Bound, decoder: &CodecNet, v: &BatchVars, use_contrastive: bool) -> (Var, f64, f64) {
        let b = g.shape(v.x1)[0];
        let z = self.net.embed(g, p, v.x1, v.y1);
        let pred = self.net.predict(g, p, z, v.x2);
        let zt = g.permute(pred, &[0, 2, 1]);
        let yhat = decoder.decode(g, cp, zt);
        let yhat = g.slice(yhat, 2, 0, v.len);
        let rec = g.mse(yhat, v.target);
        let rec_v = g.value(rec).item() as f64;
        let mut loss = rec;
        if self.config.latent_weight > 0.0 {
            let l = g.mse(pred, v.y2);
            let l = g.scale(l, self.config.latent_weight as f32);
            loss = g.add(loss, l);
        }
        let mut con_v = 0.0;
        if use_contrastive && self.config.lambda > 0.0 && b >= 2 {
            let zp = self.net.embed(g, p, v.x2, v.y2);
            let c = contrastive_loss_graph(g, z, zp, self.config.temperature);
            con_v = g.value(c).item() as f64;
            let c = g.scale(c, self.config.lambda as f32);
            loss = g.add(loss, c);
        }
        (loss, rec_v, con_v)
    }

    /// One optimizer step on pre-encoded `(prompt, query)` pairs.
    fn step(
        &mut self,
        codec: &Codec,
        batch: &[(&EncodedPair, &EncodedPair)],
        adam: &mut Adam<f32>,
        lr: f64,
        use_contrastive: bool,
    ) -> Result<(f64, f64, f64)> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        let cp = codec.params().bind_frozen(&g);
        let v = encoded_vars(&g, batch)?;
        let (loss, rec, con) = self.objective(&g, &p, &cp, codec.net(), &v, use_contrastive);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::TrainingDiverged { epoch: 0, detail: format!("loss {lv}") });
        }
        let mut grads = g.backward(loss);
        let gl = p.collect_grads(&self.params, &mut grads);
        adam.step(&mut self.params, gl, lr);
        Ok((lv, rec, con))
    }

    /// Mean one-shot RMSE of `(prompt, query)` pairs in normalized units.
    pub fn validation_rmse(&self, codec: &Codec, pairs: &[(&EncodedPair, &EncodedPair)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::param("pairs", "no validation pairs"));
        }
        let mut probe = self.clone();
        probe.trained = true;
        let mut total = 0.0;
        for chunk in pairs.chunks(32) {
            let prompts: Vec<(&TokenSequence, &TokenSequence)> = chunk.iter().map(|(a, _)| (&a.x, &a.y)).collect();
            let zs = probe.embed_batch(&prompts)?;
            let queries: Vec<(&SystemEmbedding, &TokenSequence)> = zs.iter().zip(chunk).map(|(z, (_, q))| (z, &q.x)).collect();
            let ys = probe.predict_batch(&queries, codec)?;
            for (y, (_, q)) in ys.iter().zip(chunk) {
                let se: f64 = y.samples().iter().zip(&q.y_samples).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                total += (se / y.len() as f64).sqrt();
            }
        }
        Ok(total / pairs.len() as f64)
    }

    /// Two-stage training on a frozen, trained codec.
    pub fn train(config: BehaviorConfig, corpus: &Corpus, codec: &Codec, seed: u64) -> Result<(BehaviorModel, BehaviorTrainReport)> {
        let encoded = encode_split(corpus, codec, Split::Train)?;
        let val = encode_records(&validation_records(corpus)?.concat(), codec)?;
        let mut model = BehaviorModel::new(config, codec.config().latent_dim, derive_seed(seed, 0xbe4, 1))?;
        let report = model.train_on(&encoded, &val, codec, seed)?;
        Ok((model, report))
    }

    /// Trains on pre-encoded pairs grouped by system id. `validation` holds
    /// consecutive (prompt, query) pairs; when empty, training systems are used.
    pub fn train_on(&mut self, encoded: &[EncodedPair], validation: &[EncodedPair], codec: &Codec, seed: u64) -> Result<BehaviorTrainReport> {
        self.check_codec(codec)?;
        codec.require_trained()?;
        let groups = SystemGroups::new(encoded.iter().map(|e| e.system_id), self.config.batch_systems)?;
        let cfg = self.config.clone();
        let mut rng = prng(derive_seed(seed, 0xbe4, 2));
        let val_refs: Vec<(&EncodedPair, &EncodedPair)> = if validation.len() >= 2 {
            validation.chunks_exact(2).map(|c| (&c[0], &c[1])).collect()
        } else {
            groups.systems.iter().take(64).map(|s| (&encoded[groups.members[s][0]], &encoded[groups.members[s][1]])).collect()
        };
        let steps_per_epoch = cfg.steps_per_epoch_for(groups.systems.len());
        let total = (steps_per_epoch * cfg.epochs) as u64;
        let mut adam = Adam::new(self.params.len());
        let mut report = BehaviorTrainReport { validation_rmse: vec![self.validation_rmse(codec, &val_refs)?], ..Default::default() };
        for epoch in 0..cfg.epochs {
            let mut sums = [0.0; 3];
            for _ in 0..steps_per_epoch {
                let batch: Vec<(&EncodedPair, &EncodedPair)> =
                    groups.sample(&mut rng).into_iter().map(|(a, b)| (&encoded[a], &encoded[b])).collect();
                let lr = cosine_lr(cfg.learning_rate, report.steps, total, 0.1);
                let (l, r, c) = self.step(codec, &batch, &mut adam, lr, true).map_err(|e| at_epoch(e, epoch))?;
                report.steps += 1;
                sums[0] += l;
                sums[1] += r;
                sums[2] += c;
            }
            report.push_epoch(sums, steps_per_epoch);
            report.validation_rmse.push(self.validation_rmse(codec, &val_refs)?);
        }
        self.trained = true;
        Ok(report)
    }

    /// End-to-end training of a fresh codec together with the behavior
    /// model. The codec's own reconstruction and commitment loss is added to
    /// the behavior objective and both parameter sets receive gradients.
    pub fn train_joint(
        config: BehaviorConfig,
        codec_config: CodecConfig,
        corpus: &Corpus,
        seed: u64,
    ) -> Result<(BehaviorModel, Codec, BehaviorTrainReport)> {
        let mut codec = Codec::new(codec_config, derive_seed(seed, 0xc0dec, 1))?;
        let mut model = BehaviorModel::new(config, codec.config().latent_dim, derive_seed(seed, 0xbe4, 1))?;
        let records: Vec<CorpusRecord> = corpus.iterate(Split::Train, 0).collect::<Result<_>>()?;
        let groups = SystemGroups::new(records.iter().map(|r| r.system_id), model.config.batch_systems)?;
        let val_records = validation_records(corpus)?.concat();
        let t = corpus.length();
        let r = codec.ratio();
        let padded = frame_count(t, r) * r;
        let cfg = model.config.clone();
        let ccfg = codec.config().clone();
        let b = cfg.batch_systems;
        let quantize = ccfg.n_codebooks > 0;
        let mut rng = prng(derive_seed(seed, 0xbe4, 3));
        let steps_per_epoch = cfg.steps_per_epoch_for(groups.systems.len());
        let total = (steps_per_epoch * cfg.epochs) as u64;
        let mut adam = Adam::new(model.params.len());
        let mut codec_adam = Adam::new(codec.params().len());
        let mut report = BehaviorTrainReport::default();
        let mut codebooks_ready = false;

        // Stacks x1, y1, x2, y2 of every sampled system as `[4B, 1, padded]`.
        let gather = |picked: &[(usize, usize)]| {
            let mut data = vec![0.0f32; 4 * b * padded];
            for (i, &(a, q)) in picked.iter().enumerate() {
                let sigs = [&records[a].x, &records[a].y, &records[q].x, &records[q].y];
                for (slot, s) in sigs.iter().enumerate() {
                    let row = (slot * b + i) * padded;
                    for (j, &v) in s.samples().iter().enumerate() {
                        data[row + j] = v as f32;
                    }
                }
            }
            Tensor::new(&[4 * b, 1, padded], data)
        };

        let initial = {
            let mut probe = codec.clone();
            probe.mark_trained();
            let val = encode_records(&val_records, &probe)?;
            let refs: Vec<_> = val.chunks_exact(2).map(|c| (&c[0], &c[1])).collect();
            model.validation_rmse(&probe, &refs)?
        };
        report.validation_rmse.push(initial);

        for epoch in 0..cfg.epochs {
            if quantize && epoch >= ccfg.warmup_epochs && !codebooks_ready {
                let mut latents = Vec::new();
                while latents.len() / ccfg.latent_dim < 4 * ccfg.codebook_size {
                    let x = gather(&groups.sample(&mut rng));
                    let g = Graph::new();
                    let cp = codec.params().bind_frozen(&g);
                    let xv = g.input(x);
                    let e = codec.net().encode(&g, &cp, xv);
                    let ev = g.value(e);
                    latents.extend(swap_last_two(ev.data(), ev.dim(0), ev.dim(1), ev.dim(2), false));
                }
                codec.kmeans_init(&latents, &mut rng);
                codebooks_ready = true;
            }
            let mut sums = [0.0; 3];
            let mut last_inputs = Vec::new();
            for _ in 0..steps_per_epoch {
                let picked = groups.sample(&mut rng);
                let x = gather(&picked);
                let g = Graph::new();
                let p = model.params.bind(&g);
                let cp = codec.params().bind(&g);
                let xv = g.input(x);
                let e = codec.net().encode(&g, &cp, xv);
                let mut step_q = None;
                let (z, commit) = if codebooks_ready {
                    let ev = g.value(e);
                    let (q, idx, inputs) = codec.quantize_latents(&ev);
                    step_q = Some((idx, inputs));
                    let q = Tensor::new(ev.shape(), q);
                    let qc = g.constant(q.clone());
                    (g.straight_through(e, q), Some(g.mse(e, qc)))
                } else {
                    (e, None)
                };
                let xr = codec.net().decode(&g, &cp, z);
                let mut signal_loss = g.mse(xr, xv);
                if let Some(c) = commit {
                    let c = g.scale(c, ccfg.beta as f32);
                    signal_loss = g.add(signal_loss, c);
                }
                let zl = g.permute(z, &[0, 2, 1]);
                let part = |k| g.slice(zl, 0, k * b, b);
                let target: Vec<f32> = picked.iter().flat_map(|&(_, q)| records[q].y.samples().iter().map(|&v| v as f32)).collect();
                let v = BatchVars {
                    x1: part(0),
                    y1: part(1),
                    x2: part(2),
                    y2: part(3),
                    target: g.constant(Tensor::new(&[b, 1, t], target)),
                    len: t,
                };
                let (loss, rec, con) = model.objective(&g, &p, &cp, codec.net(), &v, true);
                let loss = g.add(loss, signal_loss);
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, detail: format!("loss {lv} at step {}", report.steps) });
                }
                let mut grads = g.backward(loss);
                let gl = p.collect_grads(&model.params, &mut grads);
                let cgl = cp.collect_grads(codec.params(), &mut grads);
                let lr = cosine_lr(cfg.learning_rate, report.steps, total, 0.1);
                adam.step(&mut model.params, gl, lr);
                codec_adam.step(codec.params_mut(), cgl, lr);
                if let Some((idx, inputs)) = step_q {
                    codec.ema_update(&idx, &inputs);
                    last_inputs = inputs;
                }
                report.steps += 1;
                sums[0] += lv;
                sums[1] += rec;
                sums[2] += con;
            }
            if codebooks_ready && !last_inputs.is_empty() {
                codec.reseed_dead(&last_inputs, &mut rng);
            }
            report.push_epoch(sums, steps_per_epoch);
            let mut probe = codec.clone();
            probe.mark_trained();
            let val = encode_records(&val_records, &probe)?;
            let refs: Vec<_> = val.chunks_exact(2).map(|c| (&c[0], &c[1])).collect();
            report.validation_rmse.push(model.validation_rmse(&probe, &refs)?);
        }
        codec.mark_trained();
        model.trained = true;
        Ok((model, codec, report))
    }

    /// Updates only the selected layer on `(prompt, query)` examples.
    ///
    /// Each epoch is one full-batch step over all examples. Every parameter
    /// outside the layer is left bit-identical.
    pub fn finetune_single_layer(
        &self,
        codec: &Codec,
        examples: &[(EncodedPair, EncodedPair)],
        selector: LayerSelector,
        epochs: usize,
        learning_rate: f64,
    ) -> Result<BehaviorModel> {
        self.require_trained()?;
        if examples.is_empty() {
            return Err(Error::param("examples", "finetuning needs at least one example"));
        }
        self.check_codec(codec)?;
        let mut model = self.clone();
        if epochs == 0 {
            return Ok(model);
        }
        let prefix = self.net.selector_prefix(selector)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let on = model.params.name(id).starts_with(&prefix);
            model.params.set_trainable(id, on);
        }
        let mut adam = Adam::new(model.params.len());
        let batch: Vec<(&EncodedPair, &EncodedPair)> = examples.iter().map(|(a, b)| (a, b)).collect();
        for epoch in 0..epochs {
            model.step(codec, &batch, &mut adam, learning_rate, false).map_err(|e| at_epoch(e, epoch))?;
        }
        model.params.set_all_trainable(true);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let header = CheckpointHeader { config: self.config.clone(), latent_dim: self.latent_dim };
        let mut w = Writer::new(MAGIC, &header)?;
        w.u8(self.trained as u8);
        w.params(&self.params);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<BehaviorModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (mut r, header): (Reader, CheckpointHeader) = Reader::open(path, &bytes, MAGIC)?;
        header
            .config
            .validate()
            .map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: format!("config: {e}") })?;
        let mut model = BehaviorModel::new(header.config, header.latent_dim, 0)?;
        model.trained = r.u8()? != 0;
        r.params_into(&mut model.params)?;
        r.finish()?;
        Ok(model)
    }
}
