//! Signal codec: strided convolutional encoder, residual vector quantizer and
//! transposed-convolution decoder, trained on reconstruction error.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tape::{cosine_lr, Adam, Bound, Conv1dGeometry, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::checkpoint::{Reader, Writer};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, prng, Prng};
use crate::signals::Signal;

pub const MAGIC: &[u8; 8] = b"ICLCDC01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Per-stage downsampling; their product is the frame length R.
    pub strides: Vec<usize>,
    pub latent_dim: usize,
    /// Zero bypasses the quantizer (plain autoencoder).
    pub n_codebooks: usize,
    pub codebook_size: usize,
    /// Channels after the input convolution; doubled by every stage.
    pub channels: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; zero means one pass over the training signals.
    pub steps_per_epoch: usize,
    /// Training window length; zero trains on whole signals.
    pub crop: usize,
    pub kmeans_iters: usize,
    /// Epochs trained without the quantizer before codebooks are initialized.
    pub warmup_epochs: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            strides: vec![4, 4, 4],
            latent_dim: 64,
            n_codebooks: 4,
            codebook_size: 1024,
            channels: 16,
            beta: 0.25,
            ema_decay: 0.99,
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 30,
            steps_per_epoch: 0,
            crop: 512,
            kmeans_iters: 10,
            warmup_epochs: 0,
        }
    }
}

impl CodecConfig {
    /// Downsampling 320, latent width 128, eight codebooks.
    pub fn paper() -> Self {
        CodecConfig { strides: vec![4, 4, 4, 5], latent_dim: 128, n_codebooks: 8, crop: 1920, ..Default::default() }
    }

    pub fn ratio(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.iter().any(|&s| s < 2) {
            return Err(Error::param("strides", format!("{:?}: every stride must be >= 2", self.strides)));
        }
        if self.latent_dim == 0 {
            return Err(Error::param("latent_dim", "must be positive"));
        }
        if self.n_codebooks > 0 && self.codebook_size < 2 {
            return Err(Error::param("codebook_size", format!("{} < 2", self.codebook_size)));
        }
        if self.channels == 0 {
            return Err(Error::param("channels", "must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::param("beta", format!("{} must be >= 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", format!("{} not within [0, 1)", self.ema_decay)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.crop != 0 && (self.crop < self.ratio() || self.crop % self.ratio() != 0) {
            return Err(Error::param("crop", format!("{} must be a positive multiple of {}", self.crop, self.ratio())));
        }
        Ok(())
    }
}

/// `ceil(length / ratio)`.
pub fn frame_count(length: usize, ratio: usize) -> usize {
    length.div_ceil(ratio)
}

/// Quantized latent frames of one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub frames: usize,
    pub dim: usize,
    pub n_codebooks: usize,
    /// Row-major `frames x n_codebooks`.
    pub indices: Vec<u32>,
    /// Row-major `frames x dim`.
    pub latents: Vec<f32>,
    pub original_length: usize,
    pub scale: f64,
}

impl TokenSequence {
    pub fn frame(&self, f: usize) -> &[f32] {
        &self.latents[f * self.dim..(f + 1) * self.dim]
    }
}

/// One RVQ stage. Entry 0 is pinned to the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    entries: Vec<f32>,
    usage: Vec<u64>,
    ema_count: Vec<f32>,
    ema_sum: Vec<f32>,
}

impl Codebook {
    pub fn zeros(size: usize, dim: usize) -> Codebook {
        Codebook {
            size,
            dim,
            entries: vec![0.0; size * dim],
            usage: vec![0; size],
            ema_count: vec![0.0; size],
            ema_sum: vec![0.0; size * dim],
        }
    }

    /// Builds a stage from explicit entries (no zero pinning).
    pub fn from_entries(size: usize, dim: usize, entries: Vec<f32>) -> Result<Codebook> {
        if entries.len() != size * dim {
            return Err(Error::Dimension(format!("{} values for a {size} x {dim} codebook", entries.len())));
        }
        Ok(Codebook { entries, ..Codebook::zeros(size, dim) })
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Index of the nearest entry (Euclidean) to every row of `rows: [n, dim]`.
    fn nearest(&self, rows: &[f32]) -> Vec<u32> {
        let n = rows.len() / self.dim;
        let norms: Vec<f32> = self.entries.chunks(self.dim).map(|e| e.iter().map(|v| v * v).sum()).collect();
        let mut dots = vec![0.0f32; n * self.size];
        f32::gemm(false, true, n, self.size, self.dim, -2.0, rows, &self.entries, 0.0, &mut dots);
        dots.chunks(self.size)
            .map(|d| {
                let mut best = (0, f32::INFINITY);
                for (k, (&v, &nk)) in d.iter().zip(&norms).enumerate() {
                    let dist = v + nk;
                    if dist < best.1 {
                        best = (k, dist);
                    }
                }
                best.0 as u32
            })
            .collect()
    }
}

/// Result of quantizing one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    pub quantized: Vec<f64>,
    /// `|r_0| .. |r_Ncb|`, starting with the input norm.
    pub residual_norms: Vec<f64>,
}

/// Residual vector quantization of `v` by exhaustive nearest-entry search per stage.
pub fn quantize_residual(stages: &[Codebook], v: &[f64]) -> Result<Quantized> {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut r = v.to_vec();
    let mut out = Quantized { indices: Vec::new(), quantized: vec![0.0; v.len()], residual_norms: vec![norm(&r)] };
    for cb in stages {
        if cb.dim != v.len() {
            return Err(Error::Dimension(format!("vector of length {} for codebook width {}", v.len(), cb.dim)));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..cb.size {
            let d: f64 = cb.entry(k).iter().zip(&r).map(|(&e, &x)| (x - e as f64).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        let e = cb.entry(best.0);
        for i in 0..r.len() {
            r[i] -= e[i] as f64;
            out.quantized[i] += e[i] as f64;
        }
        out.indices.push(best.0);
        out.residual_norms.push(norm(&r));
    }
    Ok(out)
}

/// Batched RVQ over rows `[n, dim]`: indices `[n, stages]`, quantized rows,
/// and the residual entering each stage.
fn quantize_rows(stages: &[Codebook], rows: &[f32]) -> (Vec<u32>, Vec<f32>, Vec<Vec<f32>>) {
    let dim = stages[0].dim;
    let n = rows.len() / dim;
    let mut residual = rows.to_vec();
    let mut quantized = vec![0.0f32; rows.len()];
    let mut indices = vec![0u32; n * stages.len()];
    let mut inputs = Vec::with_capacity(stages.len());
    for (s, cb) in stages.iter().enumerate() {
        inputs.push(residual.clone());
        let idx = cb.nearest(&residual);
        for (i, &k) in idx.iter().enumerate() {
            indices[i * stages.len() + s] = k;
            let e = cb.entry(k as usize);
            for d in 0..dim {
                residual[i * dim + d] -= e[d];
                quantized[i * dim + d] += e[d];
            }
        }
    }
    (indices, quantized, inputs)
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geo: Conv1dGeometry,
}

#[derive(Clone, Debug)]
struct ConvT {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

/// Parameter layout and forward pass, generic over the element type.
#[derive(Clone, Debug)]
pub struct CodecNet {
    conv_in: Conv,
    down: Vec<(ResBlock, Conv)>,
    conv_out: Conv,
    dec_in: Conv,
    up: Vec<(ConvT, ResBlock)>,
    dec_out: Conv,
    ratio: usize,
    latent_dim: usize,
}

fn init_uniform(rng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect())
}

fn add_conv(store: &mut ParamStore<f32>, rng: &mut Prng, name: &str, cin: usize, cout: usize, k: usize, geo: Conv1dGeometry) -> Conv {
    let w = store.add(format!("{name}.w"), init_uniform(rng, &[cout, cin, k], cin * k));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    Conv { w, b, geo }
}

fn add_res(store: &mut ParamStore<f32>, rng: &mut Prng, name: &str, c: usize) -> ResBlock {
    ResBlock {
        c1: add_conv(store, rng, &format!("{name}.c1"), c, c, 3, Conv1dGeometry::same(3)),
        c2: add_conv(store, rng, &format!("{name}.c2"), c, c, 1, Conv1dGeometry::same(1)),
    }
}

fn down_geometry(s: usize) -> Conv1dGeometry {
    Conv1dGeometry { stride: s, pad_left: s / 2, pad_right: s - s / 2 }
}

impl CodecNet {
    pub fn build(config: &CodecConfig, store: &mut ParamStore<f32>, rng: &mut Prng) -> CodecNet {
        let c0 = config.channels;
        let conv_in = add_conv(store, rng, "enc.in", 1, c0, 7, Conv1dGeometry::same(7));
        let mut c = c0;
        let mut down = Vec::new();
        for (i, &s) in config.strides.iter().enumerate() {
            let res = add_res(store, rng, &format!("enc.{i}.res"), c);
            let conv = add_conv(store, rng, &format!("enc.{i}.down"), c, 2 * c, 2 * s, down_geometry(s));
            down.push((res, conv));
            c *= 2;
        }
        let conv_out = add_conv(store, rng, "enc.out", c, config.latent_dim, 3, Conv1dGeometry::same(3));
        let dec_in = add_conv(store, rng, "dec.in", config.latent_dim, c, 3, Conv1dGeometry::same(3));
        let mut up = Vec::new();
        for (i, &s) in config.strides.iter().enumerate().rev() {
            let w = store.add(format!("dec.{i}.up.w"), init_uniform(rng, &[c, c / 2, 2 * s], c * 2));
            let b = store.add(format!("dec.{i}.up.b"), Tensor::zeros(&[c / 2]));
            c /= 2;
            let res = add_res(store, rng, &format!("dec.{i}.res"), c);
            up.push((ConvT { w, b, stride: s }, res));
        }
        let dec_out = add_conv(store, rng, "dec.out", c, 1, 7, Conv1dGeometry::same(7));
        CodecNet { conv_in, down, conv_out, dec_in, up, dec_out, ratio: config.ratio(), latent_dim: config.latent_dim }
    }

    fn conv<T: Real>(g: &Graph<T>, p: &Bound, c: &Conv, x: Var) -> Var {
        let y = g.conv1d(x, p.var(c.w), c.geo);
        g.add_channel_bias(y, p.var(c.b))
    }

    fn res<T: Real>(g: &Graph<T>, p: &Bound, r: &ResBlock, x: Var) -> Var {
        let h = g.elu(x);
        let h = Self::conv(g, p, &r.c1, h);
        let h = g.elu(h);
        let h = Self::conv(g, p, &r.c2, h);
        g.add(x, h)
    }

    /// `x: [B, 1, L]` with `L` a multiple of the ratio -> `[B, D, L / R]`.
    pub fn encode<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = Self::conv(g, p, &self.conv_in, x);
        for (res, down) in &self.down {
            h = Self::res(g, p, res, h);
            h = g.elu(h);
            h = Self::conv(g, p, down, h);
        }
        h = g.elu(h);
        Self::conv(g, p, &self.conv_out, h)
    }

    /// `z: [B, D, F]` -> `[B, 1, F * R]`.
    pub fn decode<T: Real>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let mut h = Self::conv(g, p, &self.dec_in, z);
        for (up, res) in &self.up {
            h = g.elu(h);
            let len = g.shape(h)[2];
            let y = g.conv_transpose1d(h, p.var(up.w), up.stride);
            let y = g.slice(y, 2, up.stride / 2, len * up.stride);
            h = g.add_channel_bias(y, p.var(up.b));
            h = Self::res(g, p, res, h);
        }
        h = g.elu(h);
        Self::conv(g, p, &self.dec_out, h)
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

/// Permutes `[B, D, F]` data to `[B, F, D]` rows (or back with `inverse`).
pub(crate) fn swap_last_two(data: &[f32], b: usize, d: usize, f: usize, inverse: bool) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for di in 0..d {
            for fi in 0..f {
                let (src, dst) = (bi * d * f + di * f + fi, bi * f * d + fi * d + di);
                if inverse {
                    out[src] = data[dst];
                } else {
                    out[dst] = data[src];
                }
            }
        }
    }
    out
}

/// Per-epoch training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub loss: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub steps: u64,
    pub reseeded: usize,
}

#[derive(Clone, Debug)]
pub struct Codec {
    config: CodecConfig,
    net: CodecNet,
    params: ParamStore<f32>,
    codebooks: Vec<Codebook>,
    trained: bool,
}

impl Codec {
    /// Randomly initialized, untrained codec.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Codec> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = CodecNet::build(&config, &mut store, &mut prng(seed));
        let codebooks = (0..config.n_codebooks).map(|_| Codebook::zeros(config.codebook_size, config.latent_dim)).collect();
        Ok(Codec { config, net, params: store, codebooks, trained: false })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn net(&self) -> &CodecNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn ratio(&self) -> usize {
        self.config.ratio()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks a codec usable for inference without training (tests, random baselines).
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub(crate) fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("codec has not been trained".into()))
        }
    }

    /// Quantizes encoder output `[B, D, F]`; returns quantized data in the
    /// same layout, indices `[B * F, Ncb]` and the per-stage residual inputs.
    pub(crate) fn quantize_latents(&self, e: &Tensor<f32>) -> (Vec<f32>, Vec<u32>, Vec<Vec<f32>>) {
        let (b, d, f) = (e.dim(0), e.dim(1), e.dim(2));
        if self.codebooks.is_empty() {
            return (e.data().to_vec(), Vec::new(), Vec::new());
        }
        let rows = swap_last_two(e.data(), b, d, f, false);
        let (idx, q, inputs) = quantize_rows(&self.codebooks, &rows);
        (swap_last_two(&q, b, d, f, true), idx, inputs)
    }

    fn padded_batch(&self, signals: &[&[f64]]) -> Result<(Tensor<f32>, usize)> {
        let t = signals[0].len();
        if signals.iter().any(|s| s.len() != t) {
            return Err(Error::Dimension("batch signals differ in length".into()));
        }
        let r = self.ratio();
        if t < r {
            return Err(Error::param("length", format!("signal of {t} samples is shorter than the frame length {r}")));
        }
        let padded = frame_count(t, r) * r;
        let mut data = vec![0.0f32; signals.len() * padded];
        for (i, s) in signals.iter().enumerate() {
            for (j, &v) in s.iter().enumerate() {
                data[i * padded + j] = v as f32;
            }
        }
        Ok((Tensor::new(&[signals.len(), 1, padded], data), padded))
    }

    /// Encodes equal-length signals in one pass.
    pub fn encode_batch(&self, signals: &[&Signal]) -> Result<Vec<TokenSequence>> {
        self.require_trained()?;
        if signals.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(s) = signals.iter().find(|s| s.peak() > 1.0 + 1e-9) {
            return Err(Error::Domain(format!("encoder input must be normalized, peak is {}", s.peak())));
        }
        let slices: Vec<&[f64]> = signals.iter().map(|s| s.samples()).collect();
        let (x, _) = self.padded_batch(&slices)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let xv = g.input(x);
        let e = self.net.encode(&g, &p, xv);
        let ev = g.value(e);
        let (b, d, f) = (ev.dim(0), ev.dim(1), ev.dim(2));
        let (q, idx, _) = self.quantize_latents(&ev);
        let rows = swap_last_two(&q, b, d, f, false);
        let ncb = self.codebooks.len();
        Ok((0..b)
            .map(|i| TokenSequence {
                frames: f,
                dim: d,
                n_codebooks: ncb,
                indices: idx.get(i * f * ncb..(i + 1) * f * ncb).map(<[u32]>::to_vec).unwrap_or_default(),
                latents: rows[i * f * d..(i + 1) * f * d].to_vec(),
                original_length: signals[i].len(),
                scale: signals[i].scale(),
            })
            .collect())
    }

    pub fn encode(&self, s: &Signal) -> Result<TokenSequence> {
        Ok(self.encode_batch(&[s])?.remove(0))
    }

    /// Decodes token sequences that share frame count and original length.
    pub fn decode_batch(&self, tokens: &[&TokenSequence]) -> Result<Vec<Signal>> {
        self.require_trained()?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let (f, d) = (tokens[0].frames, self.config.latent_dim);
        for t in tokens {
            if t.dim != d || t.frames != f || t.latents.len() != f * d {
                return Err(Error::Dimension(format!(
                    "tokens are {} x {} ({} values), decoder expects {f} x {d}",
                    t.frames,
                    t.dim,
                    t.latents.len()
                )));
            }
            if t.original_length > f * self.ratio() || t.original_length == 0 {
                return Err(Error::Dimension(format!("original length {} does not fit {f} frames", t.original_length)));
            }
        }
        let rows: Vec<f32> = tokens.iter().flat_map(|t| t.latents.iter().copied()).collect();
        let z = Tensor::new(&[tokens.len(), d, f], swap_last_two(&rows, tokens.len(), d, f, true));
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let zv = g.input(z);
        let y = self.net.decode(&g, &p, zv);
        let yv = g.value(y);
        let len = yv.dim(2);
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let s: Vec<f64> = yv.data()[i * len..i * len + t.original_length].iter().map(|&v| v as f64).collect();
                Signal::with_scale(s, t.scale)
            })
            .collect()
    }

    pub fn decode(&self, t: &TokenSequence) -> Result<Signal> {
        Ok(self.decode_batch(&[t])?.remove(0))
    }

    /// `decode(encode(s))`.
    pub fn reconstruct(&self, s: &Signal) -> Result<Signal> {
        self.decode(&self.encode(s)?)
    }

    /// Reconstruction loss of the graph path on `x: [B, 1, L]`.
    ///
    /// `quantizer` maps encoder output to its quantized value; when it
    /// returns one, the straight-through estimator and the commitment term
    /// are used. Returns `(total, reconstruction)`.
    pub fn loss_graph<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        quantizer: impl FnOnce(&Tensor<T>) -> Option<Tensor<T>>,
    ) -> (Var, Var) {
        let e = self.net.encode(g, p, x);
        let (z, commit) = match quantizer(&g.value(e)) {
            Some(q) => {
                let qc = g.constant(q.clone());
                (g.straight_through(e, q), Some(g.mse(e, qc)))
            }
            None => (e, None),
        };
        let y = self.net.decode(g, p, z);
        let rec = g.mse(y, x);
        let loss = match commit {
            Some(c) if self.config.beta > 0.0 => {
                let c = g.scale(c, T::lit(self.config.beta));
                g.add(rec, c)
            }
            _ => rec,
        };
        (loss, rec)
    }

    pub(crate) fn kmeans_init(&mut self, latents: &[f32], rng: &mut Prng) {
        let dim = self.config.latent_dim;
        let mut residual = latents.to_vec();
        let n = residual.len() / dim;
        for s in 0..self.codebooks.len() {
            let k = self.config.codebook_size;
            let mut cb = Codebook::zeros(k, dim);
            let picks: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..n)).collect();
            for (j, &i) in picks.iter().enumerate() {
                for d in 0..dim {
                    let jitter: f64 = StandardNormal.sample(rng);
                    cb.entries[(j + 1) * dim + d] = residual[i * dim + d] + 1e-3 * jitter as f32;
                }
            }
            for _ in 0..self.config.kmeans_iters {
                let idx = cb.nearest(&residual);
                let mut sums = vec![0.0f64; k * dim];
                let mut counts = vec![0usize; k];
                for (i, &c) in idx.iter().enumerate() {
                    counts[c as usize] += 1;
                    for d in 0..dim {
                        sums[c as usize * dim + d] += residual[i * dim + d] as f64;
                    }
                }
                for c in 1..k {
                    if counts[c] > 0 {
                        for d in 0..dim {
                            cb.entries[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                        }
                    }
                }
            }
            for c in 0..k {
                cb.ema_count[c] = 1.0;
            }
            cb.ema_sum.copy_from_slice(&cb.entries);
            let idx = cb.nearest(&residual);
            for (i, &c) in idx.iter().enumerate() {
                let e = cb.entry(c as usize).to_vec();
                for d in 0..dim {
                    residual[i * dim + d] -= e[d];
                }
            }
            self.codebooks[s] = cb;
        }
    }

    /// EMA update of every stage from the residuals it saw this step.
    pub(crate) fn ema_update(&mut self, indices: &[u32], inputs: &[Vec<f32>]) {
        let decay = self.config.ema_decay as f32;
        let ncb = self.codebooks.len();
        for (s, cb) in self.codebooks.iter_mut().enumerate() {
            let dim = cb.dim;
            let mut counts = vec![0.0f32; cb.size];
            let mut sums = vec![0.0f32; cb.size * dim];
            for (i, row) in inputs[s].chunks(dim).enumerate() {
                let k = indices[i * ncb + s] as usize;
                counts[k] += 1.0;
                cb.usage[k] += 1;
                for d in 0..dim {
                    sums[k * dim + d] += row[d];
                }
            }
            for k in 1..cb.size {
                cb.ema_count[k] = decay * cb.ema_count[k] + (1.0 - decay) * counts[k];
                for d in 0..dim {
                    cb.ema_sum[k * dim + d] = decay * cb.ema_sum[k * dim + d] + (1.0 - decay) * sums[k * dim + d];
                }
                if cb.ema_count[k] > 1e-5 {
                    for d in 0..dim {
                        cb.entries[k * dim + d] = cb.ema_sum[k * dim + d] / cb.ema_count[k];
                    }
                }
            }
        }
    }

    /// Moves entries unused since the last call onto random residuals.
    pub(crate) fn reseed_dead(&mut self, inputs: &[Vec<f32>], rng: &mut Prng) -> usize {
        let mut reseeded = 0;
        for (s, cb) in self.codebooks.iter_mut().enumerate() {
            let dim = cb.dim;
            let rows: Vec<&[f32]> = inputs[s].chunks(dim).collect();
            for k in 1..cb.size {
                if cb.usage[k] == 0 {
                    if let Some(row) = rows.choose(rng) {
                        cb.entries[k * dim..(k + 1) * dim].copy_from_slice(row);
                        cb.ema_sum[k * dim..(k + 1) * dim].copy_from_slice(row);
                        cb.ema_count[k] = 1.0;
                        reseeded += 1;
                    }
                }
            }
            cb.usage.iter_mut().for_each(|u| *u = 0);
        }
        reseeded
    }

    fn batch_from(&self, signals: &[Vec<f32>], rng: &mut Prng) -> Tensor<f32> {
        let r = self.ratio();
        let b = self.config.batch_size;
        let min_len = signals.iter().map(Vec::len).min().unwrap_or(0);
        let win = if self.config.crop == 0 { min_len.div_ceil(r) * r } else { self.config.crop };
        let mut data = vec![0.0f32; b * win];
        for i in 0..b {
            let s = &signals[rng.random_range(0..signals.len())];
            let start = if s.len() > win { rng.random_range(0..=s.len() - win) } else { 0 };
            let take = win.min(s.len() - start);
            data[i * win..i * win + take].copy_from_slice(&s[start..start + take]);
        }
        Tensor::new(&[b, 1, win], data)
    }

    /// Trains on raw normalized sample sequences. Deterministic in `seed`.
    pub fn train_on(&mut self, signals: &[Vec<f32>], seed: u64) -> Result<CodecTrainReport> {
        if signals.is_empty() {
            return Err(Error::param("signals", "no training signals"));
        }
        let r = self.ratio();
        if let Some(s) = signals.iter().find(|s| s.len() < r) {
            return Err(Error::param("signals", format!("signal of {} samples is shorter than {r}", s.len())));
        }
        let cfg = self.config.clone();
        let mut rng = prng(derive_seed(seed, 0xc0dec, 0));
        let steps_per_epoch = if cfg.steps_per_epoch > 0 {
            cfg.steps_per_epoch
        } else {
            let win = if cfg.crop == 0 { signals[0].len() } else { cfg.crop };
            let total: usize = signals.iter().map(Vec::len).sum();
            (total / (win * cfg.batch_size)).max(1)
        };
        let total_steps = (steps_per_epoch * cfg.epochs) as u64;
        let mut adam = Adam::new(self.params.len());
        let mut report = CodecTrainReport::default();
        let quantize = !self.codebooks.is_empty();
        let mut codebooks_ready = false;
        for epoch in 0..cfg.epochs {
            let warm = epoch < cfg.warmup_epochs;
            if quantize && !warm && !codebooks_ready {
                let mut latents = Vec::new();
                let needed = 4 * cfg.codebook_size;
                while latents.len() / cfg.latent_dim < needed {
                    let x = self.batch_from(signals, &mut rng);
                    let g = Graph::new();
                    let p = self.params.bind_frozen(&g);
                    let xv = g.input(x);
                    let e = self.net.encode(&g, &p, xv);
                    let ev = g.value(e);
                    latents.extend(swap_last_two(ev.data(), ev.dim(0), ev.dim(1), ev.dim(2), false));
                }
                self.kmeans_init(&latents, &mut rng);
                codebooks_ready = true;
            }
            let (mut loss_sum, mut rec_sum) = (0.0, 0.0);
            let mut last_inputs = Vec::new();
            for _ in 0..steps_per_epoch {
                let x = self.batch_from(signals, &mut rng);
                let g = Graph::new();
                let p = self.params.bind(&g);
                let xv = g.input(x);
                let mut step_q = None;
                let (loss, rec) = self.loss_graph(&g, &p, xv, |e| {
                    if quantize && !warm {
                        let (q, idx, inputs) = self.quantize_latents(e);
                        step_q = Some((idx, inputs));
                        Some(Tensor::new(e.shape(), q))
                    } else {
                        None
                    }
                });
                let mut grads = g.backward(loss);
                let gl = p.collect_grads(&self.params, &mut grads);
                let lr = cosine_lr(cfg.learning_rate, report.steps, total_steps, 0.1);
                adam.step(&mut self.params, gl, lr);
                let (loss, rec) = (g.value(loss).item() as f64, g.value(rec).item() as f64);
                if let Some((idx, inputs)) = step_q {
                    self.ema_update(&idx, &inputs);
                    last_inputs = inputs;
                }
                report.steps += 1;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, detail: format!("loss {loss} at step {}", report.steps) });
                }
                loss_sum += loss;
                rec_sum += rec;
            }
            if quantize && !warm {
                report.reseeded += self.reseed_dead(&last_inputs, &mut rng);
            }
            report.loss.push(loss_sum / steps_per_epoch as f64);
            report.reconstruction.push(rec_sum / steps_per_epoch as f64);
        }
        self.trained = true;
        Ok(report)
    }
}

impl Codebook {
    /// Gaussian entries with entry 0 pinned to zero.
    pub fn random(size: usize, dim: usize, std: f64, seed: u64) -> Codebook {
        let mut rng = prng(seed);
        let mut cb = Codebook::zeros(size, dim);
        for v in cb.entries.iter_mut().skip(dim) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (std * n) as f32;
        }
        cb
    }
}

impl Codec {
    /// Trains on every x and y signal of the corpus training split.
    pub fn train(config: CodecConfig, corpus: &Corpus, seed: u64) -> Result<(Codec, CodecTrainReport)> {
        let signals = training_signals(corpus)?;
        let mut codec = Codec::new(config, derive_seed(seed, 0xc0dec, 1))?;
        let report = codec.train_on(&signals, seed)?;
        Ok((codec, report))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut w = Writer::new(MAGIC, &self.config)?;
        w.u8(self.trained as u8);
        w.params(&self.params);
        w.u64(self.codebooks.len() as u64);
        for cb in &self.codebooks {
            w.u64(cb.size as u64);
            w.u64(cb.dim as u64);
            w.f32s(&cb.entries);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Codec> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Codec::from_bytes(path, &bytes)
    }

    pub(crate) fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Codec> {
        let (mut r, config): (Reader, CodecConfig) = Reader::open(path, bytes, MAGIC)?;
        let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
        config.validate().map_err(|e| corrupt(format!("config: {e}")))?;
        let mut codec = Codec::new(config, 0)?;
        codec.trained = r.u8()? != 0;
        r.params_into(&mut codec.params)?;
        let n = r.u64()? as usize;
        if n != codec.codebooks.len() {
            return Err(corrupt(format!("expected {} codebooks, found {n}", codec.codebooks.len())));
        }
        for cb in codec.codebooks.iter_mut() {
            let (size, dim) = (r.u64()? as usize, r.u64()? as usize);
            let entries = r.f32s()?;
            if size != cb.size || dim != cb.dim || entries.len() != size * dim || entries.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("codebook shape or values invalid".into()));
            }
            cb.entries = entries;
        }
        r.finish()?;
        Ok(codec)
    }
}

/// Every x and y of the training split as `f32` sample vectors.
pub fn training_signals(corpus: &Corpus) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for rec in corpus.iterate(Split::Train, 0) {
        let rec = rec?;
        out.push(rec.x.samples().iter().map(|&v| v as f32).collect());
        out.push(rec.y.samples().iter().map(|&v| v as f32).collect());
    }
    Ok(out)
}
