//! Synthetic pretraining corpus: generation, persistence, splits and batching.
//!
//! `corpus.bin` holds the magic bytes followed by tagged, length-prefixed
//! records in system-id order: one system record, then that system's pair
//! records. `manifest.json` carries counts and the SHA-256 of every byte
//! after the magic.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, prng, PRNG_NAME};
use crate::signals::{generate, KindTag, Signal, SignalKind};
use crate::systems::{sample_system, simulate, FilterClass, SystemConfig, SystemSpec};

pub const MAGIC: &[u8; 8] = b"ICLSYS01";
pub const GENERATOR_VERSION: &str = concat!("iclsysid-corpus/", env!("CARGO_PKG_VERSION"));
pub const RECORD_FILE: &str = "corpus.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const REC_SYSTEM: u8 = 0;
const REC_PAIR: u8 = 1;

const STREAM_SYSTEM: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_FAMILY: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_systems: usize,
    pub pairs_per_system: usize,
    pub length: usize,
    pub lti_frac: f64,
    pub train_frac: f64,
    pub systems: SystemConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_systems: 2000,
            pairs_per_system: 3,
            length: 2048,
            lti_frac: 0.5,
            train_frac: 0.9,
            systems: SystemConfig::default(),
        }
    }
}

impl CorpusConfig {
    /// 20,000 systems of length 16,384.
    pub fn paper_scale() -> Self {
        CorpusConfig { n_systems: 20_000, length: 16_384, ..Default::default() }
    }

    pub fn n_test(&self) -> usize {
        ((1.0 - self.train_frac) * self.n_systems as f64).round() as usize
    }

    pub fn n_lti(&self) -> usize {
        (self.lti_frac * self.n_systems as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_systems < 2 {
            return Err(Error::param("n_systems", format!("need at least 2, got {}", self.n_systems)));
        }
        if !(1..=KindTag::ALL.len()).contains(&self.pairs_per_system) {
            return Err(Error::param("pairs_per_system", format!("{} not within [1, 6]", self.pairs_per_system)));
        }
        if self.length < 16 {
            return Err(Error::param("length", format!("need at least 16 samples, got {}", self.length)));
        }
        if !(0.0..=1.0).contains(&self.lti_frac) {
            return Err(Error::param("lti_frac", format!("{} not within [0, 1]", self.lti_frac)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::param("train_frac", format!("{} not within (0, 1)", self.train_frac)));
        }
        let n_test = self.n_test();
        if n_test == 0 || n_test == self.n_systems {
            return Err(Error::param("train_frac", "both splits must be non-empty"));
        }
        self.systems.lti.validate()?;
        self.systems.nti.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub system_id: u64,
    pub pair_index: usize,
    pub input_kind: KindTag,
    pub x: Signal,
    pub y: Signal,
    pub split: Split,
}

/// Ground-truth family of a system, for evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemLabel {
    pub lti: bool,
    pub filter_class: Option<FilterClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub seed: u64,
    pub prng: String,
    pub length: usize,
    pub n_systems: usize,
    pub pairs_per_system: usize,
    pub n_records: usize,
    pub n_lti: usize,
    pub n_nti: usize,
    pub train_systems: usize,
    pub test_systems: usize,
    pub sha256: String,
    pub config: CorpusConfig,
}

/// Deterministic split and family assignment for every system id.
fn assignments(config: &CorpusConfig, seed: u64) -> (Vec<Split>, Vec<bool>) {
    let n = config.n_systems;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut prng(derive_seed(seed, STREAM_SPLIT, 0)));
    let mut split = vec![Split::Train; n];
    for &i in &order[..config.n_test()] {
        split[i] = Split::Test;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut prng(derive_seed(seed, STREAM_FAMILY, 0)));
    let mut lti = vec![false; n];
    for &i in &order[..config.n_lti()] {
        lti[i] = true;
    }
    (split, lti)
}

fn push_record(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Test => 1,
    }
}

/// Serialized records for one system; depends only on `(config, seed, id)`.
fn system_bytes(config: &CorpusConfig, seed: u64, id: u64, split: Split, lti: bool) -> Result<Vec<u8>> {
    let sys_seed = derive_seed(seed, STREAM_SYSTEM, id);
    let spec = sample_system(id, derive_seed(sys_seed, 0, 0), lti, &config.systems)?;
    let mut out = Vec::new();
    let mut payload = Vec::new();
    spec.write_to(&mut payload).expect("write to Vec");
    push_record(&mut out, REC_SYSTEM, &payload);

    let mut kinds = KindTag::ALL.to_vec();
    kinds.shuffle(&mut prng(derive_seed(sys_seed, 1, 0)));
    for (j, &tag) in kinds.iter().take(config.pairs_per_system).enumerate() {
        let kind = SignalKind::sample(tag, config.length, &mut prng(derive_seed(sys_seed, 2, j as u64)));
        let x = generate(&kind, config.length, derive_seed(sys_seed, 3, j as u64))?;
        let y = simulate(&spec, &x)?.normalize();
        payload.clear();
        payload.extend_from_slice(&id.to_le_bytes());
        payload.extend_from_slice(&(j as u32).to_le_bytes());
        payload.push(tag.code());
        payload.push(split_code(split));
        x.write_to(&mut payload).expect("write to Vec");
        y.write_to(&mut payload).expect("write to Vec");
        push_record(&mut out, REC_PAIR, &payload);
    }
    Ok(out)
}

/// Generates all records in memory, in parallel over systems on the current rayon pool.
pub fn build_records(config: &CorpusConfig, seed: u64) -> Result<(Vec<u8>, Manifest)> {
    config.validate()?;
    let (split, lti) = assignments(config, seed);
    let chunks: Vec<Vec<u8>> = (0..config.n_systems)
        .into_par_iter()
        .map(|i| system_bytes(config, seed, i as u64, split[i], lti[i]))
        .collect::<Result<_>>()?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + chunks.iter().map(Vec::len).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    let mut hasher = Sha256::new();
    for c in &chunks {
        hasher.update(c);
        bytes.extend_from_slice(c);
    }
    let n_lti = lti.iter().filter(|&&l| l).count();
    let test_systems = split.iter().filter(|&&s| s == Split::Test).count();
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        prng: PRNG_NAME.to_string(),
        length: config.length,
        n_systems: config.n_systems,
        pairs_per_system: config.pairs_per_system,
        n_records: config.n_systems * config.pairs_per_system,
        n_lti,
        n_nti: config.n_systems - n_lti,
        train_systems: config.n_systems - test_systems,
        test_systems,
        sha256: hex::encode(hasher.finalize()),
        config: config.clone(),
    };
    Ok((bytes, manifest))
}

/// Writes `corpus.bin` and `manifest.json` into `dir`.
pub fn build_corpus(config: &CorpusConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let (bytes, manifest) = build_records(config, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(RECORD_FILE);
    let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug)]
struct PairEntry {
    system_id: u64,
    pair_index: usize,
    kind: KindTag,
    split: Split,
    offset: usize,
}

/// Loaded, hash-verified corpus. Pair records are decoded on demand.
pub struct Corpus {
    path: PathBuf,
    manifest: Manifest,
    bytes: Vec<u8>,
    pairs: Vec<PairEntry>,
    by_system: HashMap<u64, Vec<usize>>,
    systems: HashMap<u64, usize>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Corpus> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| corrupt(&man_path, format!("manifest: {e}")))?;
        let bin = dir.join(RECORD_FILE);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Corpus::from_parts(bin, manifest, bytes)
    }

    /// Verifies and indexes records already in memory.
    pub fn from_parts(path: PathBuf, manifest: Manifest, bytes: Vec<u8>) -> Result<Corpus> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(&path, "bad magic"));
        }
        let digest = hex::encode(Sha256::digest(&bytes[MAGIC.len()..]));
        if digest != manifest.sha256 {
            return Err(corrupt(&path, format!("hash mismatch: file {digest}, manifest {}", manifest.sha256)));
        }
        let mut pairs = Vec::new();
        let mut by_system: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut systems = HashMap::new();
        let mut pos = MAGIC.len();
        while pos < bytes.len() {
            if pos + 9 > bytes.len() {
                return Err(corrupt(&path, "truncated record header"));
            }
            let tag = bytes[pos];
            let len = u64::from_le_bytes(bytes[pos + 1..pos + 9].try_into().unwrap()) as usize;
            let start = pos + 9;
            let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt(&path, "truncated record"))?;
            let body = &bytes[start..end];
            match tag {
                REC_SYSTEM => {
                    let id = u64::from_le_bytes(body.get(1..9).ok_or_else(|| corrupt(&path, "short system"))?.try_into().unwrap());
                    systems.insert(id, start);
                }
                REC_PAIR => {
                    if body.len() < 14 {
                        return Err(corrupt(&path, "short pair record"));
                    }
                    let system_id = u64::from_le_bytes(body[0..8].try_into().unwrap());
                    let pair_index = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
                    let kind = KindTag::from_code(body[12]).ok_or_else(|| corrupt(&path, "unknown input kind"))?;
                    let split = match body[13] {
                        0 => Split::Train,
                        1 => Split::Test,
                        s => return Err(corrupt(&path, format!("unknown split {s}"))),
                    };
                    by_system.entry(system_id).or_default().push(pairs.len());
                    pairs.push(PairEntry { system_id, pair_index, kind, split, offset: start });
                }
                t => return Err(corrupt(&path, format!("unknown record tag {t}"))),
            }
            pos = end;
        }
        if pairs.len() != manifest.n_records || systems.len() != manifest.n_systems {
            return Err(corrupt(&path, "record counts disagree with manifest"));
        }
        Ok(Corpus { path, manifest, bytes, pairs, by_system, systems })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn length(&self) -> usize {
        self.manifest.length
    }

    fn decode(&self, e: &PairEntry) -> Result<CorpusRecord> {
        let mut r = &self.bytes[e.offset + 14..];
        let x = Signal::read_from(&mut r).map_err(|err| corrupt(&self.path, err.to_string()))?;
        let y = Signal::read_from(&mut r).map_err(|err| corrupt(&self.path, err.to_string()))?;
        Ok(CorpusRecord { system_id: e.system_id, pair_index: e.pair_index, input_kind: e.kind, x, y, split: e.split })
    }

    /// Sorted system ids of a split.
    pub fn system_ids(&self, split: Split) -> Vec<u64> {
        let mut ids: Vec<u64> =
            self.by_system.iter().filter(|(_, v)| self.pairs[v[0]].split == split).map(|(&id, _)| id).collect();
        ids.sort_unstable();
        ids
    }

    /// All pairs of one system in pair-index order.
    pub fn system_records(&self, system_id: u64) -> Result<Vec<CorpusRecord>> {
        let idx = self
            .by_system
            .get(&system_id)
            .ok_or_else(|| Error::param("system_id", format!("{system_id} not in corpus")))?;
        let mut recs: Vec<CorpusRecord> = idx.iter().map(|&i| self.decode(&self.pairs[i])).collect::<Result<_>>()?;
        recs.sort_by_key(|r| r.pair_index);
        Ok(recs)
    }

    /// Every record of `split` exactly once, in an order fixed by `shuffle_seed`.
    pub fn iterate(&self, split: Split, shuffle_seed: u64) -> impl Iterator<Item = Result<CorpusRecord>> + '_ {
        let mut idx: Vec<usize> = (0..self.pairs.len()).filter(|&i| self.pairs[i].split == split).collect();
        idx.shuffle(&mut prng(shuffle_seed));
        idx.into_iter().map(move |i| self.decode(&self.pairs[i]))
    }

    /// `batch_systems` distinct systems with two distinct pairs each, as `(first, second)`.
    pub fn sample_contrastive_batch(
        &self,
        split: Split,
        batch_systems: usize,
        seed: u64,
    ) -> Result<Vec<(CorpusRecord, CorpusRecord)>> {
        if batch_systems < 2 {
            return Err(Error::param("batch_systems", format!("need at least 2, got {batch_systems}")));
        }
        if self.manifest.pairs_per_system < 2 {
            return Err(Error::param("pairs_per_system", "contrastive batches need two pairs per system"));
        }
        let ids = self.system_ids(split);
        if batch_systems > ids.len() {
            return Err(Error::param(
                "batch_systems",
                format!("{batch_systems} exceeds the {} systems in the split", ids.len()),
            ));
        }
        let mut rng = prng(seed);
        let chosen: Vec<u64> = ids.choose_multiple(&mut rng, batch_systems).copied().collect();
        chosen
            .into_iter()
            .map(|id| {
                let mut idx = self.by_system[&id].clone();
                idx.shuffle(&mut rng);
                Ok((self.decode(&self.pairs[idx[0]])?, self.decode(&self.pairs[idx[1]])?))
            })
            .collect()
    }

    /// Ground-truth system family. Not used by any training routine.
    pub fn evaluation_label(&self, system_id: u64) -> Result<SystemLabel> {
        let spec = self.system_spec(system_id)?;
        Ok(SystemLabel { lti: spec.is_lti(), filter_class: spec.filter_class() })
    }

    /// Full system parameters, for inspection and evaluation only.
    pub fn system_spec(&self, system_id: u64) -> Result<SystemSpec> {
        let &offset = self
            .systems
            .get(&system_id)
            .ok_or_else(|| Error::param("system_id", format!("{system_id} not in corpus")))?;
        SystemSpec::read_from(&mut &self.bytes[offset..]).map_err(|e| corrupt(&self.path, e.to_string()))
    }
}
