//! Loan-keyed sharding, the per-shard binary cache, and shuffled minibatch streams.
//!
//! Cache layout: `<name>.bin` holds fixed-width little-endian `f32` rows
//! `[state, next_state, period, x_0 .. x_{d-1}]`; `<name>.json` is the sidecar
//! with schema, normalization stats, row count, loan ids and the hash algorithm id.

use std::fs::{self, File};
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher24;

use super::dataset::Dataset;
use super::normalize::NormalizationStats;
use super::schema::FeatureSchema;
use crate::error::{Error, Result};
use crate::state::{StateIndex, K};

/// Second SipHash key word; the first is the user seed.
pub const SHARD_KEY1: u64 = 0x6c6f_616e_7374_6174;
pub const HASH_ALGORITHM_ID: &str = "siphash-2-4;k0=seed;k1=0x6c6f616e73746174;input=utf8(loan_id);shard=hash%num_shards";
pub const CACHE_FORMAT: &str = "loanstate-cache";
pub const CACHE_VERSION: u32 = 1;
const ROW_PREFIX: usize = 3;

/// Keyed 64-bit hash of a loan id.
pub fn loan_hash(loan_id: &str, seed: u64) -> u64 {
    let mut h = SipHasher24::new_with_keys(seed, SHARD_KEY1);
    h.write(loan_id.as_bytes());
    h.finish()
}

/// Shard of a loan; all months of one loan land in the same shard.
pub fn shard_assign(loan_id: &str, num_shards: usize, seed: u64) -> usize {
    assert!(num_shards >= 1, "num_shards must be at least 1");
    (loan_hash(loan_id, seed) % num_shards as u64) as usize
}

/// A minibatch of design rows and next-state targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub type BatchIter<'a> = Box<dyn Iterator<Item = Result<Batch>> + 'a>;

/// Source of shuffled training minibatches.
pub trait BatchSource: Sync {
    fn num_samples(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// One pass over every sample exactly once, in an order fixed by `epoch_seed`.
    fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_>>;

    /// Up to `cap` rows for loss monitoring, deterministic.
    fn eval_rows(&self, cap: usize) -> Result<(Array2<f64>, Vec<usize>)>;
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size < 1 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    Ok(())
}

/// In-memory rows grouped into loan-keyed shards.
#[derive(Debug, Clone)]
pub struct InMemorySource<'a> {
    data: &'a Dataset,
    shards: Vec<Vec<usize>>,
}

impl<'a> InMemorySource<'a> {
    pub fn new(data: &'a Dataset, num_shards: usize, seed: u64) -> Self {
        let idx: Vec<usize> = (0..data.len()).collect();
        Self::from_indices(data, &idx, num_shards, seed)
    }

    /// Rows listed in `idx` (repeats allowed, e.g. a bootstrap resample).
    pub fn from_indices(data: &'a Dataset, idx: &[usize], num_shards: usize, seed: u64) -> Self {
        let num_shards = num_shards.max(1);
        let mut shards = vec![Vec::new(); num_shards];
        for &i in idx {
            shards[shard_assign(&data.loan_id[i], num_shards, seed)].push(i);
        }
        InMemorySource { data, shards }
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    /// Row order of one epoch: shard order shuffled, rows shuffled within each shard.
    pub fn epoch_order(&self, epoch_seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..self.shards.len()).collect();
        order.shuffle(&mut rng);
        let mut out = Vec::with_capacity(self.num_samples());
        for s in order {
            let mut rows = self.shards[s].clone();
            rows.shuffle(&mut rng);
            out.extend(rows);
        }
        out
    }
}

impl BatchSource for InMemorySource<'_> {
    fn num_samples(&self) -> usize {
        self.shards.iter().map(|s| s.len()).sum()
    }

    fn input_dim(&self) -> usize {
        self.data.d_x()
    }

    fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_>> {
        check_batch_size(batch_size)?;
        let order = self.epoch_order(epoch_seed);
        let data = self.data;
        let n = order.len();
        Ok(Box::new((0..n.div_ceil(batch_size)).map(move |b| {
            let idx = &order[b * batch_size..((b + 1) * batch_size).min(n)];
            let (x, targets) = data.gather(idx);
            Ok(Batch { x, targets })
        })))
    }

    fn eval_rows(&self, cap: usize) -> Result<(Array2<f64>, Vec<usize>)> {
        let mut all: Vec<usize> = self.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        let idx: Vec<usize> = if all.len() <= cap {
            all
        } else {
            let step = all.len() as f64 / cap as f64;
            (0..cap).map(|k| all[(k as f64 * step) as usize]).collect()
        };
        Ok(self.data.gather(&idx))
    }
}

/// JSON sidecar of one cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub format: String,
    pub version: u32,
    pub hash_algorithm: String,
    pub seed: u64,
    pub num_shards: usize,
    pub shard: usize,
    pub row_layout: Vec<String>,
    pub row_width: usize,
    pub num_rows: usize,
    /// Rows per current state, in state order.
    pub state_counts: [u64; K],
    pub schema: FeatureSchema,
    pub stats: NormalizationStats,
    pub loan_ids: Vec<String>,
}

/// Paths and parameters of a sharded cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub format: String,
    pub version: u32,
    pub hash_algorithm: String,
    pub num_shards: usize,
    pub seed: u64,
    /// Shard file stems relative to the layout directory.
    pub shards: Vec<String>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl ShardLayout {
    pub fn paths(&self) -> Vec<PathBuf> {
        self.shards.iter().map(|s| self.dir.join(format!("{s}.bin"))).collect()
    }

    pub fn load(dir: &Path) -> Result<ShardLayout> {
        let text = fs::read_to_string(dir.join("layout.json"))?;
        let mut layout: ShardLayout = serde_json::from_str(&text)?;
        if layout.format != CACHE_FORMAT || layout.version != CACHE_VERSION {
            return Err(Error::Parse(format!(
                "unsupported shard layout {} v{}",
                layout.format, layout.version
            )));
        }
        layout.dir = dir.to_path_buf();
        Ok(layout)
    }

    pub fn read_shard(&self, k: usize) -> Result<(Dataset, CacheSidecar)> {
        read_cache(&self.dir.join(&self.shards[k]))
    }

    /// All shards concatenated in shard order.
    pub fn load_dataset(&self) -> Result<(Dataset, CacheSidecar)> {
        let mut parts = Vec::new();
        let mut first = None;
        for k in 0..self.shards.len() {
            let (d, side) = self.read_shard(k)?;
            parts.push(d);
            first.get_or_insert(side);
        }
        let first = first.ok_or_else(|| Error::Empty("layout has no shards".into()))?;
        let refs: Vec<&Dataset> = parts.iter().collect();
        Ok((Dataset::concat(&refs)?, first))
    }
}

impl BatchSource for ShardLayout {
    fn num_samples(&self) -> usize {
        (0..self.shards.len())
            .filter_map(|k| read_sidecar(&self.dir.join(&self.shards[k])).ok())
            .map(|s| s.num_rows)
            .sum()
    }

    fn input_dim(&self) -> usize {
        read_sidecar(&self.dir.join(&self.shards[0]))
            .map(|s| s.schema.d_x())
            .unwrap_or(0)
    }

    fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_>> {
        check_batch_size(batch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..self.shards.len()).collect();
        order.shuffle(&mut rng);
        Ok(Box::new(FileBatches {
            layout: self,
            order,
            next_shard: 0,
            rng,
            batch_size,
            pending_x: Vec::new(),
            pending_t: Vec::new(),
            width: 0,
            done: false,
        }))
    }

    fn eval_rows(&self, cap: usize) -> Result<(Array2<f64>, Vec<usize>)> {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        let mut width = 0;
        for k in 0..self.shards.len() {
            if ts.len() >= cap {
                break;
            }
            let (d, _) = self.read_shard(k)?;
            width = d.d_x();
            for i in 0..d.len().min(cap - ts.len()) {
                xs.extend(d.x.row(i).iter().copied());
                ts.push(d.next_state[i].index());
            }
        }
        let x = Array2::from_shape_vec((ts.len(), width), xs).expect("consistent buffer");
        Ok((x, ts))
    }
}

/// Out-of-core pass: loads one shard at a time, shuffles it, emits full batches
/// and carries partial batches into the next shard.
struct FileBatches<'a> {
    layout: &'a ShardLayout,
    order: Vec<usize>,
    next_shard: usize,
    rng: ChaCha8Rng,
    batch_size: usize,
    pending_x: Vec<f64>,
    pending_t: Vec<usize>,
    width: usize,
    done: bool,
}

impl FileBatches<'_> {
    fn take(&mut self, n: usize) -> Batch {
        let rest_x = self.pending_x.split_off(n * self.width);
        let rest_t = self.pending_t.split_off(n);
        let x = std::mem::replace(&mut self.pending_x, rest_x);
        let t = std::mem::replace(&mut self.pending_t, rest_t);
        Batch {
            x: Array2::from_shape_vec((n, self.width), x).expect("consistent buffer"),
            targets: t,
        }
    }
}

impl Iterator for FileBatches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.pending_t.len() >= self.batch_size {
                return Some(Ok(self.take(self.batch_size)));
            }
            if self.next_shard >= self.order.len() {
                if self.done || self.pending_t.is_empty() {
                    self.done = true;
                    return None;
                }
                self.done = true;
                let n = self.pending_t.len();
                return Some(Ok(self.take(n)));
            }
            let k = self.order[self.next_shard];
            self.next_shard += 1;
            let (d, _) = match self.layout.read_shard(k) {
                Ok(v) => v,
                Err(e) => {
                    self.done = true;
                    self.next_shard = self.order.len();
                    return Some(Err(e));
                }
            };
            self.width = d.d_x();
            let mut rows: Vec<usize> = (0..d.len()).collect();
            rows.shuffle(&mut self.rng);
            for i in rows {
                self.pending_x.extend(d.x.row(i).iter().copied());
                self.pending_t.push(d.next_state[i].index());
            }
        }
    }
}

/// Shuffled minibatches over every sample of `source`, once.
pub fn minibatch_stream<'a, S: BatchSource + ?Sized>(
    source: &'a S,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchIter<'a>> {
    source.batches(batch_size, epoch_seed)
}

fn read_sidecar(stem: &Path) -> Result<CacheSidecar> {
    let text = fs::read_to_string(stem.with_extension("json"))?;
    let side: CacheSidecar = serde_json::from_str(&text)?;
    if side.format != CACHE_FORMAT || side.version != CACHE_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported cache format {} v{}",
            stem.display(),
            side.format,
            side.version
        )));
    }
    Ok(side)
}

/// Writes one cache file pair at `stem` (`stem.bin` + `stem.json`).
pub fn write_cache(
    stem: &Path,
    data: &Dataset,
    schema: &FeatureSchema,
    stats: &NormalizationStats,
    shard: (usize, usize),
    seed: u64,
) -> Result<()> {
    if data.d_x() != schema.d_x() {
        return Err(Error::DimensionMismatch {
            expected: schema.d_x(),
            got: data.d_x(),
        });
    }
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
    let mut counts = [0u64; K];
    for i in 0..data.len() {
        counts[data.state[i].index()] += 1;
        w.write_all(&(data.state[i].index() as f32).to_le_bytes())?;
        w.write_all(&(data.next_state[i].index() as f32).to_le_bytes())?;
        w.write_all(&(data.period[i] as f32).to_le_bytes())?;
        for v in data.x.row(i) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let mut row_layout = vec!["state".to_string(), "next_state".to_string(), "period".to_string()];
    row_layout.extend(schema.columns().iter().map(|c| c.name.clone()));
    let side = CacheSidecar {
        format: CACHE_FORMAT.into(),
        version: CACHE_VERSION,
        hash_algorithm: HASH_ALGORITHM_ID.into(),
        seed,
        num_shards: shard.1,
        shard: shard.0,
        row_width: row_layout.len(),
        row_layout,
        num_rows: data.len(),
        state_counts: counts,
        schema: schema.clone(),
        stats: stats.clone(),
        loan_ids: data.loan_id.clone(),
    };
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Reads a cache file pair; byte-length problems are reported with offsets.
pub fn read_cache(stem: &Path) -> Result<(Dataset, CacheSidecar)> {
    let side = read_sidecar(stem)?;
    let d = side.schema.d_x();
    if side.row_width != d + ROW_PREFIX {
        return Err(Error::Corrupt {
            offset: 0,
            message: format!("row width {} does not match schema width {}", side.row_width, d + ROW_PREFIX),
        });
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(stem.with_extension("bin"))?).read_to_end(&mut bytes)?;
    let expected = side.num_rows * side.row_width * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt {
            offset: bytes.len().min(expected) as u64,
            message: format!("{}: expected {expected} bytes, found {}", stem.display(), bytes.len()),
        });
    }
    let mut x = Array2::zeros((side.num_rows, d));
    let mut state = Vec::with_capacity(side.num_rows);
    let mut next = Vec::with_capacity(side.num_rows);
    let mut period = Vec::with_capacity(side.num_rows);
    let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    for i in 0..side.num_rows {
        let base = i * side.row_width * 4;
        let st = |v: f32, what: &str| {
            StateIndex::from_index(v as usize).filter(|_| v >= 0.0 && v.fract() == 0.0).ok_or_else(|| Error::Corrupt {
                offset: base as u64,
                message: format!("invalid {what} code {v}"),
            })
        };
        state.push(st(f(base), "state")?);
        next.push(st(f(base + 4), "next_state")?);
        period.push(f(base + 8) as i64);
        for j in 0..d {
            x[[i, j]] = f(base + (ROW_PREFIX + j) * 4) as f64;
        }
    }
    let loan_id = if side.loan_ids.len() == side.num_rows {
        side.loan_ids.clone()
    } else {
        return Err(Error::Corrupt {
            offset: 0,
            message: "sidecar loan id count does not match row count".into(),
        });
    };
    Ok((Dataset::new(x, state, next, period, loan_id)?, side))
}

/// Writes `data` into `num_shards` loan-keyed shard files under `dir`.
pub fn write_shards(
    dir: &Path,
    data: &Dataset,
    schema: &FeatureSchema,
    stats: &NormalizationStats,
    num_shards: usize,
    seed: u64,
) -> Result<ShardLayout> {
    if num_shards < 1 {
        return Err(Error::config("num_shards", "must be at least 1"));
    }
    fs::create_dir_all(dir)?;
    let mut idx = vec![Vec::new(); num_shards];
    for i in 0..data.len() {
        idx[shard_assign(&data.loan_id[i], num_shards, seed)].push(i);
    }
    let mut names = Vec::new();
    for (k, rows) in idx.iter().enumerate() {
        let name = format!("shard_{k:05}");
        write_cache(&dir.join(&name), &data.subset(rows), schema, stats, (k, num_shards), seed)?;
        names.push(name);
    }
    let layout = ShardLayout {
        format: CACHE_FORMAT.into(),
        version: CACHE_VERSION,
        hash_algorithm: HASH_ALGORITHM_ID.into(),
        num_shards,
        seed,
        shards: names,
        dir: dir.to_path_buf(),
    };
    fs::write(dir.join("layout.json"), serde_json::to_string_pretty(&layout)?)?;
    Ok(layout)
}
