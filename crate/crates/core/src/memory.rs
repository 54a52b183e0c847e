//! Retrieval memory over pooled chunk embeddings.
//!
//! Keys and values live in a preallocated `f32` ring of fixed capacity, so
//! the store's footprint is independent of how many chunks have been seen.
//! Keys are L2-normalised on insert and ranked by cosine similarity. The
//! approximate mode keeps an inverted-file index: a spherical k-means coarse
//! quantizer partitions the keys into lists and a query scans only the
//! closest lists before an exact re-rank.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::counter::FloatLease;
use crate::numerics::{Graph, Tensor, Var};

/// Where a stored chunk came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub seq_id: u64,
    pub chunk_index: u64,
}

impl Provenance {
    /// False for entries of the same sequence at or after `origin`.
    pub fn admissible_for(&self, origin: &Provenance) -> bool {
        self.seq_id != origin.seq_id || self.chunk_index < origin.chunk_index
    }
}

/// One stored chunk summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub provenance: Provenance,
}

impl MemoryEntry {
    pub fn new(key: &[f64], value: &[f64], seq_id: u64, chunk_index: u64) -> Self {
        MemoryEntry {
            key: key.iter().map(|&v| v as f32).collect(),
            value: value.iter().map(|&v| v as f32).collect(),
            provenance: Provenance {
                seq_id,
                chunk_index,
            },
        }
    }
}

/// A ranked query result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub similarity: f64,
    pub entry: MemoryEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Approximate { n_list: usize, n_probe: usize },
}

impl IndexMode {
    fn name(&self) -> &'static str {
        match self {
            IndexMode::Exact => "exact",
            IndexMode::Approximate { .. } => "approximate",
        }
    }
}

#[derive(Clone, Debug)]
struct IvfIndex {
    /// `n_list × d` unit-norm centroids.
    centroids: Vec<f32>,
    lists: Vec<Vec<usize>>,
}

pub const DEFAULT_REBUILD_EVERY: usize = 1024;
const KMEANS_ROUNDS: usize = 12;
const KMEANS_SEED: u64 = 0x1f5e_ed00;

/// Bounded FIFO store of chunk embeddings.
#[derive(Clone, Debug)]
pub struct MemoryStore {
    d: usize,
    capacity: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    provenance: Vec<Provenance>,
    len: usize,
    head: usize,
    mode: IndexMode,
    index: Option<IvfIndex>,
    /// List id per slot while an index exists.
    slot_list: Vec<usize>,
    rebuild_every: usize,
    inserts_since_build: usize,
    total_inserts: u64,
    _lease: FloatLease,
}

pub type SharedMemory = Arc<RwLock<MemoryStore>>;

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn dot(q: &[f64], k: &[f32]) -> f64 {
    q.iter().zip(k).map(|(a, &b)| a * b as f64).sum()
}

impl MemoryStore {
    pub fn new(d: usize, capacity: usize, mode: IndexMode) -> Result<Self> {
        if d == 0 || capacity == 0 {
            return Err(Error::Config("memory needs positive dimension and capacity".into()));
        }
        if let IndexMode::Approximate { n_list, n_probe } = mode {
            if n_list == 0 || n_probe == 0 {
                return Err(Error::Config("n_list and n_probe must be positive".into()));
            }
        }
        Ok(MemoryStore {
            d,
            capacity,
            keys: vec![0.0; capacity * d],
            values: vec![0.0; capacity * d],
            provenance: vec![
                Provenance {
                    seq_id: 0,
                    chunk_index: 0
                };
                capacity
            ],
            len: 0,
            head: 0,
            mode,
            index: None,
            slot_list: vec![0; capacity],
            rebuild_every: DEFAULT_REBUILD_EVERY,
            inserts_since_build: 0,
            total_inserts: 0,
            _lease: FloatLease::new(2 * capacity * d),
        })
    }

    pub fn with_rebuild_every(mut self, n: usize) -> Self {
        self.rebuild_every = n.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: IndexMode) {
        self.mode = mode;
        self.index = None;
        if matches!(mode, IndexMode::Approximate { .. }) && self.len > 0 {
            self.rebuild_index();
        }
    }

    /// Slots in insertion order, oldest first.
    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.head };
        (0..self.len).map(move |i| (start + i) % self.capacity)
    }

    fn key(&self, slot: usize) -> &[f32] {
        &self.keys[slot * self.d..(slot + 1) * self.d]
    }

    fn value(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.d..(slot + 1) * self.d]
    }

    fn entry(&self, slot: usize) -> MemoryEntry {
        MemoryEntry {
            key: self.key(slot).to_vec(),
            value: self.value(slot).to_vec(),
            provenance: self.provenance[slot],
        }
    }

    /// Every stored entry, oldest first.
    pub fn entries(&self) -> Vec<MemoryEntry> {
        self.slots().map(|s| self.entry(s)).collect()
    }

    /// Inserts `entry` (normalising its key), evicting the oldest entry at
    /// capacity.
    pub fn store(&mut self, entry: MemoryEntry) -> Result<()> {
        if entry.key.len() != self.d || entry.value.len() != self.d {
            return Err(Error::shape(
                "memory_store",
                format!(
                    "entry dims {}/{} for store of dim {}",
                    entry.key.len(),
                    entry.value.len(),
                    self.d
                ),
            ));
        }
        let key: Vec<f64> = entry.key.iter().map(|&v| v as f64).collect();
        let key = normalized(&key);
        let slot = self.head;
        if self.len == self.capacity {
            if let Some(index) = &mut self.index {
                let list = &mut index.lists[self.slot_list[slot]];
                if let Some(pos) = list.iter().position(|&s| s == slot) {
                    list.remove(pos);
                }
            }
        } else {
            self.len += 1;
        }
        for (dst, k) in self.keys[slot * self.d..(slot + 1) * self.d].iter_mut().zip(&key) {
            *dst = *k as f32;
        }
        self.values[slot * self.d..(slot + 1) * self.d].copy_from_slice(&entry.value);
        self.provenance[slot] = entry.provenance;
        self.head = (self.head + 1) % self.capacity;
        self.total_inserts += 1;
        self.inserts_since_build += 1;

        if let IndexMode::Approximate { n_list, .. } = self.mode {
            let stale = self.inserts_since_build >= self.rebuild_every;
            if stale || (self.index.is_none() && self.len >= n_list) {
                self.rebuild_index();
            } else if let Some(index) = &mut self.index {
                let list = nearest_centroid(&index.centroids, self.d, &self.keys[slot * self.d..(slot + 1) * self.d]);
                index.lists[list].push(slot);
                self.slot_list[slot] = list;
            }
        }
        Ok(())
    }

    /// Brute-force cosine ranking over admissible entries, ties broken by
    /// provenance ascending.
    pub fn query_exact(&self, q: &[f64], k: usize, admit: impl Fn(&Provenance) -> bool) -> Vec<Hit> {
        self.ranked(q, k, self.slots(), admit)
    }

    fn ranked(
        &self,
        q: &[f64],
        k: usize,
        candidates: impl Iterator<Item = usize>,
        admit: impl Fn(&Provenance) -> bool,
    ) -> Vec<Hit> {
        if k == 0 || q.len() != self.d {
            return Vec::new();
        }
        let qn = normalized(q);
        let mut scored: Vec<(f64, usize)> = candidates
            .filter(|&s| admit(&self.provenance[s]))
            .map(|s| (dot(&qn, self.key(s)), s))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.provenance[a.1].cmp(&self.provenance[b.1]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(similarity, s)| Hit {
                similarity,
                entry: self.entry(s),
            })
            .collect()
    }

    /// Inverted-file search: scan the `n_probe` lists whose centroids are
    /// closest to `q`, then re-rank exactly. Falls back to exact search
    /// when the store is not in approximate mode or no index exists yet.
    pub fn query_approx(&self, q: &[f64], k: usize, admit: impl Fn(&Provenance) -> bool) -> Vec<Hit> {
        let (IndexMode::Approximate { n_probe, .. }, Some(index)) = (self.mode, &self.index) else {
            return self.query_exact(q, k, admit);
        };
        if q.len() != self.d {
            return Vec::new();
        }
        let qn = normalized(q);
        let n_list = index.lists.len();
        let mut order: Vec<(f64, usize)> = (0..n_list)
            .map(|l| (dot(&qn, &index.centroids[l * self.d..(l + 1) * self.d]), l))
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let probed = order.iter().take(n_probe).flat_map(|&(_, l)| index.lists[l].iter().copied());
        self.ranked(q, k, probed, admit)
    }

    /// Dispatches on the configured index mode.
    pub fn query(&self, q: &[f64], k: usize, admit: impl Fn(&Provenance) -> bool) -> Vec<Hit> {
        match self.mode {
            IndexMode::Exact => self.query_exact(q, k, admit),
            IndexMode::Approximate { .. } => self.query_approx(q, k, admit),
        }
    }

    /// Re-trains the coarse quantizer on the current keys.
    pub fn rebuild_index(&mut self) {
        self.inserts_since_build = 0;
        let IndexMode::Approximate { n_list, .. } = self.mode else {
            self.index = None;
            return;
        };
        if self.len == 0 {
            self.index = None;
            return;
        }
        let d = self.d;
        let slots: Vec<usize> = self.slots().collect();
        let n_list = n_list.min(slots.len());
        let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED ^ self.total_inserts);
        let mut picks = sample(&mut rng, slots.len(), n_list).into_vec();
        picks.sort_unstable();
        let mut centroids: Vec<f32> = Vec::with_capacity(n_list * d);
        for &p in &picks {
            centroids.extend_from_slice(self.key(slots[p]));
        }
        let mut assign = vec![0usize; slots.len()];
        for _ in 0..KMEANS_ROUNDS {
            for (i, &s) in slots.iter().enumerate() {
                assign[i] = nearest_centroid(&centroids, d, self.key(s));
            }
            let mut sums = vec![0.0f64; n_list * d];
            let mut counts = vec![0usize; n_list];
            for (i, &s) in slots.iter().enumerate() {
                counts[assign[i]] += 1;
                for (acc, &v) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(self.key(s)) {
                    *acc += v as f64;
                }
            }
            for l in 0..n_list {
                if counts[l] == 0 {
                    continue;
                }
                let unit = normalized(&sums[l * d..(l + 1) * d]);
                for (dst, v) in centroids[l * d..(l + 1) * d].iter_mut().zip(unit) {
                    *dst = v as f32;
                }
            }
        }
        self.install_index(centroids);
    }

    /// Assigns every slot to its nearest centroid.
    fn install_index(&mut self, centroids: Vec<f32>) {
        let n_list = centroids.len() / self.d;
        let mut lists = vec![Vec::new(); n_list];
        let slots: Vec<usize> = self.slots().collect();
        for s in slots {
            let l = nearest_centroid(&centroids, self.d, self.key(s));
            lists[l].push(s);
            self.slot_list[s] = l;
        }
        self.index = Some(IvfIndex { centroids, lists });
    }

    pub fn has_index(&self) -> bool {
        self.index.is_some()
    }

    /// Writes a text manifest at `manifest` and little-endian binary data at
    /// `manifest` + `.bin`: keys, values (f32, oldest first), provenance
    /// (u64 pairs), then centroids (f32) when an index exists.
    pub fn save_snapshot(&self, manifest: &Path) -> Result<()> {
        let (n_list, n_probe) = match self.mode {
            IndexMode::Exact => (0, 0),
            IndexMode::Approximate { n_list, n_probe } => (n_list, n_probe),
        };
        let centroids = self.index.as_ref().map_or(&[][..], |i| &i.centroids[..]);
        let mut text = String::new();
        writeln!(text, "format chunklm-memory 1").unwrap();
        writeln!(text, "d_mem {}", self.d).unwrap();
        writeln!(text, "capacity {}", self.capacity).unwrap();
        writeln!(text, "count {}", self.len).unwrap();
        writeln!(text, "index {}", self.mode.name()).unwrap();
        writeln!(text, "n_list {n_list}").unwrap();
        writeln!(text, "n_probe {n_probe}").unwrap();
        writeln!(text, "rebuild_every {}", self.rebuild_every).unwrap();
        writeln!(text, "inserts_since_build {}", self.inserts_since_build).unwrap();
        writeln!(text, "total_inserts {}", self.total_inserts).unwrap();
        writeln!(text, "centroids {}", centroids.len() / self.d).unwrap();

        let slots: Vec<usize> = self.slots().collect();
        let mut bin = Vec::with_capacity(slots.len() * (8 * self.d + 16) + centroids.len() * 4);
        for &s in &slots {
            for v in self.key(s) {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &s in &slots {
            for v in self.value(s) {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &s in &slots {
            bin.extend_from_slice(&self.provenance[s].seq_id.to_le_bytes());
            bin.extend_from_slice(&self.provenance[s].chunk_index.to_le_bytes());
        }
        for v in centroids {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(manifest, text)?;
        fs::write(snapshot_data_path(manifest), bin)?;
        Ok(())
    }

    pub fn load_snapshot(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let fields = crate::config::parse_flat(&text, manifest)?;
        let get = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| Error::format(manifest, format!("missing key {key}")))?
                .parse::<usize>()
                .map_err(|e| Error::format(manifest, format!("{key}: {e}")))
        };
        if fields.get("format").map(String::as_str) != Some("chunklm-memory 1") {
            return Err(Error::format(manifest, "not a memory snapshot"));
        }
        let (d, capacity, count) = (get("d_mem")?, get("capacity")?, get("count")?);
        let mode = match fields.get("index").map(String::as_str) {
            Some("exact") => IndexMode::Exact,
            Some("approximate") => IndexMode::Approximate {
                n_list: get("n_list")?,
                n_probe: get("n_probe")?,
            },
            other => return Err(Error::format(manifest, format!("unknown index mode {other:?}"))),
        };
        let n_centroids = get("centroids")?;
        let total_inserts = fields
            .get("total_inserts")
            .ok_or_else(|| Error::format(manifest, "missing key total_inserts"))?
            .parse::<u64>()
            .map_err(|e| Error::format(manifest, format!("total_inserts: {e}")))?;
        if count > capacity {
            return Err(Error::format(manifest, "count exceeds capacity"));
        }

        let data_path = snapshot_data_path(manifest);
        let bin = fs::read(&data_path)?;
        let expected = count * d * 8 + count * 16 + n_centroids * d * 4;
        if bin.len() != expected {
            return Err(Error::format(
                &data_path,
                format!("expected {expected} bytes, found {}", bin.len()),
            ));
        }
        let f32_at = |i: usize| f32::from_le_bytes(bin[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bin[i..i + 8].try_into().unwrap());

        let mut store = MemoryStore::new(d, capacity, mode)?.with_rebuild_every(get("rebuild_every")?);
        let value_base = count * d * 4;
        let prov_base = 2 * count * d * 4;
        for i in 0..count {
            let slot = i;
            for j in 0..d {
                store.keys[slot * d + j] = f32_at((i * d + j) * 4);
                store.values[slot * d + j] = f32_at(value_base + (i * d + j) * 4);
            }
            store.provenance[slot] = Provenance {
                seq_id: u64_at(prov_base + i * 16),
                chunk_index: u64_at(prov_base + i * 16 + 8),
            };
        }
        store.len = count;
        store.head = count % capacity;
        store.total_inserts = total_inserts;
        store.inserts_since_build = get("inserts_since_build")?;
        if n_centroids > 0 {
            let base = prov_base + count * 16;
            let centroids = (0..n_centroids * d).map(|i| f32_at(base + i * 4)).collect();
            store.install_index(centroids);
        }
        Ok(store)
    }

    pub fn into_shared(self) -> SharedMemory {
        Arc::new(RwLock::new(self))
    }
}

fn nearest_centroid(centroids: &[f32], d: usize, key: &[f32]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (l, c) in centroids.chunks(d).enumerate() {
        let s: f64 = c.iter().zip(key).map(|(&a, &b)| a as f64 * b as f64).sum();
        if s > best.0 {
            best = (s, l);
        }
    }
    best.1
}

pub fn snapshot_data_path(manifest: &Path) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

/// Fusion weights `W_fuse[2·d_mem × d_mem]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w: Tensor,
}

/// Row-wise mean of retrieved values; a zero row when nothing was retrieved.
pub fn mean_retrieved(retrieved: &[Vec<Hit>], d: usize) -> Tensor {
    let mut out = Tensor::zeros([retrieved.len(), d]);
    for (row, hits) in out.data_mut().chunks_mut(d).zip(retrieved) {
        if hits.is_empty() {
            continue;
        }
        for h in hits {
            for (o, &v) in row.iter_mut().zip(&h.entry.value) {
                *o += v as f64;
            }
        }
        let inv = 1.0 / hits.len() as f64;
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// `tanh(concat(c, r̄) · W_fuse)` with `r̄` entering as a constant.
pub fn fuse_on_tape(g: &mut Graph, chunk: Var, mean_retrieved: Tensor, w_fuse: Var) -> Result<Var> {
    let r = g.constant(mean_retrieved);
    let cat = g.concat(chunk, r)?;
    let pre = g.matmul(cat, w_fuse)?;
    g.tanh(pre)
}

/// Fusion gate on plain tensors.
pub fn fuse(chunk: &Tensor, retrieved: &[Vec<Hit>], p: &FusionParams) -> Result<Tensor> {
    let d = chunk.last_dim();
    if retrieved.len() != chunk.shape()[0] {
        return Err(Error::shape("fuse", "one retrieval list per row required"));
    }
    let mut g = Graph::new();
    let c = g.constant(chunk.clone());
    let w = g.constant(p.w.clone());
    let out = fuse_on_tape(&mut g, c, mean_retrieved(retrieved, d), w)?;
    Ok(g.value(out).clone())
}
