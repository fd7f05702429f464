//! Terrain persistence: backends, a local read-through cache with
//! distance-based prefetch, and periodic write-back.
//!
//! All operations are non-blocking from the caller's point of view. A read
//! resolves at `now + latency`, where the latency is sampled from the
//! local-disk distribution for cache hits and from the backend's
//! distribution otherwise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faas::{Distribution, Sampler};
use crate::terrain::{generate_chunk, WorldSeed};
use crate::world::{ChunkCoord, WorldState};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlobKey(String);

impl BlobKey {
    pub fn chunk(c: ChunkCoord) -> Self {
        BlobKey(format!("c_{}_{}", c.cx, c.cz))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Option<Self> {
        let k = BlobKey(s.to_string());
        k.coord().map(|_| k)
    }

    pub fn coord(&self) -> Option<ChunkCoord> {
        let rest = self.0.strip_prefix("c_")?;
        let (x, z) = rest.split_once('_')?;
        let c = ChunkCoord::new(x.parse().ok()?, z.parse().ok()?);
        (BlobKey::chunk(c) == *self).then_some(c)
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("no blob stored under {0}")]
    NotFound(BlobKey),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Local disk: p99.9 near 16 ms with rare outliers up to 123 ms.
pub fn local_disk_latency() -> Distribution {
    Distribution::TwoPiece { median_ms: 1.0, sigma: 0.5, tail_prob: 0.0008, tail_min_ms: 16.0, tail_max_ms: 123.0 }
}

/// Remote blob store: p99 near 16 ms, p99.9 near 226 ms, outliers to 500 ms.
pub fn blob_read_latency() -> Distribution {
    Distribution::TwoPiece { median_ms: 4.0, sigma: 0.58, tail_prob: 0.00168, tail_min_ms: 40.0, tail_max_ms: 500.0 }
}

pub fn blob_write_latency() -> Distribution {
    Distribution::lognormal(12.0, 0.5)
}

/// Durable storage behind the cache.
pub trait Backend: Send {
    fn exists(&self, key: &BlobKey) -> bool;
    fn get(&mut self, key: &BlobKey) -> Result<Vec<u8>, StorageError>;
    fn put(&mut self, key: &BlobKey, bytes: &[u8]) -> Result<(), StorageError>;
    fn read_latency(&mut self) -> f64;
    fn write_latency(&mut self) -> f64;
}

/// One file per key in a directory.
pub struct LocalDisk {
    dir: PathBuf,
    read: Sampler,
    write: Sampler,
}

impl LocalDisk {
    pub fn open(dir: impl Into<PathBuf>, seed: u64) -> Result<Self, StorageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(LocalDisk {
            dir,
            read: Sampler::new(local_disk_latency(), seed),
            write: Sampler::new(local_disk_latency(), seed ^ 0x5717E),
        })
    }

    fn path(&self, key: &BlobKey) -> PathBuf {
        self.dir.join(format!("{key}.chunk"))
    }
}

impl Backend for LocalDisk {
    fn exists(&self, key: &BlobKey) -> bool {
        self.path(key).exists()
    }

    fn get(&mut self, key: &BlobKey) -> Result<Vec<u8>, StorageError> {
        match fs::read(self.path(key)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StorageError::NotFound(key.clone())),
            Err(e) => Err(e.into()),
        }
    }

    fn put(&mut self, key: &BlobKey, bytes: &[u8]) -> Result<(), StorageError> {
        write_atomic(&self.path(key), bytes)?;
        Ok(())
    }

    fn read_latency(&mut self) -> f64 {
        self.read.sample()
    }

    fn write_latency(&mut self) -> f64 {
        self.write.sample()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// In-memory blob store with injected latency. With a world seed set, any
/// key never written reads as freshly generated terrain, modelling a world
/// that already exists remotely.
pub struct EmulatedBlob {
    blobs: HashMap<BlobKey, Vec<u8>>,
    prepopulated: Option<WorldSeed>,
    read: Sampler,
    write: Sampler,
}

impl EmulatedBlob {
    pub fn new(read: Distribution, write: Distribution, prepopulated: Option<WorldSeed>, seed: u64) -> Self {
        EmulatedBlob {
            blobs: HashMap::new(),
            prepopulated,
            read: Sampler::new(read, seed),
            write: Sampler::new(write, seed ^ 0x5717E),
        }
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

impl Backend for EmulatedBlob {
    fn exists(&self, key: &BlobKey) -> bool {
        self.blobs.contains_key(key) || (self.prepopulated.is_some() && key.coord().is_some())
    }

    fn get(&mut self, key: &BlobKey) -> Result<Vec<u8>, StorageError> {
        if let Some(b) = self.blobs.get(key) {
            return Ok(b.clone());
        }
        match (self.prepopulated, key.coord()) {
            (Some(seed), Some(c)) => Ok(generate_chunk(&seed, c).encode()),
            _ => Err(StorageError::NotFound(key.clone())),
        }
    }

    fn put(&mut self, key: &BlobKey, bytes: &[u8]) -> Result<(), StorageError> {
        self.blobs.insert(key.clone(), bytes.to_vec());
        Ok(())
    }

    fn read_latency(&mut self) -> f64 {
        self.read.sample()
    }

    fn write_latency(&mut self) -> f64 {
        self.write.sample()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CachePolicy {
    pub enabled: bool,
    /// Ring width beyond the view distance that is prefetched.
    pub prefetch_margin_blocks: i32,
    /// Clean entries unused for this long are dropped.
    pub eviction_idle_ms: f64,
    pub write_back_interval_ms: f64,
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy { enabled: true, prefetch_margin_blocks: 32, eviction_idle_ms: 600_000.0, write_back_interval_ms: 30_000.0 }
    }
}

impl CachePolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.prefetch_margin_blocks < 0 {
            return Err("prefetch_margin_blocks must be non-negative".into());
        }
        if self.write_back_interval_ms <= 0.0 {
            return Err("write_back_interval_ms must be positive".into());
        }
        Ok(())
    }
}

struct CacheEntry {
    bytes: Vec<u8>,
    dirty: bool,
    /// Time the bytes became locally available.
    ready_ms: f64,
    last_access_ms: f64,
}

const MANIFEST: &str = "dirty.manifest";

/// Local cache; mirrored to a directory when one is configured.
struct LocalCache {
    dir: Option<PathBuf>,
    entries: HashMap<BlobKey, CacheEntry>,
}

impl LocalCache {
    fn open(dir: Option<PathBuf>) -> Result<Self, StorageError> {
        let mut entries = HashMap::new();
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
            let dirty: BTreeSet<String> = match fs::read_to_string(d.join(MANIFEST)) {
                Ok(s) => s.lines().map(str::to_string).collect(),
                Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeSet::new(),
                Err(e) => return Err(e.into()),
            };
            for f in fs::read_dir(d)? {
                let p = f?.path();
                let Some(stem) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".chunk")) else {
                    continue;
                };
                let Some(key) = BlobKey::parse(stem) else { continue };
                let bytes = fs::read(&p)?;
                let dirty = dirty.contains(key.as_str());
                entries.insert(key, CacheEntry { bytes, dirty, ready_ms: 0.0, last_access_ms: 0.0 });
            }
        }
        Ok(LocalCache { dir, entries })
    }

    fn insert(&mut self, key: &BlobKey, bytes: Vec<u8>, dirty: bool, ready_ms: f64) -> Result<(), StorageError> {
        if let Some(d) = &self.dir {
            write_atomic(&d.join(format!("{key}.chunk")), &bytes)?;
        }
        let was_dirty = self.entries.get(key).is_some_and(|e| e.dirty);
        self.entries.insert(key.clone(), CacheEntry { bytes, dirty: dirty || was_dirty, ready_ms, last_access_ms: ready_ms });
        if dirty != was_dirty {
            self.write_manifest()?;
        }
        Ok(())
    }

    fn remove(&mut self, key: &BlobKey) -> Result<(), StorageError> {
        self.entries.remove(key);
        if let Some(d) = &self.dir {
            match fs::remove_file(d.join(format!("{key}.chunk"))) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<(), StorageError> {
        if let Some(d) = &self.dir {
            let mut keys: Vec<&str> = self.entries.iter().filter(|(_, e)| e.dirty).map(|(k, _)| k.as_str()).collect();
            keys.sort_unstable();
            write_atomic(&d.join(MANIFEST), keys.join("\n").as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadKind {
    /// The server needs the chunk in memory.
    Demand,
    /// Background copy from the backend into the local cache.
    Prefetch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageRead {
    pub key: String,
    pub issued_ms: f64,
    pub latency_ms: f64,
    pub hit: bool,
    pub kind: ReadKind,
}

#[derive(Debug)]
pub struct ReadDone {
    pub key: BlobKey,
    pub ready_ms: f64,
    pub result: Result<Vec<u8>, StorageError>,
}

struct PendingRead {
    key: BlobKey,
    ready_ms: f64,
    result: Result<Vec<u8>, StorageError>,
}

/// Read-through terrain store.
pub struct TerrainStore {
    pub policy: CachePolicy,
    backend: Box<dyn Backend>,
    cache: Option<LocalCache>,
    local: Sampler,
    /// Prefetches in flight: key to arrival time.
    fetching: BTreeMap<BlobKey, f64>,
    reads: BTreeMap<(u64, u64), PendingRead>,
    /// Writes made while caching is off, awaiting the next flush.
    staged: BTreeMap<BlobKey, Vec<u8>>,
    log: Vec<StorageRead>,
    seq: u64,
    last_flush_ms: f64,
}

impl TerrainStore {
    pub fn new(
        backend: Box<dyn Backend>,
        policy: CachePolicy,
        cache_dir: Option<PathBuf>,
        seed: u64,
    ) -> Result<Self, StorageError> {
        policy.validate().map_err(|e| StorageError::BackendUnavailable(e))?;
        let cache = if policy.enabled { Some(LocalCache::open(cache_dir)?) } else { None };
        Ok(TerrainStore {
            policy,
            backend,
            cache,
            local: Sampler::new(local_disk_latency(), seed ^ 0x10CA1),
            fetching: BTreeMap::new(),
            reads: BTreeMap::new(),
            staged: BTreeMap::new(),
            log: Vec::new(),
            seq: 0,
            last_flush_ms: 0.0,
        })
    }

    /// Whether the key can be served without generating it.
    pub fn contains(&self, key: &BlobKey) -> bool {
        self.cache.as_ref().is_some_and(|c| c.entries.contains_key(key))
            || self.staged.contains_key(key)
            || self.backend.exists(key)
    }

    pub fn is_cached(&self, key: &BlobKey) -> bool {
        self.cache.as_ref().is_some_and(|c| c.entries.contains_key(key))
    }

    pub fn is_fetching(&self, key: &BlobKey) -> bool {
        self.fetching.contains_key(key)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.entries.len())
    }

    fn push_read(&mut self, key: BlobKey, ready_ms: f64, result: Result<Vec<u8>, StorageError>) {
        self.seq += 1;
        self.reads.insert((ready_ms.max(0.0).to_bits(), self.seq), PendingRead { key, ready_ms, result });
    }

    /// Starts a demand read; the result is delivered by [`poll`](Self::poll).
    pub fn read_chunk(&mut self, key: &BlobKey, now_ms: f64) {
        if let Some(bytes) = self.staged.get(key) {
            let lat = self.local.sample();
            let b = bytes.clone();
            self.record(key, now_ms, lat, true, ReadKind::Demand);
            self.push_read(key.clone(), now_ms + lat, Ok(b));
            return;
        }
        let local = self.local.sample();
        if let Some(cache) = self.cache.as_mut() {
            if let Some(e) = cache.entries.get_mut(key) {
                let hit = e.ready_ms <= now_ms;
                let ready = e.ready_ms.max(now_ms) + local;
                e.last_access_ms = now_ms;
                let b = e.bytes.clone();
                self.record(key, now_ms, ready - now_ms, hit, ReadKind::Demand);
                self.push_read(key.clone(), ready, Ok(b));
                return;
            }
        }
        let remote = self.backend.read_latency();
        let result = self.backend.get(key);
        let ready = now_ms + remote;
        if let (Some(cache), Ok(b)) = (self.cache.as_mut(), &result) {
            if let Err(e) = cache.insert(key, b.clone(), false, ready) {
                log::warn!("cache write for {key} failed: {e}");
            }
        }
        self.fetching.remove(key);
        self.record(key, now_ms, remote, false, ReadKind::Demand);
        self.push_read(key.clone(), ready, result);
    }

    fn record(&mut self, key: &BlobKey, issued_ms: f64, latency_ms: f64, hit: bool, kind: ReadKind) {
        self.log.push(StorageRead { key: key.to_string(), issued_ms, latency_ms, hit, kind });
    }

    /// Demand reads completed by `now_ms`, in completion order.
    pub fn poll(&mut self, now_ms: f64) -> Vec<ReadDone> {
        let later = self.reads.split_off(&((now_ms.max(0.0)).to_bits(), u64::MAX));
        let due = std::mem::replace(&mut self.reads, later);
        self.fetching.retain(|_, &mut t| t > now_ms);
        due.into_values().map(|p| ReadDone { key: p.key, ready_ms: p.ready_ms, result: p.result }).collect()
    }

    pub fn pending_reads(&self) -> usize {
        self.reads.len()
    }

    /// Copies ring chunks from the backend into the local cache. Keys that
    /// are cached, already fetching or absent from the backend are skipped.
    pub fn prefetch(&mut self, ring: impl IntoIterator<Item = ChunkCoord>, now_ms: f64) -> Vec<BlobKey> {
        if self.cache.is_none() || self.policy.prefetch_margin_blocks == 0 {
            return Vec::new();
        }
        let mut issued = Vec::new();
        for c in ring {
            let key = BlobKey::chunk(c);
            if self.is_cached(&key) || self.fetching.contains_key(&key) || !self.backend.exists(&key) {
                continue;
            }
            let lat = self.backend.read_latency();
            match self.backend.get(&key) {
                Ok(b) => {
                    let ready = now_ms + lat;
                    if let Some(cache) = self.cache.as_mut() {
                        if let Err(e) = cache.insert(&key, b, false, ready) {
                            log::warn!("cache write for {key} failed: {e}");
                            continue;
                        }
                    }
                    self.fetching.insert(key.clone(), ready);
                    self.record(&key, now_ms, lat, false, ReadKind::Prefetch);
                    issued.push(key);
                }
                Err(e) => log::warn!("prefetch of {key} failed: {e}"),
            }
        }
        issued
    }

    /// Stores chunk bytes locally; they reach the backend on the next flush.
    pub fn write_chunk(&mut self, key: &BlobKey, bytes: Vec<u8>, now_ms: f64) -> Result<(), StorageError> {
        match self.cache.as_mut() {
            Some(c) => c.insert(key, bytes, true, now_ms),
            None => {
                self.staged.insert(key.clone(), bytes);
                Ok(())
            }
        }
    }

    pub fn dirty_count(&self) -> usize {
        self.staged.len() + self.cache.as_ref().map_or(0, |c| c.entries.values().filter(|e| e.dirty).count())
    }

    /// Writes every dirty entry to the backend. Returns the number written
    /// and the summed modelled write latency.
    pub fn flush(&mut self, now_ms: f64) -> Result<(usize, f64), StorageError> {
        self.last_flush_ms = now_ms;
        let mut n = 0;
        let mut latency = 0.0;
        for (k, b) in std::mem::take(&mut self.staged) {
            self.backend.put(&k, &b)?;
            latency += self.backend.write_latency();
            n += 1;
        }
        if let Some(cache) = self.cache.as_mut() {
            let mut dirty: Vec<&BlobKey> = cache.entries.iter().filter(|(_, e)| e.dirty).map(|(k, _)| k).collect();
            dirty.sort();
            let dirty: Vec<BlobKey> = dirty.into_iter().cloned().collect();
            for k in &dirty {
                let e = cache.entries.get_mut(k).expect("dirty entry");
                self.backend.put(k, &e.bytes)?;
                latency += self.backend.write_latency();
                e.dirty = false;
                n += 1;
            }
            if !dirty.is_empty() {
                cache.write_manifest()?;
            }
        }
        Ok((n, latency))
    }

    pub fn flush_due(&self, now_ms: f64) -> bool {
        now_ms - self.last_flush_ms >= self.policy.write_back_interval_ms
    }

    /// Drops clean entries idle for longer than the eviction period,
    /// keeping any key in `keep`.
    pub fn evict(&mut self, now_ms: f64, keep: &BTreeSet<ChunkCoord>) -> usize {
        let Some(cache) = self.cache.as_mut() else { return 0 };
        let idle = self.policy.eviction_idle_ms;
        let victims: Vec<BlobKey> = cache
            .entries
            .iter()
            .filter(|(k, e)| {
                !e.dirty && now_ms - e.last_access_ms > idle && !k.coord().is_some_and(|c| keep.contains(&c))
            })
            .map(|(k, _)| k.clone())
            .collect();
        for k in &victims {
            if let Err(e) = cache.remove(k) {
                log::warn!("evicting {k} failed: {e}");
            }
        }
        victims.len()
    }

    pub fn take_log(&mut self) -> Vec<StorageRead> {
        std::mem::take(&mut self.log)
    }
}

/// Chunks between the view distance and view distance plus `margin`.
pub fn prefetch_ring(world: &WorldState, margin: i32) -> BTreeSet<ChunkCoord> {
    if margin <= 0 {
        return BTreeSet::new();
    }
    let outer = world.chunks_around_avatars(world.view_distance_blocks + margin);
    let inner = world.required_chunks();
    outer.difference(&inner).copied().collect()
}
