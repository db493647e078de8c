//! Offline embedding cache and the online scoring front-end.
//!
//! Cache file layout (little-endian): magic `PNTC`, u32 version, u32 d,
//! u32 shortlist length, u32 window, 64 ASCII bytes of checkpoint digest,
//! 64 ASCII bytes of vocab hash, u64 entry count, an index of
//! `(u64 FNV-1a hash of user id, u64 offset)` sorted by hash then id, then
//! the entries. An entry is u32 id length, id bytes, u64 last timestamp,
//! d f32, u32 count + `(u32 id, f32 p)` pairs, u32 count + u32 ids.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::downstream::{shortlist, shortlist_surprisal, ContextEncoder, HybridInput, HybridScorer, RECENT_WINDOW};
use crate::error::{config_err, PantherError, Result};
use crate::events::{RawEvent, UserRecord};
use crate::model::{forward_passes, Checkpoint};
use crate::tokenizer::Vocab;

pub const CACHE_VERSION: u32 = 1;
pub const DEFAULT_SHORTLIST: usize = 50;
const MAGIC: &[u8; 4] = b"PNTC";
const HASH_LEN: usize = 64;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub profile: Vec<f32>,
    /// `(token id, probability)`, descending.
    pub shortlist: Vec<(u32, f32)>,
    pub last_updated: u64,
    /// Most recent token ids, oldest first.
    pub recent: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub dim: usize,
    pub shortlist: usize,
    pub window: usize,
    pub checkpoint_digest: String,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub header: CacheHeader,
    entries: HashMap<String, CacheEntry>,
}

fn read_bytes<'a>(src: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if src.len() < n {
        return Err(PantherError::Format("truncated cache file".into()));
    }
    let (head, rest) = src.split_at(n);
    *src = rest;
    Ok(head)
}

fn read_u32(src: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(src, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(src: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(src, 8)?.try_into().expect("8 bytes")))
}

fn read_f32(src: &mut &[u8]) -> Result<f32> {
    Ok(f32::from_le_bytes(read_bytes(src, 4)?.try_into().expect("4 bytes")))
}

fn read_hash(src: &mut &[u8]) -> Result<String> {
    String::from_utf8(read_bytes(src, HASH_LEN)?.to_vec()).map_err(|_| PantherError::Format("hash is not ASCII".into()))
}

impl EmbeddingCache {
    pub fn new(header: CacheHeader) -> Self {
        Self {
            header,
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&CacheEntry> {
        self.entries.get(user_id)
    }

    pub fn insert(&mut self, user_id: String, entry: CacheEntry) -> Result<()> {
        if entry.profile.len() != self.header.dim {
            return Err(PantherError::Shape {
                op: "cache insert",
                detail: format!("profile of {} floats, cache holds {}", entry.profile.len(), self.header.dim),
            });
        }
        self.entries.insert(user_id, entry);
        Ok(())
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        for hash in [&h.checkpoint_digest, &h.vocab_hash] {
            if hash.len() != HASH_LEN || !hash.is_ascii() {
                return Err(PantherError::Format(format!("`{hash}` is not a 64-character digest")));
            }
        }
        let mut keys: Vec<(u64, &String)> = self.entries.keys().map(|k| (fnv1a(k.as_bytes()), k)).collect();
        keys.sort();
        let mut body = Vec::new();
        let mut index = Vec::with_capacity(keys.len() * 16);
        for (hash, key) in &keys {
            let e = &self.entries[*key];
            index.extend_from_slice(&hash.to_le_bytes());
            index.extend_from_slice(&(body.len() as u64).to_le_bytes());
            body.extend_from_slice(&(key.len() as u32).to_le_bytes());
            body.extend_from_slice(key.as_bytes());
            body.extend_from_slice(&e.last_updated.to_le_bytes());
            for x in &e.profile {
                body.extend_from_slice(&x.to_le_bytes());
            }
            body.extend_from_slice(&(e.shortlist.len() as u32).to_le_bytes());
            for (id, p) in &e.shortlist {
                body.extend_from_slice(&id.to_le_bytes());
                body.extend_from_slice(&p.to_le_bytes());
            }
            body.extend_from_slice(&(e.recent.len() as u32).to_le_bytes());
            for id in &e.recent {
                body.extend_from_slice(&id.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(160 + index.len() + body.len());
        out.extend_from_slice(MAGIC);
        for v in [CACHE_VERSION, h.dim as u32, h.shortlist as u32, h.window as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(h.checkpoint_digest.as_bytes());
        out.extend_from_slice(h.vocab_hash.as_bytes());
        out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(mut src: &[u8]) -> Result<Self> {
        if read_bytes(&mut src, 4)? != MAGIC {
            return Err(PantherError::Format("not a cache file (bad magic)".into()));
        }
        let version = read_u32(&mut src)?;
        if version != CACHE_VERSION {
            return Err(PantherError::Format(format!("unsupported cache version {version}")));
        }
        let dim = read_u32(&mut src)? as usize;
        let shortlist_len = read_u32(&mut src)? as usize;
        let window = read_u32(&mut src)? as usize;
        let header = CacheHeader {
            dim,
            shortlist: shortlist_len,
            window,
            checkpoint_digest: read_hash(&mut src)?,
            vocab_hash: read_hash(&mut src)?,
        };
        let count = read_u64(&mut src)? as usize;
        let index = read_bytes(&mut src, count.checked_mul(16).ok_or_else(|| PantherError::Format("entry count".into()))?)?;
        let body = src;
        let mut entries = HashMap::with_capacity(count);
        for slot in index.chunks_exact(16) {
            let hash = u64::from_le_bytes(slot[..8].try_into().expect("8 bytes"));
            let offset = u64::from_le_bytes(slot[8..].try_into().expect("8 bytes")) as usize;
            let mut src = body.get(offset..).ok_or_else(|| PantherError::Format("entry offset".into()))?;
            let len = read_u32(&mut src)? as usize;
            let id = String::from_utf8(read_bytes(&mut src, len)?.to_vec())
                .map_err(|_| PantherError::Format("user id is not UTF-8".into()))?;
            if fnv1a(id.as_bytes()) != hash {
                return Err(PantherError::Format(format!("index hash mismatch for `{id}`")));
            }
            let last_updated = read_u64(&mut src)?;
            let profile = (0..dim).map(|_| read_f32(&mut src)).collect::<Result<_>>()?;
            let n = read_u32(&mut src)? as usize;
            let shortlist = (0..n)
                .map(|_| Ok((read_u32(&mut src)?, read_f32(&mut src)?)))
                .collect::<Result<_>>()?;
            let n = read_u32(&mut src)? as usize;
            let recent = (0..n).map(|_| read_u32(&mut src)).collect::<Result<_>>()?;
            entries.insert(
                id,
                CacheEntry {
                    profile,
                    shortlist,
                    last_updated,
                    recent,
                },
            );
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cache entry of one user from the whole event history.
pub fn build_entry(checkpoint: &Checkpoint, vocab: &Vocab, user: &UserRecord, shortlist_len: usize) -> Result<CacheEntry> {
    let model = &checkpoint.model;
    let ids = vocab.encode(user)?.ids;
    let profile = model.profile_indices(&user.profile);
    let probs = model.next_distributions(&ids, &profile, &[ids.len()])?.remove(0);
    Ok(CacheEntry {
        profile: model.profile_embedding(&user.profile)?,
        shortlist: shortlist(&probs, shortlist_len),
        last_updated: user.events.last().map_or(0, |e| e.timestamp),
        recent: ids[ids.len().saturating_sub(RECENT_WINDOW)..].to_vec(),
    })
}

/// One entry per user. The result depends only on its inputs.
pub fn build_cache(
    users: &[UserRecord],
    vocab: &Vocab,
    checkpoint: &Checkpoint,
    checkpoint_digest: &str,
    shortlist_len: usize,
) -> Result<EmbeddingCache> {
    let hash = vocab.hash();
    if hash != checkpoint.vocab_hash {
        return Err(PantherError::VocabMismatch {
            expected: checkpoint.vocab_hash.clone(),
            found: hash,
        });
    }
    if shortlist_len == 0 {
        return Err(config_err("shortlist length must be positive"));
    }
    let entries: Vec<Result<CacheEntry>> = users
        .par_iter()
        .map(|u| build_entry(checkpoint, vocab, u, shortlist_len))
        .collect();
    let mut cache = EmbeddingCache::new(CacheHeader {
        dim: checkpoint.model.config.d_model,
        shortlist: shortlist_len,
        window: RECENT_WINDOW,
        checkpoint_digest: checkpoint_digest.to_string(),
        vocab_hash: hash,
    });
    for (u, e) in users.iter().zip(entries) {
        cache.insert(u.user_id.clone(), e?)?;
    }
    Ok(cache)
}

/// Shared cache snapshot; a refresh replaces the whole table while
/// in-flight readers keep the snapshot they started with.
#[derive(Debug)]
pub struct CacheHandle {
    current: RwLock<Arc<EmbeddingCache>>,
}

impl CacheHandle {
    pub fn new(cache: EmbeddingCache) -> Self {
        Self {
            current: RwLock::new(Arc::new(cache)),
        }
    }

    pub fn snapshot(&self) -> Arc<EmbeddingCache> {
        self.current.read().expect("cache lock poisoned").clone()
    }

    pub fn swap(&self, cache: EmbeddingCache) -> Arc<EmbeddingCache> {
        std::mem::replace(&mut *self.current.write().expect("cache lock poisoned"), Arc::new(cache))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub user_id: String,
    /// Attributes of the new event.
    pub attributes: BTreeMap<String, String>,
    /// Token of the new event; derived from `attributes` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_us: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub user_id: String,
    pub score: f64,
    pub context: Vec<f32>,
    pub deviation: f64,
    pub cache_hit: bool,
    pub cold_start: bool,
    pub timed_out: bool,
    pub latency_us: u64,
}

/// Online scorer over a warm cache. The hot path runs only the hybrid
/// head; the transformer is never called.
pub struct ScoringService {
    pub cache: CacheHandle,
    pub scorer: HybridScorer,
    pub context: ContextEncoder,
    pub vocab: Vocab,
    backfill: Mutex<VecDeque<String>>,
}

impl ScoringService {
    pub fn new(cache: EmbeddingCache, scorer: HybridScorer, vocab: Vocab) -> Result<Self> {
        if cache.header.vocab_hash != vocab.hash() {
            return Err(PantherError::VocabMismatch {
                expected: cache.header.vocab_hash.clone(),
                found: vocab.hash(),
            });
        }
        if cache.header.dim != scorer.profile_dim {
            return Err(config_err(format!(
                "cache holds {}-d embeddings, scorer expects {}",
                cache.header.dim, scorer.profile_dim
            )));
        }
        let context = ContextEncoder {
            schema: vocab.schema().attributes.clone(),
        };
        if context.dim() != scorer.context_dim {
            return Err(config_err("scorer context width does not match the vocabulary schema"));
        }
        Ok(Self {
            cache: CacheHandle::new(cache),
            scorer,
            context,
            vocab,
            backfill: Mutex::new(VecDeque::new()),
        })
    }

    pub fn score(&self, req: &ScoringRequest) -> Result<ScoringResponse> {
        let started = Instant::now();
        let context = self.context.encode(&req.attributes)?;
        let token = match req.token {
            Some(t) if (t as usize) < self.vocab.len() => t,
            Some(t) => {
                return Err(PantherError::TokenRange {
                    id: t as usize,
                    size: self.vocab.len(),
                })
            }
            None => self.vocab.encode_event(&RawEvent {
                user_id: req.user_id.clone(),
                timestamp: 0,
                attributes: req.attributes.clone(),
                label: None,
                counterparty: None,
            })?,
        };
        let snapshot = self.cache.snapshot();
        let entry = snapshot.get(&req.user_id);
        let input = match entry {
            Some(e) => HybridInput {
                context,
                recent: e.recent.clone(),
                profile: Some(e.profile.clone()),
                deviation: shortlist_surprisal(&e.shortlist, token),
            },
            None => {
                self.backfill.lock().expect("backfill lock poisoned").push_back(req.user_id.clone());
                HybridInput {
                    context,
                    recent: Vec::new(),
                    profile: None,
                    deviation: 0.0,
                }
            }
        };
        let score = self.scorer.score(&input)?;
        let latency_us = started.elapsed().as_micros() as u64;
        Ok(ScoringResponse {
            user_id: req.user_id.clone(),
            score,
            context: input.context,
            deviation: input.deviation,
            cache_hit: entry.is_some(),
            cold_start: entry.is_none(),
            timed_out: req.deadline_us.is_some_and(|d| latency_us > d),
            latency_us,
        })
    }

    /// User ids that missed the cache since the last drain, first miss
    /// first and without repeats.
    pub fn drain_backfill(&self) -> Vec<String> {
        let mut q = self.backfill.lock().expect("backfill lock poisoned");
        let mut seen = std::collections::HashSet::new();
        q.drain(..).filter(|u| seen.insert(u.clone())).collect()
    }

    /// Computes entries for `users` offline and swaps in a cache that
    /// also holds them.
    pub fn backfill(&self, checkpoint: &Checkpoint, users: &[UserRecord]) -> Result<usize> {
        let mut next = (*self.cache.snapshot()).clone();
        for u in users {
            next.insert(u.user_id.clone(), build_entry(checkpoint, &self.vocab, u, next.header.shortlist)?)?;
        }
        self.cache.swap(next);
        Ok(users.len())
    }
}

#[derive(Serialize)]
struct ErrorLine {
    error: String,
}

/// Answers one JSON request per input line with one JSON line. Malformed
/// requests get an `{"error": ...}` line. Returns the number of requests.
pub fn serve_lines(service: &ScoringService, input: impl BufRead, mut output: impl Write) -> Result<usize> {
    let mut n = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        n += 1;
        let reply = serde_json::from_str::<ScoringRequest>(&line)
            .map_err(PantherError::from)
            .and_then(|req| service.score(&req));
        match reply {
            Ok(r) => serde_json::to_writer(&mut output, &r)?,
            Err(e) => serde_json::to_writer(&mut output, &ErrorLine { error: e.to_string() })?,
        }
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(n)
}

/// Serves the line protocol on a Unix socket, one thread per connection.
/// Runs until the listener fails.
#[cfg(unix)]
pub fn serve_unix(service: Arc<ScoringService>, path: &Path) -> Result<()> {
    use std::os::unix::net::UnixListener;
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let listener = UnixListener::bind(path)?;
    log::info!("listening on {}", path.display());
    for stream in listener.incoming() {
        let stream = stream?;
        let service = service.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return log::warn!("connection: {e}"),
            };
            if let Err(e) = serve_lines(&service, reader, BufWriter::new(stream)) {
                log::warn!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requests: usize,
    pub cache_hits: usize,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    /// Transformer forward passes on this thread during the run.
    pub forward_passes: u64,
}

/// Scores `requests` sequentially on the calling thread and reports
/// latency percentiles.
pub fn bench_latency(service: &ScoringService, requests: &[ScoringRequest]) -> Result<LatencyReport> {
    if requests.is_empty() {
        return Err(PantherError::Empty("no benchmark requests".into()));
    }
    let before = forward_passes();
    let mut lat = Vec::with_capacity(requests.len());
    let mut hits = 0;
    for req in requests {
        let t = Instant::now();
        let r = service.score(req)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
        hits += r.cache_hit as usize;
    }
    let forwards = forward_passes() - before;
    lat.sort_by(f64::total_cmp);
    let pct = |p: f64| lat[((p * lat.len() as f64).ceil() as usize).clamp(1, lat.len()) - 1];
    Ok(LatencyReport {
        requests: requests.len(),
        cache_hits: hits,
        p50_us: pct(0.5),
        p99_us: pct(0.99),
        max_us: *lat.last().expect("nonempty"),
        forward_passes: forwards,
    })
}
