//! Text embeddings and an exact cosine-similarity vector store.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::clustering::HeatLevel;
use crate::corpus::EventCorpus;
use crate::fsio;
use crate::llm::{AttemptError, RetryPolicy};

pub const DEFAULT_DIM: usize = 1024;
pub const DEFAULT_HASH_SEED: u64 = 0x6865_6174_6c76_6c31;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding vector is zero")]
    ZeroVector,
    #[error("embedding vector has no entries or a non-finite entry")]
    InvalidVector,
    #[error("remote embedder failed after {attempts} attempt(s): {message}")]
    Remote { attempts: usize, message: String },
    #[error("missing environment variable {0} for the embedder api key")]
    MissingKey(String),
    #[error("no precomputed vector for text {0:?}")]
    UnknownText(String),
    #[error("event {id:?}: {source}")]
    Event {
        id: String,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("event {0:?} has no heat level")]
    MissingLevel(String),
    #[error("duplicate id {0:?} in vector store")]
    DuplicateId(String),
    #[error("vector store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// A text-to-vector backend.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    /// Short description for run manifests.
    fn describe(&self) -> String;
}

/// Character-trigram feature hashing: every trigram of the text adds one to
/// the bucket chosen by a seeded xxh3 hash, and the counts are L2-normalized.
/// Texts shorter than three characters hash as a single gram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn bucket(&self, gram: &[char], buf: &mut String) -> usize {
        buf.clear();
        buf.extend(gram);
        (xxh3_64_with_seed(buf.as_bytes(), self.seed) % self.dim as u64) as usize
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0.0; self.dim];
        let mut buf = String::new();
        if chars.len() < 3 {
            counts[self.bucket(&chars, &mut buf)] += 1.0;
        } else {
            for gram in chars.windows(3) {
                counts[self.bucket(gram, &mut buf)] += 1.0;
            }
        }
        EmbeddingVector::new(counts)?.normalized()
    }

    fn describe(&self) -> String {
        format!("hashing-trigram(dim={},seed={:#x})", self.dim, self.seed)
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct RemoteResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP embedding service: POST `{"texts": [...]}`, answer
/// `{"vectors": [[...]]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    api_key: Option<String>,
    dim: usize,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: &str,
        api_key_env: Option<&str>,
        dim: usize,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| EmbedError::MissingKey(var.to_string()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Remote {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            api_key,
            dim,
            retry,
            http,
        })
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let body = RemoteRequest { texts };
        let outcome = self.retry.run(|| {
            let mut req = self.http.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| e.to_string())?;
            let status = resp.status();
            if !status.is_success() {
                return Err(AttemptError {
                    message: format!("http status {status}"),
                    retryable: status.is_server_error() || status.as_u16() == 429,
                });
            }
            resp.json::<RemoteResponse>().map_err(|e| e.to_string().into())
        });
        let resp = outcome.map_err(|(attempts, message)| EmbedError::Remote { attempts, message })?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::Remote {
                attempts: 1,
                message: format!("{} vectors for {} texts", resp.vectors.len(), texts.len()),
            });
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                let v = EmbeddingVector::new(v)?;
                if v.dim() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dim,
                        found: v.dim(),
                    });
                }
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn describe(&self) -> String {
        format!("remote({},dim={})", self.endpoint, self.dim)
    }
}

/// Looks texts up in vectors computed offline, e.g. a store exported by the
/// fine-tuning job.
pub struct PrecomputedEmbedder {
    dim: usize,
    by_text: HashMap<String, EmbeddingVector>,
    source: String,
}

impl PrecomputedEmbedder {
    pub fn from_store(store: &VectorStore, source: &str) -> Self {
        let by_text = store
            .entries()
            .iter()
            .map(|e| (e.content.clone(), e.vector.clone()))
            .collect();
        Self {
            dim: store.dim(),
            by_text,
            source: source.to_string(),
        }
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.by_text
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::UnknownText(text.chars().take(40).collect()))
    }

    fn describe(&self) -> String {
        format!("precomputed({})", self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub heat_index: f64,
    pub level: HeatLevel,
    pub content: String,
    pub vector: EmbeddingVector,
}

/// Immutable after construction; safe to query from many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    entries: Vec<StoreEntry>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighbors(pub Vec<Neighbor>);

impl Neighbors {
    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|n| n.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl VectorStore {
    pub fn new(entries: Vec<StoreEntry>) -> Result<Self> {
        let dim = entries.first().map(|e| e.vector.dim()).ok_or(EmbedError::EmptyStore)?;
        let mut seen = HashSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(EmbedError::DuplicateId(e.id.clone()));
            }
            if e.vector.dim() != dim {
                return Err(EmbedError::Event {
                    id: e.id.clone(),
                    source: Box::new(EmbedError::DimensionMismatch {
                        expected: dim,
                        found: e.vector.dim(),
                    }),
                });
            }
            let n = e.vector.norm();
            if n == 0.0 {
                return Err(EmbedError::Event {
                    id: e.id.clone(),
                    source: Box::new(EmbedError::ZeroVector),
                });
            }
            norms.push(n);
        }
        Ok(Self { dim, entries, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        Ok(fsio::to_jsonl(&self.entries)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_jsonl()?.as_bytes()).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry = serde_json::from_str(line).map_err(|e| EmbedError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_checked(path)?.0)
    }

    /// Load and report soft problems: vectors that are not unit length and
    /// entries whose heat index is negative.
    pub fn load_checked(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let store = Self::from_jsonl(&text)?;
        let mut warnings = Vec::new();
        for (e, n) in store.entries.iter().zip(&store.norms) {
            if (n - 1.0).abs() > 1e-3 {
                warnings.push(format!("entry {:?} has norm {n:.6}, expected unit length", e.id));
            }
            if e.heat_index.is_nan() || e.heat_index < 0.0 {
                warnings.push(format!("entry {:?} has invalid heat index {}", e.id, e.heat_index));
            }
        }
        Ok((store, warnings))
    }

    /// The `k` most similar entries not in `exclude`, by cosine similarity
    /// with ties broken by ascending id. Full scan.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize, exclude: &HashSet<String>) -> Result<Neighbors> {
        if k == 0 {
            return Err(EmbedError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .zip(&self.norms)
            .enumerate()
            .filter(|(_, (e, _))| !exclude.contains(&e.id))
            .map(|(i, (e, n))| {
                let dot: f64 = e.vector.values().iter().zip(query.values()).map(|(a, b)| a * b).sum();
                ((dot / (n * qn)).clamp(-1.0, 1.0), i)
            })
            .collect();
        let entries = &self.entries;
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| entries[a.1].id.cmp(&entries[b.1].id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        let scored = scored
            .into_iter()
            .map(|(score, i)| Neighbor {
                id: entries[i].id.clone(),
                score,
            })
            .collect();
        Ok(Neighbors(scored))
    }
}

/// Embed every event's content. Events must already carry a level.
pub fn index_corpus(corpus: &EventCorpus, embedder: &dyn Embedder) -> Result<VectorStore> {
    let mut entries = Vec::with_capacity(corpus.events.len());
    for event in &corpus.events {
        let level = event.level.ok_or_else(|| EmbedError::MissingLevel(event.id.clone()))?;
        let vector = embedder.embed(&event.content).map_err(|e| EmbedError::Event {
            id: event.id.clone(),
            source: Box::new(e),
        })?;
        entries.push(StoreEntry {
            id: event.id.clone(),
            heat_index: event.heat_index,
            level,
            content: event.content.clone(),
            vector,
        });
    }
    VectorStore::new(entries)
}
