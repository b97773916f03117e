//! Okapi BM25 over training notes, used to pick in-context examples.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate document id `{0}`")]
    DuplicateDoc(String),
    #[error("unknown document id `{0}`")]
    UnknownDoc(String),
    #[error("invalid BM25 parameters: k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("index cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("index cache is corrupt: {0}")]
    CorruptCache(String),
}

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocStats {
    id: String,
    len: usize,
    tf: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<DocStats>,
    df: HashMap<String, u32>,
    avgdl: f64,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build<I, S, T>(docs: I, params: Bm25Params) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        if !(params.k1 > 0.0) || !(0.0..=1.0).contains(&params.b) {
            return Err(RetrievalError::InvalidParams { k1: params.k1, b: params.b });
        }
        let mut stats = Vec::new();
        let mut df: HashMap<String, u32> = HashMap::new();
        let mut seen = HashSet::new();
        let mut total_len = 0usize;
        for (id, text) in docs {
            let id = id.into();
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateDoc(id));
            }
            let tokens = tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_default() += 1;
            }
            total_len += tokens.len();
            stats.push(DocStats { id, len: tokens.len(), tf });
        }
        let avgdl = if stats.is_empty() { 0.0 } else { total_len as f64 / stats.len() as f64 };
        let mut index = Self { params, docs: stats, df, avgdl, positions: HashMap::new() };
        index.reindex();
        Ok(index)
    }

    fn reindex(&mut self) {
        self.positions = self.docs.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).map(|&i| self.docs[i].len)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`; terms absent from the corpus score 0.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq(term);
        if df == 0 {
            return 0.0;
        }
        let n = self.docs.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score_at(&self, pos: usize, query_tokens: &[String]) -> f64 {
        let doc = &self.docs[pos];
        let Bm25Params { k1, b } = self.params;
        let norm = k1 * (1.0 - b + b * doc.len as f64 / self.avgdl);
        query_tokens
            .iter()
            .map(|q| match doc.tf.get(q) {
                Some(&tf) => {
                    let tf = tf as f64;
                    self.idf(q) * tf * (k1 + 1.0) / (tf + norm)
                }
                None => 0.0,
            })
            .sum()
    }

    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let pos = *self
            .positions
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
        Ok(self.score_at(pos, query_tokens))
    }

    /// Best `k` documents by descending score, ties by ascending id.
    pub fn top_k(&self, query_text: &str, k: usize, exclude_ids: &HashSet<String>) -> Vec<(String, f64)> {
        if k == 0 || self.docs.is_empty() {
            return Vec::new();
        }
        let query = tokenize(query_text);
        let mut scored: Vec<(usize, f64)> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(_, d)| !exclude_ids.contains(&d.id))
            .map(|(i, _)| (i, self.score_at(i, &query)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.docs[a.0].id.cmp(&self.docs[b.0].id))
        });
        scored.truncate(k);
        scored.into_iter().map(|(i, s)| (self.docs[i].id.clone(), s)).collect()
    }
}

const CACHE_MAGIC: &[u8; 8] = b"BM25IDX\0";
const CACHE_VERSION: u32 = 1;

/// Hash of the corpus and parameters an index was built from.
pub fn corpus_hash<'a, I>(docs: I, params: Bm25Params) -> [u8; 32]
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut h = Sha256::new();
    h.update(params.k1.to_le_bytes());
    h.update(params.b.to_le_bytes());
    for (id, text) in docs {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
    }
    h.finalize().into()
}

impl Bm25Index {
    /// Writes `magic | version (u32 LE) | corpus hash (32 bytes) | JSON body`.
    pub fn save_cache(&self, path: impl AsRef<Path>, corpus: &[u8; 32]) -> Result<(), RetrievalError> {
        let body = serde_json::to_vec(self).map_err(|e| RetrievalError::CorruptCache(e.to_string()))?;
        let mut f = fs::File::create(path)?;
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&CACHE_VERSION.to_le_bytes())?;
        f.write_all(corpus)?;
        f.write_all(&body)?;
        Ok(())
    }

    /// Returns `Ok(None)` when the cache is stale (version or corpus hash mismatch).
    pub fn load_cache(path: impl AsRef<Path>, corpus: &[u8; 32]) -> Result<Option<Self>, RetrievalError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 44 || &bytes[..8] != CACHE_MAGIC {
            return Err(RetrievalError::CorruptCache("bad header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CACHE_VERSION || &bytes[12..44] != corpus {
            return Ok(None);
        }
        let mut index: Self =
            serde_json::from_slice(&bytes[44..]).map_err(|e| RetrievalError::CorruptCache(e.to_string()))?;
        index.reindex();
        Ok(Some(index))
    }
}
