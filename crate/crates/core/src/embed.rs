//! The shared text encoder and exact cosine top-k.
//!
//! Two encoders implement [`Encoder`]:
//!
//! - [`HashEncoder`]: a deterministic, offline bag of hashed character
//!   trigrams (256 dimensions by default). Every test in the workspace runs on it.
//! - [`ServiceEncoder`]: a client for an OpenAI-style embedding endpoint
//!   (`{model, input}` → `{data: [{embedding}]}`).
//!
//! Both return unit-norm vectors, so cosine similarity reduces to a dot product
//! over rows of an [`EmbeddingMatrix`].

use std::cmp::Ordering;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::hash::fnv1a;
use crate::transport::{self, RetryPolicy, TransportError};

pub const DEFAULT_HASH_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_1234;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed an empty string (input #{0})")]
    EmptyText(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite component in embedding #{0}")]
    NonFinite(usize),
    #[error("embedding service transport failure: {0}")]
    Transport(#[from] TransportError),
    #[error("malformed embedding service response: {0}")]
    BadResponse(String),
}

/// A dense embedding. Encoders always produce unit-norm vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f32>);

impl Vector {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Scales to unit length. Returns `None` for the zero vector.
    pub fn normalized(&self) -> Option<Vector> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Vector(self.0.iter().map(|&x| (f64::from(x) / n) as f32).collect()))
    }

    /// Mean of the given vectors, renormalized. `None` if empty or degenerate.
    pub fn mean_normalized(vs: &[Vector]) -> Option<Vector> {
        let first = vs.first()?;
        let mut acc = vec![0f64; first.dim()];
        for v in vs {
            for (a, &x) in acc.iter_mut().zip(&v.0) {
                *a += f64::from(x);
            }
        }
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        Some(Vector(acc.iter().map(|a| (a / norm) as f32).collect()))
    }
}

/// Row-major matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_raw(dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(EmbedError::DimensionMismatch {
                    expected: 0,
                    actual: data.len(),
                });
            }
        } else if data.len() % dim != 0 {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn push(&mut self, v: &Vector) -> Result<usize, EmbedError> {
        if v.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        self.data.extend_from_slice(&v.0);
        Ok(self.rows() - 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

/// Dot product accumulated in `f64`, in index order. Never returns `-0.0`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    s + 0.0
}

/// Cosine similarity of two arbitrary (non-zero) vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Exact top-k by cosine against unit-norm rows.
///
/// Ordered by descending similarity, ties by ascending row index. Returns
/// `min(k, rows)` entries.
pub fn top_k(query: &Vector, matrix: &EmbeddingMatrix, k: usize) -> Result<Vec<(usize, f64)>, EmbedError> {
    if k == 0 {
        return Err(EmbedError::ZeroK);
    }
    if matrix.rows() == 0 {
        return Ok(Vec::new());
    }
    if query.dim() != matrix.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: matrix.dim(),
            actual: query.dim(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..matrix.rows())
        .map(|i| (i, dot(query.as_slice(), matrix.row(i))))
        .collect();
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering { b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)) };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    DeterministicLocal,
    ExternalService,
}

/// The shared encoder used for entities, hyperedges and queries.
pub trait Encoder: Send + Sync {
    fn kind(&self) -> EncoderKind;
    fn dimension(&self) -> usize;
    /// Identifier recorded in graph manifests; vectors are only comparable
    /// between encoders with equal ids.
    fn model_id(&self) -> String;
    fn encode(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError>;

    fn encode_one(&self, text: &str) -> Result<Vector, EmbedError> {
        Ok(self.encode(&[text])?.remove(0))
    }
}

/// Signed feature hashing of character trigrams.
///
/// Text is case-folded, whitespace-collapsed and padded with one space on each
/// side before windowing, so a single character still yields one trigram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM, DEFAULT_HASH_SEED)
    }
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "hash encoder dimension must be positive");
        Self { dim, seed }
    }

    fn embed_text(&self, text: &str) -> Vec<f32> {
        let chars: Vec<char> = std::iter::once(' ')
            .chain(canonical_text(text).chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut signed = vec![0f64; self.dim];
        let mut unsigned = vec![0f64; self.dim];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(self.seed, &buf[..len]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            signed[idx] += sign;
            unsigned[idx] += 1.0;
        }
        // Opposite-signed collisions can cancel on very short strings.
        let acc = if signed.iter().any(|&x| x != 0.0) { signed } else { unsigned };
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

/// Case-folded, whitespace-collapsed form of `text`.
pub fn canonical_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl Encoder for HashEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::DeterministicLocal
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> String {
        format!("hash-trigram-{}-{:x}", self.dim, self.seed)
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.trim().is_empty() {
                    Err(EmbedError::EmptyText(i))
                } else {
                    Ok(Vector(self.embed_text(t)))
                }
            })
            .collect()
    }
}

/// Client for an external embedding service.
#[derive(Debug, Clone)]
pub struct ServiceEncoder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl ServiceEncoder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, EmbedError> {
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dim,
            retry,
            client: transport::build_client(timeout)?,
        })
    }
}

impl Encoder for ServiceEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::ExternalService
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> String {
        format!("service:{}:{}", self.model, self.dim)
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText(i));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model, "input": texts });
        let delivered = transport::post_json(&self.client, &self.endpoint, self.api_key.as_deref(), &body, self.retry)?;
        let data = delivered
            .body
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| EmbedError::BadResponse("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .enumerate()
            .map(|(i, item)| {
                let raw = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| EmbedError::BadResponse(format!("item {i} has no `embedding`")))?;
                let v: Vec<f32> = raw
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<_>>()
                    .ok_or_else(|| EmbedError::BadResponse(format!("item {i} has non-numeric components")))?;
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EmbedError::NonFinite(i));
                }
                Vector(v).normalized().ok_or(EmbedError::NonFinite(i))
            })
            .collect()
    }
}
