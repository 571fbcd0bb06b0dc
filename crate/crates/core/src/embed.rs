//! Text embedding backends.
//!
//! The default backend hashes case-folded tokens into a fixed number of
//! buckets, counts occurrences and L2-normalizes. It needs no model files
//! and gives bit-identical vectors across runs, which keeps retrieval fully
//! checkable against brute force.

use std::time::Duration;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::ErrorKind;
use crate::numeric;

pub const DEFAULT_DIMENSION: usize = 256;

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<F = f64> {
    values: Vec<F>,
}

impl<F: Float + Serialize> Serialize for EmbeddingVector<F> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("EmbeddingVector", 2)?;
        st.serialize_field("values", &self.values)?;
        st.serialize_field("norm", &self.norm())?;
        st.end()
    }
}

impl<F: Float> EmbeddingVector<F> {
    /// Normalizes `values`; `None` for zero or non-finite input.
    pub fn from_raw(mut values: Vec<F>) -> Option<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        numeric::normalize_in_place(&mut values).then_some(Self { values })
    }

    /// Wraps values that are already unit length (within 1e-6), keeping
    /// them bit for bit.
    pub fn from_normalized(values: Vec<F>) -> Option<Self> {
        let tol = F::from(1e-6)?;
        let norm = numeric::l2_norm(&values);
        (norm.is_finite() && (norm - F::one()).abs() <= tol).then_some(Self { values })
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> F {
        numeric::l2_norm(&self.values)
    }

    pub fn cosine(&self, other: &Self) -> F {
        numeric::cosine(&self.values, &other.values)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend unavailable: {0}")]
    Unavailable(String),
    #[error("embedding backend returned an invalid vector: {0}")]
    BadResponse(String),
}

impl EmbedError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EmbedError::EmptyText => ErrorKind::Validation,
            EmbedError::Unavailable(_) | EmbedError::BadResponse(_) => ErrorKind::BackendUnavailable,
        }
    }

    /// Transport failures may succeed on retry; validation failures never do.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Unavailable(_))
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbedError>;
}

/// Lowercased whitespace tokens with leading/trailing punctuation removed.
/// A token made only of punctuation is kept as is.
pub fn embedding_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|raw| {
        let lower = raw.to_lowercase();
        let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() {
            lower
        } else {
            trimmed.to_string()
        }
    })
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub struct HashedBagEmbedder {
    dimension: usize,
}

impl HashedBagEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }

    pub fn embed_as<F: Float>(&self, text: &str) -> Result<EmbeddingVector<F>, EmbedError> {
        let mut counts = vec![F::zero(); self.dimension];
        let mut any = false;
        for tok in embedding_tokens(text) {
            let b = self.bucket(&tok);
            counts[b] = counts[b] + F::one();
            any = true;
        }
        if !any {
            return Err(EmbedError::EmptyText);
        }
        Ok(EmbeddingVector::from_raw(counts).expect("non-empty bag has positive norm"))
    }
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashedBagEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbedError> {
        self.embed_as(text)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Remote backend: `POST {endpoint}` with `{"text": ...}`, expecting
/// `{"vector": [...]}` of the configured dimension. The response is
/// re-normalized locally.
pub struct HttpEmbedder {
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, dimension: usize) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| EmbedError::Unavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            dimension,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { text })
            .send()
            .map_err(|e| EmbedError::Unavailable(e.to_string()))?;
        if resp.status().is_server_error() {
            return Err(EmbedError::Unavailable(format!("status {}", resp.status())));
        }
        if !resp.status().is_success() {
            return Err(EmbedError::BadResponse(format!("status {}", resp.status())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if body.vector.len() != self.dimension {
            return Err(EmbedError::BadResponse(format!(
                "expected dimension {}, got {}",
                self.dimension,
                body.vector.len()
            )));
        }
        EmbeddingVector::from_raw(body.vector)
            .ok_or_else(|| EmbedError::BadResponse("zero or non-finite vector".into()))
    }
}
