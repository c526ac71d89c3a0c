//! Embedding providers.
//!
//! Every vector leaving [`EmbeddingProvider::embed_batch`] is L2-normalized, so
//! downstream similarity is a plain dot product and positive rescaling of a
//! backend's raw output never changes a ranking.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteHttp,
    DeterministicTest,
    Custom,
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("input {index} is empty")]
    EmptyInput { index: usize },
    #[error("embedding transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding server returned {status}: {message}")]
    Status { status: u16, message: String },
    #[error("embedding server returned {received} vectors, expected {expected}")]
    CountMismatch { expected: usize, received: usize },
    #[error("vector {index} has {received} components, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        received: usize,
    },
    #[error("vector {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("malformed embedding response: {0}")]
    Decode(String),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Transport { .. })
    }
}

/// Produces un-normalized vectors. Implementations need not validate counts or
/// dimensions; [`EmbeddingProvider`] does.
pub trait RawEmbedder: Send + Sync {
    fn kind(&self) -> ProviderKind;
    fn dimension(&self) -> usize;
    fn embed_raw(&self, modality: Modality, inputs: &[String])
        -> Result<Vec<Vec<f64>>, EmbedError>;
}

pub struct EmbeddingProvider {
    modality: Modality,
    inner: Box<dyn RawEmbedder>,
}

impl std::fmt::Debug for EmbeddingProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingProvider")
            .field("modality", &self.modality)
            .field("kind", &self.inner.kind())
            .field("dimension", &self.inner.dimension())
            .finish()
    }
}

impl EmbeddingProvider {
    pub fn new(modality: Modality, inner: Box<dyn RawEmbedder>) -> Self {
        EmbeddingProvider { modality, inner }
    }

    pub fn hashing(modality: Modality, dimension: usize, seed: u64) -> Self {
        Self::new(modality, Box::new(HashingEmbedder::new(dimension, seed)))
    }

    pub fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    pub fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if inputs.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        if let Some(index) = inputs.iter().position(|s| s.is_empty()) {
            return Err(EmbedError::EmptyInput { index });
        }
        let raw = self.inner.embed_raw(self.modality, inputs)?;
        if raw.len() != inputs.len() {
            return Err(EmbedError::CountMismatch {
                expected: inputs.len(),
                received: raw.len(),
            });
        }
        let dim = self.dimension();
        raw.into_iter()
            .enumerate()
            .map(|(index, v)| {
                if v.len() != dim {
                    return Err(EmbedError::DimensionMismatch {
                        index,
                        expected: dim,
                        received: v.len(),
                    });
                }
                normalize(v).ok_or(EmbedError::ZeroVector { index })
            })
            .collect()
    }

    pub fn embed_one(&self, input: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_batch(&[input.to_string()])?.remove(0))
    }
}

pub fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded feature hashing of character trigrams and word unigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    seed: u64,
}

pub const DEFAULT_HASH_DIMENSION: usize = 64;

impl HashingEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        HashingEmbedder { dimension, seed }
    }

    fn bucket(&self, kind: u8, feature: &str) -> usize {
        // FNV-1a over (seed, kind, feature); stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        self.seed.to_le_bytes().into_iter().for_each(&mut eat);
        eat(kind);
        feature.bytes().for_each(&mut eat);
        (h % self.dimension as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        for w in &words {
            v[self.bucket(b'w', w)] += 1.0;
        }
        let padded: Vec<char> = format!(
            " {} ",
            lowered.split_whitespace().collect::<Vec<_>>().join(" ")
        )
        .chars()
        .collect();
        for gram in padded.windows(3) {
            let g: String = gram.iter().collect();
            v[self.bucket(b'c', &g)] += 1.0;
        }
        v
    }
}

impl RawEmbedder for HashingEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::DeterministicTest
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(
        &self,
        _modality: Modality,
        inputs: &[String],
    ) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(inputs.iter().map(|s| self.embed_text(s)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub batch_size: usize,
    pub api_key: Option<String>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            timeout: Duration::from_secs(30),
            max_attempts: 3,
            batch_size: 64,
            api_key: None,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    modality: Modality,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {base}/embed`.
pub struct RemoteEmbedder {
    endpoint: String,
    dimension: usize,
    opts: RemoteOptions,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, dimension: usize, opts: RemoteOptions) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(opts.timeout)
            .build()
            .map_err(|e| EmbedError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(RemoteEmbedder {
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            dimension,
            opts,
            client,
        })
    }

    fn post_once(&self, modality: Modality, chunk: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut last = None;
        let attempts = self.opts.max_attempts.max(1);
        for attempt in 1..=attempts {
            let mut req = self.client.post(&self.endpoint).json(&EmbedRequest {
                modality,
                inputs: chunk,
            });
            if let Some(key) = &self.opts.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: EmbedResponse =
                            resp.json().map_err(|e| EmbedError::Decode(e.to_string()))?;
                        if body.vectors.len() != chunk.len() {
                            return Err(EmbedError::CountMismatch {
                                expected: chunk.len(),
                                received: body.vectors.len(),
                            });
                        }
                        return Ok(body.vectors);
                    }
                    let message = resp.text().unwrap_or_default();
                    if status.is_server_error() && attempt < attempts {
                        tracing::warn!(attempt, %status, "embedding request failed, retrying");
                        continue;
                    }
                    return Err(EmbedError::Status {
                        status: status.as_u16(),
                        message,
                    });
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding transport error");
                    last = Some(e.to_string());
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(EmbedError::Transport {
            attempts,
            message: last.unwrap_or_default(),
        })
    }
}

impl RawEmbedder for RemoteEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteHttp
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(
        &self,
        modality: Modality,
        inputs: &[String],
    ) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.opts.batch_size.max(1)) {
            out.extend(self.post_once(modality, chunk)?);
        }
        Ok(out)
    }
}
