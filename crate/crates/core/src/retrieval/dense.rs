//! Exact cosine search over unit-normalized embeddings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::RetrievalError;
use crate::gateway::{HttpProvider, ProviderConfig, ReqwestTransport, Transport};
use crate::model::{tokenize, Example, RetrievalHit, RetrievalSource};

pub const DENSE_FORMAT_VERSION: u32 = 1;

pub trait Embedder: Send + Sync {
    fn embedder_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::EmptyText);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag of words: each lowercased token adds 1 to bucket
/// `fnv1a(token) % 64`, then the vector is L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub const ID: &'static str = "mock-hash-64";
    pub const DIMENSION: usize = 64;

    pub fn bucket(token: &str) -> usize {
        (fnv1a(token.as_bytes()) % Self::DIMENSION as u64) as usize
    }
}

impl Embedder for MockEmbedder {
    fn embedder_id(&self) -> &str {
        Self::ID
    }

    fn dimension(&self) -> usize {
        Self::DIMENSION
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut v = vec![0.0; Self::DIMENSION];
        for t in tokenize(text) {
            v[Self::bucket(&t)] += 1.0;
        }
        l2_normalize(v)
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder<T: Transport = ReqwestTransport> {
    provider: HttpProvider<T>,
    embedder_id: String,
    dimension: usize,
}

impl HttpEmbedder<ReqwestTransport> {
    pub fn new(config: ProviderConfig, dimension: usize) -> Result<Self, RetrievalError> {
        Ok(Self::with_provider(HttpProvider::new(config)?, dimension))
    }
}

impl<T: Transport> HttpEmbedder<T> {
    pub fn with_provider(provider: HttpProvider<T>, dimension: usize) -> Self {
        let embedder_id = format!("http:{}", provider.config().model);
        Self {
            provider,
            embedder_id,
            dimension,
        }
    }
}

impl<T: Transport> Embedder for HttpEmbedder<T> {
    fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let body = json!({"model": self.provider.config().model, "input": text});
        let resp = self.provider.post_with_retries(&body)?;
        let v: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if v.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                got: v.len(),
            });
        }
        l2_normalize(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub format_version: u32,
    pub embedder_id: String,
    pub dimension: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl DenseIndex {
    /// Embeds each example's text as produced by `text_of`.
    pub fn build(
        examples: &[Example],
        embedder: &dyn Embedder,
        text_of: impl Fn(&Example) -> String,
    ) -> Result<Self, RetrievalError> {
        if examples.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut vectors = Vec::with_capacity(examples.len());
        for ex in examples {
            let v = embedder.embed(&text_of(ex))?;
            if v.len() != embedder.dimension() {
                return Err(RetrievalError::Dimension {
                    expected: embedder.dimension(),
                    got: v.len(),
                });
            }
            vectors.push(v);
        }
        Ok(Self {
            format_version: DENSE_FORMAT_VERSION,
            embedder_id: embedder.embedder_id().to_string(),
            dimension: embedder.dimension(),
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            vectors,
        })
    }

    /// Builds directly from precomputed vectors, normalizing each.
    pub fn from_vectors(
        embedder_id: impl Into<String>,
        entries: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, RetrievalError> {
        let dimension = entries.first().map(|e| e.1.len()).ok_or(RetrievalError::EmptyCorpus)?;
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dimension {
                return Err(RetrievalError::Dimension {
                    expected: dimension,
                    got: v.len(),
                });
            }
            ids.push(id);
            vectors.push(l2_normalize(v)?);
        }
        Ok(Self {
            format_version: DENSE_FORMAT_VERSION,
            embedder_id: embedder_id.into(),
            dimension,
            ids,
            vectors,
        })
    }

    pub fn check_version(&self) -> Result<(), RetrievalError> {
        if self.format_version != DENSE_FORMAT_VERSION {
            return Err(RetrievalError::FormatVersion(self.format_version));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, example_id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|id| id == example_id)
            .map(|i| self.vectors[i].as_slice())
    }

    /// Top `limit` by cosine similarity to an already-normalized query
    /// vector, skipping `exclude`.
    pub fn query_vector(
        &self,
        query: &[f64],
        limit: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if query.len() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                got: query.len(),
            });
        }
        if limit == 0 {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(&self.ids[*i]))
            .map(|(i, v)| (i, v.iter().zip(query).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored
            .into_iter()
            .take(limit)
            .map(|(i, score)| RetrievalHit {
                example_id: self.ids[i].clone(),
                score,
                source: RetrievalSource::ModelBased,
            })
            .collect())
    }

    pub fn query(
        &self,
        text: &str,
        limit: usize,
        exclude: &HashSet<String>,
        embedder: &dyn Embedder,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if embedder.embedder_id() != self.embedder_id {
            return Err(RetrievalError::EmbedderMismatch {
                index: self.embedder_id.clone(),
                query: embedder.embedder_id().to_string(),
            });
        }
        if limit == 0 {
            return Ok(Vec::new());
        }
        let q = embedder.embed(text)?;
        self.query_vector(&q, limit, exclude)
    }
}
