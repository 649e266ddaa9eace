//! Text embedding behind a uniform `encode` interface.
//!
//! Providers: a remote HTTP encoder, a content-addressed on-disk cache and a
//! deterministic stub. All produce an [`EmbeddingMatrix`] whose row `i`
//! corresponds to input text `i`.

mod cache;
mod http;
mod stub;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cache::{content_key, CacheKey, VectorCache, MAGIC as CACHE_MAGIC, VERSION as CACHE_VERSION};
pub use http::HttpEmbedder;
pub use stub::stub_encode;

use crate::error::{Error, Result};

/// Embedding model the original scores were produced with; the HTTP
/// provider default.
pub const DEFAULT_MODEL_ID: &str = "mixedbread-ai/mxbai-embed-large-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    provider_tag: String,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f32>>, provider_tag: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend(r);
        }
        let m = EmbeddingMatrix { rows: n, dim, data, provider_tag: provider_tag.into(), normalized: false };
        m.check_finite()?;
        Ok(m)
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Scales every row to unit L2 norm. All-zero rows are an error.
    pub fn normalize(&mut self) -> Result<()> {
        let dim = self.dim;
        for row in self.data.chunks_exact_mut(dim.max(1)) {
            let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            for x in row.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
        }
        self.normalized = true;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    FileCache,
    Stub,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Http => "http",
            ProviderKind::FileCache => "file_cache",
            ProviderKind::Stub => "stub",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    /// Base URL for the HTTP provider; `/embed` is appended.
    pub endpoint: Option<String>,
    /// Vector cache file for the file-cache provider.
    pub path: Option<PathBuf>,
    pub model_id: String,
    /// Expected dimension. Required for the stub; checked when set otherwise.
    pub dim: Option<usize>,
    pub batch_size: usize,
    pub normalize: bool,
    pub seed: u64,
    pub max_in_flight: usize,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Stub,
            endpoint: None,
            path: None,
            model_id: "stub-bow".into(),
            dim: Some(64),
            batch_size: 64,
            normalize: true,
            seed: 0,
            max_in_flight: 1,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn stub(dim: usize, seed: u64) -> Self {
        EmbeddingProviderConfig { dim: Some(dim), seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dim {
            if d < 2 {
                return Err(Error::Config("embedding dim must be >= 2".into()));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_in_flight < 1 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        match self.kind {
            ProviderKind::Stub if self.dim.is_none() => Err(Error::Config("stub provider needs dim".into())),
            ProviderKind::Http if self.endpoint.is_none() => Err(Error::Config("http provider needs endpoint".into())),
            ProviderKind::FileCache if self.path.is_none() => Err(Error::Config("file cache provider needs path".into())),
            _ => Ok(()),
        }
    }

    /// `kind:model_id`, plus the seed for the stub.
    pub fn provider_tag(&self) -> String {
        match self.kind {
            ProviderKind::Stub => format!("stub:{}:d{}:s{}", self.model_id, self.dim.unwrap_or(0), self.seed),
            k => format!("{}:{}", k.as_str(), self.model_id),
        }
    }
}

/// A source of raw (unnormalized) text vectors.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for StubEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| stub_encode(t, self.dim, self.seed)).collect()
    }
}

/// Serves vectors from a [`VectorCache`]; any absent text is an error.
pub struct CacheEmbedder {
    pub cache: VectorCache,
}

impl Embedder for CacheEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            let key = content_key(t);
            match self.cache.get(&key) {
                Some(v) => out.push(v.to_vec()),
                None => missing.push(hex::encode(key)),
            }
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::CacheMiss(missing));
        }
        Ok(out)
    }
}

/// Builds the provider described by `cfg`.
pub fn provider_from_config(cfg: &EmbeddingProviderConfig) -> Result<Box<dyn Embedder>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::Stub => Box::new(StubEmbedder { dim: cfg.dim.unwrap_or_default(), seed: cfg.seed }),
        ProviderKind::FileCache => {
            let path = cfg.path.as_ref().expect("validated");
            Box::new(CacheEmbedder { cache: VectorCache::load(path)? })
        }
        ProviderKind::Http => Box::new(HttpEmbedder::new(cfg.endpoint.clone().expect("validated"), cfg.model_id.clone())),
    })
}

/// Embeds `texts` with the provider from `cfg`.
pub fn encode(texts: &[&str], cfg: &EmbeddingProviderConfig) -> Result<EmbeddingMatrix> {
    let provider = provider_from_config(cfg)?;
    encode_with(provider.as_ref(), texts, cfg)
}

/// Embeds `texts` in batches of `cfg.batch_size`, up to `cfg.max_in_flight`
/// batches concurrently; rows come back in input order.
pub fn encode_with(provider: &dyn Embedder, texts: &[&str], cfg: &EmbeddingProviderConfig) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::InvalidInput("no texts to encode".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::InvalidInput(format!("text {i} is empty")));
    }
    let batches: Vec<&[&str]> = texts.chunks(cfg.batch_size).collect();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(texts.len());
    for group in batches.chunks(cfg.max_in_flight) {
        let results: Vec<Result<Vec<Vec<f32>>>> = if group.len() == 1 {
            vec![provider.embed_batch(group[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|b| s.spawn(move || provider.embed_batch(b))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            })
        };
        for (batch, res) in group.iter().zip(results) {
            let vecs = res?;
            if vecs.len() != batch.len() {
                return Err(Error::Provider(format!("expected {} vectors, got {}", batch.len(), vecs.len())));
            }
            rows.extend(vecs);
        }
    }
    let mut m = EmbeddingMatrix::from_rows(rows, cfg.provider_tag())?;
    if let Some(d) = cfg.dim {
        if m.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: m.dim() });
        }
    }
    if cfg.normalize {
        m.normalize()?;
    }
    Ok(m)
}
