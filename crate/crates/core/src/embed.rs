//! Text embedding providers.
//!
//! Queries and filtering templates are embedded outside this crate. A
//! provider is either a precomputed file (JSON lines, `{"text", "vector"}`)
//! or the HTTP embedding sidecar:
//!
//! * `GET /meta` → `{"model": str, "d": int, "max_input_length": int}`
//! * `POST /embed/text` with `{"model": str|null, "inputs": [str]}` →
//!   `{"model": str, "d": int, "vectors": [[f32]]}`, order-aligned with `inputs`
//! * status 400 malformed, 413 input too long, 503 model not ready (retried)

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::unit_or_renormalize;

/// Environment variable overriding the configured sidecar endpoint.
pub const ENDPOINT_ENV: &str = "TDC_EMBED_ENDPOINT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("no embedding for {0:?}")]
    Missing(String),
    #[error("embedding service unavailable ({message}); retryable")]
    Unavailable { message: String },
    #[error("input {text:?} exceeds the service limit of {limit} characters")]
    InputTooLong { text: String, limit: usize },
    #[error("embedding service rejected the request: {0}")]
    Rejected(String),
    #[error("malformed embedding response: {0}")]
    Protocol(String),
    #[error("embedding for {text:?} has dimension {found}, expected {expected}")]
    Dimension { text: String, expected: usize, found: usize },
    #[error("embedding for {text:?} has norm {norm}, not within 1e-3 of 1")]
    NotUnit { text: String, norm: f32 },
    #[error("cannot load embedding file: {0}")]
    File(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable { .. })
    }
}

/// Resolves text to unit-norm embeddings. Implementations must tolerate concurrent calls.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per input, in input order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;

    fn describe(&self) -> String;
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingLine {
    text: String,
    vector: Vec<f32>,
}

/// Precomputed embeddings keyed by exact text.
#[derive(Debug, Clone, Default)]
pub struct FileEmbeddingProvider {
    dim: usize,
    map: HashMap<String, Vec<f32>>,
    source: String,
}

impl FileEmbeddingProvider {
    pub fn from_map(map: HashMap<String, Vec<f32>>) -> Result<Self, ProviderError> {
        let dim = map.values().next().map_or(0, Vec::len);
        let mut checked = HashMap::with_capacity(map.len());
        for (text, v) in map {
            if v.len() != dim {
                return Err(ProviderError::Dimension { text, expected: dim, found: v.len() });
            }
            let v = unit_or_renormalize(&v).map_err(|e| ProviderError::NotUnit { text: text.clone(), norm: e.norm })?;
            checked.insert(text, v);
        }
        Ok(Self { dim, map: checked, source: "in-memory".into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| ProviderError::File(format!("{}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ProviderError::File(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| ProviderError::File(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            map.insert(entry.text, entry.vector);
        }
        let mut p = Self::from_map(map)?;
        p.source = path.display().to_string();
        Ok(p)
    }

    /// Writes entries sorted by text so fixture files are reproducible.
    pub fn write(entries: &HashMap<String, Vec<f32>>, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut keys: Vec<&String> = entries.keys().collect();
        keys.sort();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for k in keys {
            let line = EmbeddingLine { text: k.clone(), vector: entries[k].clone() };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        texts.iter().map(|t| self.map.get(t).cloned().ok_or_else(|| ProviderError::Missing(t.clone()))).collect()
    }

    fn describe(&self) -> String {
        format!("file:{}", self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMeta {
    pub model: String,
    pub d: usize,
    pub max_input_length: usize,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: Option<&'a str>,
    inputs: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    #[allow(dead_code)]
    model: String,
    d: usize,
    vectors: Vec<Vec<f32>>,
}

/// Client for the embedding sidecar.
#[derive(Debug)]
pub struct HttpEmbeddingProvider {
    base: String,
    client: reqwest::blocking::Client,
    meta: ServiceMeta,
    batch_size: usize,
    max_attempts: u32,
}

impl HttpEmbeddingProvider {
    /// Connects and reads `/meta`. Fails if the service reports a different
    /// dimension than `expected_dim` (when given).
    pub fn connect(endpoint: &str, expected_dim: Option<usize>) -> Result<Self, ProviderError> {
        let base = endpoint.trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::Unavailable { message: e.to_string() })?;
        let mut provider = Self {
            base,
            client,
            meta: ServiceMeta { model: String::new(), d: 0, max_input_length: usize::MAX },
            batch_size: 256,
            max_attempts: 4,
        };
        provider.meta = provider.with_retry(|| provider.fetch_meta())?;
        if let Some(expected) = expected_dim {
            if provider.meta.d != expected {
                return Err(ProviderError::Dimension {
                    text: "<service metadata>".into(),
                    expected,
                    found: provider.meta.d,
                });
            }
        }
        Ok(provider)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_max_attempts(mut self, attempts: u32) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn meta(&self) -> &ServiceMeta {
        &self.meta
    }

    fn fetch_meta(&self) -> Result<ServiceMeta, ProviderError> {
        let resp = self.client.get(format!("{}/meta", self.base)).send().map_err(transport)?;
        let resp = check_status(resp, None)?;
        resp.json::<ServiceMeta>().map_err(|e| ProviderError::Protocol(e.to_string()))
    }

    fn with_retry<T>(&self, mut f: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match f() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }

    fn embed_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if let Some(t) = batch.iter().find(|t| t.chars().count() > self.meta.max_input_length) {
            return Err(ProviderError::InputTooLong { text: t.clone(), limit: self.meta.max_input_length });
        }
        let body = EmbedRequest { model: Some(&self.meta.model).filter(|m| !m.is_empty()).map(|m| m.as_str()), inputs: batch };
        let resp = self.client.post(format!("{}/embed/text", self.base)).json(&body).send().map_err(transport)?;
        let resp = check_status(resp, Some((batch, self.meta.max_input_length)))?;
        let parsed: EmbedResponse = resp.json().map_err(|e| ProviderError::Protocol(e.to_string()))?;
        if parsed.vectors.len() != batch.len() {
            return Err(ProviderError::Protocol(format!(
                "{} vectors for {} inputs",
                parsed.vectors.len(),
                batch.len()
            )));
        }
        if parsed.d != self.meta.d {
            return Err(ProviderError::Protocol(format!("response d={} but service reports d={}", parsed.d, self.meta.d)));
        }
        batch
            .iter()
            .zip(parsed.vectors)
            .map(|(text, v)| {
                if v.len() != self.meta.d {
                    return Err(ProviderError::Dimension { text: text.clone(), expected: self.meta.d, found: v.len() });
                }
                unit_or_renormalize(&v).map_err(|e| ProviderError::NotUnit { text: text.clone(), norm: e.norm })
            })
            .collect()
    }
}

fn transport(e: reqwest::Error) -> ProviderError {
    ProviderError::Unavailable { message: e.to_string() }
}

fn check_status(
    resp: reqwest::blocking::Response,
    batch: Option<(&[String], usize)>,
) -> Result<reqwest::blocking::Response, ProviderError> {
    let status = resp.status().as_u16();
    match status {
        200..=299 => Ok(resp),
        503 => Err(ProviderError::Unavailable { message: "model not ready (503)".into() }),
        413 => {
            let (text, limit) = batch
                .and_then(|(b, limit)| b.iter().max_by_key(|t| t.len()).map(|t| (t.clone(), limit)))
                .unwrap_or_default();
            Err(ProviderError::InputTooLong { text, limit })
        }
        _ => {
            let body = resp.text().unwrap_or_default();
            Err(ProviderError::Rejected(format!("status {status}: {body}")))
        }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.meta.d
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            out.extend(self.with_retry(|| self.embed_batch(batch))?);
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("service:{} model={} d={}", self.base, self.meta.model, self.meta.d)
    }
}

/// Resolves every text through `provider`, deduplicating requests.
pub fn embed_all(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<HashMap<String, Vec<f32>>, ProviderError> {
    let mut unique: Vec<String> = texts.to_vec();
    unique.sort();
    unique.dedup();
    let vectors = provider.embed_texts(&unique)?;
    Ok(unique.into_iter().zip(vectors).collect())
}
