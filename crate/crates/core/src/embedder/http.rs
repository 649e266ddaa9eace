//! Remote encoder over a minimal JSON protocol.
//!
//! `POST {endpoint}/embed` with `{"model": .., "texts": [..]}`; a 200 reply
//! carries `{"dim": d, "vectors": [[..], ..]}`. Any other status or transport
//! failure is retried with exponential backoff.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

pub struct HttpEmbedder {
    url: String,
    model: String,
    agent: ureq::Agent,
    pub attempts: u32,
    pub backoff: Duration,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpEmbedder {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            model: model.into(),
            agent,
            attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    fn try_once(&self, texts: &[&str]) -> std::result::Result<EmbedResponse, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { model: &self.model, texts })
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if status != 200 {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut().read_json::<EmbedResponse>().map_err(|e| format!("bad response body: {e}"))
    }
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.try_once(texts) {
                Ok(r) => {
                    if let Some(v) = r.vectors.iter().find(|v| v.len() != r.dim) {
                        return Err(Error::DimensionMismatch { expected: r.dim, got: v.len() });
                    }
                    return Ok(r.vectors);
                }
                Err(e) => last = e,
            }
        }
        Err(Error::Provider(format!("{} after {} attempts: {last}", self.url, self.attempts)))
    }
}
