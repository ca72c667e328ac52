//! JSON-over-HTTP POST with bounded retries, shared by the chat and
//! embedding clients.

use std::time::Duration;

use serde_json::Value;

/// Retry schedule: `attempts` total tries, sleeping `base_backoff * 2^i`
/// after the i-th failure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("request to {url} failed after {attempts} attempt(s): {last}")]
    Exhausted {
        url: String,
        attempts: u32,
        last: String,
    },
    #[error("could not build HTTP client: {0}")]
    Client(String),
}

impl TransportError {
    pub fn attempts(&self) -> u32 {
        match self {
            TransportError::Exhausted { attempts, .. } => *attempts,
            TransportError::Client(_) => 0,
        }
    }
}

/// A successful response plus how many failed attempts preceded it.
#[derive(Debug, Clone)]
pub struct Delivered {
    pub body: Value,
    pub retries: u32,
}

pub(crate) fn build_client(timeout: Duration) -> Result<reqwest::blocking::Client, TransportError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| TransportError::Client(e.to_string()))
}

pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    retry: RetryPolicy,
) -> Result<Delivered, TransportError> {
    let attempts = retry.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(retry.base_backoff * 2u32.saturating_pow(attempt - 1));
        }
        let mut req = client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Ok(resp) if resp.status().is_success() => match resp.json::<Value>() {
                Ok(body) => {
                    return Ok(Delivered {
                        body,
                        retries: attempt,
                    })
                }
                Err(e) => last = format!("invalid JSON body: {e}"),
            },
            Ok(resp) => last = format!("HTTP {}", resp.status()),
            Err(e) => last = e.to_string(),
        }
        log::warn!("attempt {} of {attempts} to {url} failed: {last}", attempt + 1);
    }
    Err(TransportError::Exhausted {
        url: url.to_string(),
        attempts,
        last,
    })
}
