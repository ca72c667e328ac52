//! Run configuration.
//!
//! A JSON file whose sections all default, so `{}` is a valid config. Unknown
//! keys are rejected, and `${NAME}` anywhere in the text is replaced by the
//! environment variable `NAME` before parsing.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, Encoder, EncoderKind, HashEncoder, ServiceEncoder, DEFAULT_HASH_DIM, DEFAULT_HASH_SEED};
use crate::env::EnvParams;
use crate::grpo::{GrpoConfig, ToySettings};
use crate::policy::chat::{ChatSettings, DEFAULT_MAX_TOKENS};
use crate::retrieve::RetrievalParams;
use crate::transport::RetryPolicy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("config references unset environment variable {0}")]
    MissingEnv(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dimension: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::DeterministicLocal,
            dimension: DEFAULT_HASH_DIM,
            seed: DEFAULT_HASH_SEED,
            endpoint: None,
            model: None,
            api_key: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub max_turns: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { max_turns: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChatConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            api_key: None,
            temperature: 1.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            retries: 3,
            backoff_ms: 1000,
            timeout_secs: 60,
        }
    }
}

impl ChatConfig {
    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retries.max(1),
            base_backoff: Duration::from_millis(self.backoff_ms),
        }
    }

    pub fn settings(&self) -> Result<ChatSettings, ConfigError> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| ConfigError::Invalid("chat.endpoint is required for the llm policy".into()))?;
        Ok(ChatSettings {
            endpoint,
            model: self.model.clone().unwrap_or_default(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            api_key: self.api_key.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            retry: self.retry(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalParams,
    pub env: EnvSection,
    pub grpo: GrpoConfig,
    pub toy: ToySettings,
    pub chat: ChatConfig,
}

/// Replaces each `${NAME}` with the JSON-escaped value of `$NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = &after[..end];
        let value = lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?;
        let quoted = serde_json::to_string(&value).expect("strings serialize");
        out.push_str(&quoted[1..quoted.len() - 1]);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, |k| std::env::var(k).ok())
    }

    pub fn parse_with(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let text = interpolate(text, lookup)?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.retrieval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grpo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env.max_turns == 0 {
            return Err(ConfigError::Invalid("env.max_turns must be at least 1".into()));
        }
        if self.encoder.dimension == 0 {
            return Err(ConfigError::Invalid("encoder.dimension must be positive".into()));
        }
        if self.toy.query_templates == 0 || self.toy.answer_candidates == 0 || self.toy.hash_buckets == 0 {
            return Err(ConfigError::Invalid("toy sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            max_turns: self.env.max_turns,
            retrieval: self.retrieval,
        }
    }

    pub fn build_encoder(&self) -> Result<Box<dyn Encoder>, ConfigError> {
        let e = &self.encoder;
        match e.kind {
            EncoderKind::DeterministicLocal => Ok(Box::new(HashEncoder::new(e.dimension, e.seed))),
            EncoderKind::ExternalService => {
                let endpoint = e
                    .endpoint
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("encoder.endpoint is required for external-service".into()))?;
                let enc = ServiceEncoder::new(
                    endpoint,
                    e.model.clone().unwrap_or_default(),
                    e.api_key.clone(),
                    e.dimension,
                    Duration::from_secs(e.timeout_secs),
                    self.chat.retry(),
                )
                .map_err(|err: EmbedError| ConfigError::Invalid(err.to_string()))?;
                Ok(Box::new(enc))
            }
        }
    }
}
