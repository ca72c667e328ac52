//! Chat-completion client and the inference-only LLM policy.
//!
//! Wire protocol: `POST {model, messages: [{role, content}], temperature,
//! max_tokens}` → `{choices: [{message: {content}}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Emission, Policy, PolicyError};
use crate::env::{wrap_knowledge, AgentState};
use crate::transport::{self, RetryPolicy, TransportError};

/// Reasoning prompt; `{question}` is substituted with the user question.
pub const SYSTEM_TEMPLATE: &str = "You are a helpful assistant. Answer the given question. \
You can query from knowledge base provided to you to answer the question. \
You can query knowledge as many times as you want. \
You must first conduct reasoning inside <think>...</think>. \
If you need to query knowledge, you can set a query statement between <query>...</query> \
to query from knowledge base after <think>...</think>. \
When you have the final answer, you can output the answer inside <answer>...</answer>. \
Question: {question}. Assistant: ";

pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    /// Failed attempts before this reply was obtained.
    pub retries: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed chat response: {0}")]
    BadResponse(String),
}

impl ChatError {
    pub fn attempts(&self) -> u32 {
        match self {
            ChatError::Transport(t) => t.attempts(),
            ChatError::BadResponse(_) => 1,
        }
    }
}

/// Anything that can answer a chat request. [`ChatClient`] is the HTTP
/// implementation; tests substitute scripted backends.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, ChatError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, ChatError> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone)]
pub struct ChatSettings {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            temperature: 1.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            api_key: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    settings: ChatSettings,
    client: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(settings: ChatSettings) -> Result<Self, ChatError> {
        let client = transport::build_client(settings.timeout)?;
        Ok(Self { settings, client })
    }

    pub fn settings(&self) -> &ChatSettings {
        &self.settings
    }
}

impl ChatBackend for ChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, ChatError> {
        let s = &self.settings;
        let body = json!({
            "model": s.model,
            "messages": messages,
            "temperature": s.temperature,
            "max_tokens": s.max_tokens,
        });
        let delivered = transport::post_json(&self.client, &s.endpoint, s.api_key.as_deref(), &body, s.retry)?;
        let content = delivered
            .body
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| ChatError::BadResponse("missing choices[0].message.content".into()))?;
        Ok(ChatReply {
            content: content.to_string(),
            retries: delivered.retries,
        })
    }
}

/// Renders the reasoning prompt followed by the interaction so far: each prior
/// emission verbatim, then its `<knowledge>` block when one was retrieved.
pub fn render_prompt(state: &AgentState) -> String {
    let mut out = SYSTEM_TEMPLATE.replace("{question}", &state.question);
    for turn in &state.history {
        out.push_str(&turn.raw);
        if let Some(block) = &turn.retrieved {
            out.push('\n');
            out.push_str(&wrap_knowledge(block));
            out.push('\n');
        }
    }
    out
}

/// Inference-only policy backed by a chat model.
pub struct LlmPolicy<B> {
    backend: B,
    retries: u32,
}

impl<B: ChatBackend> LlmPolicy<B> {
    pub fn new(backend: B) -> Self {
        Self { backend, retries: 0 }
    }

    /// Transport retries accumulated across all emissions so far.
    pub fn retries(&self) -> u32 {
        self.retries
    }
}

impl<B: ChatBackend> Policy for LlmPolicy<B> {
    fn emit(&mut self, state: &AgentState) -> Result<Emission, PolicyError> {
        let reply = self.backend.complete(&[ChatMessage::user(render_prompt(state))])?;
        self.retries += reply.retries;
        Ok(Emission {
            text: reply.content,
            choice: None,
        })
    }
}
