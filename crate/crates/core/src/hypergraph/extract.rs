//! LLM-driven n-ary fact extraction.
//!
//! Each document chunk is sent once with [`EXTRACTION_PROMPT`]. The reply must
//! contain a JSON object `{"facts": [{"text": ..., "entities": [...]}]}`;
//! surrounding prose and code fences are tolerated. A chunk whose reply cannot
//! be parsed is re-asked, then skipped and counted as a warning.

use serde::Deserialize;

use super::ExtractedFact;
use crate::policy::{ChatBackend, ChatError, ChatMessage};

pub const EXTRACTION_PROMPT: &str = "Read the passage below and list every factual statement it makes. \
A statement may connect any number of entities (people, places, organisations, works, dates, quantities). \
For each statement give a short self-contained sentence restating it and the exact entity names it involves. \
Reply with JSON only, in the form \
{\"facts\": [{\"text\": \"<statement>\", \"entities\": [\"<entity>\", ...]}]}.\n\nPassage:\n{text}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionOptions {
    /// Chunks longer than this (whitespace tokens) are skipped unsent.
    pub max_chunk_tokens: usize,
    /// Requests per chunk before a malformed reply is given up on.
    pub parse_attempts: u32,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        Self {
            max_chunk_tokens: 4096,
            parse_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedChunk {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractionOutcome {
    pub facts: Vec<ExtractedFact>,
    /// Chunks whose replies never parsed.
    pub warnings: usize,
    pub skipped: Vec<SkippedChunk>,
    /// Parsed facts discarded for missing text or entities.
    pub dropped_facts: usize,
}

impl ExtractionOutcome {
    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("extraction of {doc_id} failed after {attempts} attempts: {source}")]
    Transport {
        doc_id: String,
        attempts: u32,
        #[source]
        source: ChatError,
    },
}

#[derive(Deserialize)]
struct Payload {
    facts: Vec<RawFact>,
}

#[derive(Deserialize)]
struct RawFact {
    text: Option<String>,
    #[serde(default)]
    entities: Vec<String>,
}

fn parse_payload(reply: &str) -> Option<Payload> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

/// Extracts facts from every chunk in order.
pub fn extract_facts(
    documents: &[Document],
    backend: &dyn ChatBackend,
    opts: ExtractionOptions,
) -> Result<ExtractionOutcome, ExtractError> {
    let mut out = ExtractionOutcome::default();
    for doc in documents {
        let tokens = doc.text.split_whitespace().count();
        if tokens > opts.max_chunk_tokens {
            log::warn!("chunk {} has {tokens} tokens, over the {} budget", doc.id, opts.max_chunk_tokens);
            out.skipped.push(SkippedChunk {
                doc_id: doc.id.clone(),
                reason: format!("{tokens} tokens exceeds budget of {}", opts.max_chunk_tokens),
            });
            continue;
        }
        let prompt = EXTRACTION_PROMPT.replace("{text}", &doc.text);
        let mut payload = None;
        for _ in 0..opts.parse_attempts.max(1) {
            let reply = backend
                .complete(&[ChatMessage::user(prompt.clone())])
                .map_err(|source| ExtractError::Transport {
                    doc_id: doc.id.clone(),
                    attempts: source.attempts(),
                    source,
                })?;
            payload = parse_payload(&reply.content);
            if payload.is_some() {
                break;
            }
        }
        let Some(payload) = payload else {
            log::warn!("unparseable extraction reply for chunk {}", doc.id);
            out.warnings += 1;
            out.skipped.push(SkippedChunk {
                doc_id: doc.id.clone(),
                reason: "malformed extraction reply".into(),
            });
            continue;
        };
        for f in payload.facts {
            let text = f.text.unwrap_or_default().trim().to_string();
            let entities: Vec<String> = f
                .entities
                .into_iter()
                .map(|e| e.trim().to_string())
                .filter(|e| !e.is_empty())
                .collect();
            if text.is_empty() || entities.is_empty() {
                out.dropped_facts += 1;
                continue;
            }
            out.facts.push(ExtractedFact {
                text,
                entity_names: entities,
                source_doc: doc.id.clone(),
            });
        }
    }
    Ok(out)
}
