//! Policies that drive the agent environment.
//!
//! A [`Policy`] turns an [`AgentState`] into one raw tagged emission. The
//! environment parses that text itself, so a policy never reports structure
//! it did not write. Trainable policies additionally attach the
//! [`ActionChoice`] they sampled, which carries the exact log-probability the
//! GRPO ratio needs.

pub mod chat;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::env::AgentState;

pub use chat::{render_prompt, ChatBackend, ChatClient, ChatError, ChatMessage, ChatReply, LlmPolicy, SYSTEM_TEMPLATE};
pub use toy::{ActionMenu, GradTable, ToyPolicy, ToyPolicyParams};

/// The categorical draw behind a toy-policy emission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionChoice {
    pub bucket: usize,
    pub action: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub text: String,
    pub choice: Option<ActionChoice>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("chat transport failure: {0}")]
    Chat(#[from] ChatError),
    #[error("bucket {bucket} out of range (table has {rows} rows)")]
    BucketOutOfRange { bucket: usize, rows: usize },
    #[error("action {action} out of range ({actions} actions)")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("parameter table mismatch: {0}")]
    Shape(String),
}

pub trait Policy {
    fn emit(&mut self, state: &AgentState) -> Result<Emission, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn emit(&mut self, state: &AgentState) -> Result<Emission, PolicyError> {
        (**self).emit(state)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn emit(&mut self, state: &AgentState) -> Result<Emission, PolicyError> {
        (**self).emit(state)
    }
}
