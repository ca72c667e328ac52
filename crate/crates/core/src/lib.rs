//! Agentic retrieval over an n-ary knowledge hypergraph.
//!
//! The crate is organised bottom-up:
//!
//! - [`embed`]: the shared text encoder, cosine similarity and exact top-k.
//! - [`hypergraph`]: building, persisting and loading the knowledge hypergraph,
//!   plus LLM-driven fact extraction.
//! - [`retrieve`]: entity-anchored and direct hyperedge retrieval merged with
//!   reciprocal-rank fusion.
//! - [`env`]: the think/query/answer tag grammar and the multi-turn agent
//!   environment.
//! - [`policy`]: the policy abstraction, a tabular softmax toy policy and an
//!   inference-only chat-completion policy.
//! - [`reward`]: format reward, token-F1 answer reward and the gated total.
//! - [`grpo`]: group-relative advantages, the clipped surrogate objective with a
//!   KL penalty, and the toy training loop.
//! - [`evalkit`]: EM / F1 / retrieval-similarity metrics and the batch harness.
//! - [`config`] and [`synthetic`]: run configuration and the seeded synthetic
//!   task used to exercise the whole loop without network access.

pub mod config;
pub mod embed;
pub mod env;
pub mod evalkit;
pub mod grpo;
pub mod hypergraph;
pub mod policy;
pub mod retrieve;
pub mod reward;
pub mod synthetic;
pub mod transport;

mod hash;

pub use embed::{Encoder, EncoderKind, HashEncoder, ServiceEncoder, Vector};
pub use env::{ActionKind, AgentState, AgentTurn, EnvParams, Trajectory};
pub use hypergraph::{ExtractedFact, KnowledgeHypergraph};
pub use retrieve::{RankedFact, RetrievalParams, RetrievalQuery};
pub use reward::RewardBreakdown;
