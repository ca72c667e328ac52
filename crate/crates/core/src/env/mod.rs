//! The multi-turn agent environment.
//!
//! Each turn the policy emits tagged text; the environment parses it, runs
//! retrieval for a query, and appends the result to the state as a
//! `<knowledge>` observation. An answer ends the episode, as does running out
//! of turns (in which case there is no final answer). Malformed turns still
//! advance the episode with best-effort parsing so that the format reward can
//! see them.

pub mod grammar;

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embed::Encoder;
use crate::hypergraph::KnowledgeHypergraph;
use crate::policy::{ActionChoice, Policy, PolicyError};
use crate::retrieve::{retrieve, KnowledgeBlock, RetrievalParams, RetrievalQuery, RetrieveError};

pub use grammar::{parse_turn, serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    QueryRetrieve,
    Answer,
    /// Neither a query nor an answer could be recovered from the emission.
    NoAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurn {
    /// The policy's emission, verbatim.
    pub raw: String,
    pub think: String,
    pub action_kind: ActionKind,
    pub query: Option<String>,
    pub retrieved: Option<KnowledgeBlock>,
    pub answer: Option<String>,
    pub well_formed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<ActionChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub question: String,
    pub history: Vec<AgentTurn>,
    pub turn_index: usize,
    pub terminated: bool,
}

impl AgentState {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            history: Vec::new(),
            turn_index: 0,
            terminated: false,
        }
    }

    /// Entity ids of every fact retrieved so far, in retrieval order.
    pub fn retrieved_entity_ids(&self) -> Vec<u32> {
        self.history
            .iter()
            .filter_map(|t| t.retrieved.as_ref())
            .flat_map(KnowledgeBlock::entity_ids)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub max_turns: usize,
    pub retrieval: RetrievalParams,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            max_turns: 5,
            retrieval: RetrievalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub turns: Vec<AgentTurn>,
    pub terminated: bool,
    pub final_answer: Option<String>,
}

impl Trajectory {
    pub fn from_state(state: AgentState) -> Self {
        let final_answer = state
            .history
            .last()
            .filter(|t| t.action_kind == ActionKind::Answer)
            .and_then(|t| t.answer.clone());
        Self {
            question: state.question,
            turns: state.history,
            terminated: state.terminated,
            final_answer,
        }
    }

    pub fn retrieval_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.retrieved.is_some()).count()
    }

    /// Every retrieved fact line, concatenated in turn order.
    pub fn retrieved_text(&self) -> String {
        self.turns
            .iter()
            .filter_map(|t| t.retrieved.as_ref())
            .map(KnowledgeBlock::render)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.turns
            .iter()
            .enumerate()
            .map(|(i, t)| TraceRecord {
                turn: i,
                raw: t.raw.clone(),
                think: t.think.clone(),
                action_kind: t.action_kind,
                query: t.query.clone(),
                answer: t.answer.clone(),
                well_formed: t.well_formed,
                observation: t.retrieved.as_ref().map(wrap_knowledge).unwrap_or_default(),
            })
            .collect()
    }
}

/// One line of a `--trace` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub turn: usize,
    pub raw: String,
    pub think: String,
    pub action_kind: ActionKind,
    pub query: Option<String>,
    pub answer: Option<String>,
    pub well_formed: bool,
    pub observation: String,
}

pub fn wrap_knowledge(block: &KnowledgeBlock) -> String {
    format!("<knowledge>\n{}\n</knowledge>", block.render())
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("cannot step a terminated episode")]
    Terminated,
    #[error("max_turns must be at least 1")]
    ZeroTurns,
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error("policy failed: {0}")]
    Policy(#[from] PolicyError),
}

/// Retrieval is a pure function of the query text, so results are memoized.
pub struct Environment<'a> {
    graph: &'a KnowledgeHypergraph,
    encoder: &'a dyn Encoder,
    params: EnvParams,
    memo: Mutex<HashMap<String, KnowledgeBlock>>,
}

impl<'a> Environment<'a> {
    pub fn new(graph: &'a KnowledgeHypergraph, encoder: &'a dyn Encoder, params: EnvParams) -> Self {
        Self {
            graph,
            encoder,
            params,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn graph(&self) -> &KnowledgeHypergraph {
        self.graph
    }

    pub fn retrieve(&self, query: &str) -> Result<KnowledgeBlock, RetrieveError> {
        if let Some(b) = self.memo.lock().expect("memo lock").get(query) {
            return Ok(b.clone());
        }
        let block = retrieve(self.graph, self.encoder, &RetrievalQuery::new(query), &self.params.retrieval)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(query.to_string(), block.clone());
        Ok(block)
    }

    /// Applies one parsed turn and returns the observation text.
    pub fn step(&self, state: &mut AgentState, mut turn: AgentTurn) -> Result<String, EnvError> {
        if self.params.max_turns == 0 {
            return Err(EnvError::ZeroTurns);
        }
        if state.terminated {
            return Err(EnvError::Terminated);
        }
        let mut observation = String::new();
        match turn.action_kind {
            ActionKind::QueryRetrieve => {
                let q = turn.query.as_deref().unwrap_or_default();
                let block = self.retrieve(q)?;
                observation = wrap_knowledge(&block);
                turn.retrieved = Some(block);
            }
            ActionKind::Answer => state.terminated = true,
            ActionKind::NoAction => {}
        }
        state.history.push(turn);
        state.turn_index += 1;
        if state.turn_index >= self.params.max_turns {
            state.terminated = true;
        }
        Ok(observation)
    }

    /// Runs `policy` on `question` until it answers or the budget runs out.
    pub fn rollout<P: Policy + ?Sized>(&self, policy: &mut P, question: &str) -> Result<Trajectory, EnvError> {
        let mut state = AgentState::new(question);
        while !state.terminated {
            let emission = policy.emit(&state)?;
            let mut turn = parse_turn(&emission.text);
            turn.choice = emission.choice;
            self.step(&mut state, turn)?;
        }
        Ok(Trajectory::from_state(state))
    }
}
