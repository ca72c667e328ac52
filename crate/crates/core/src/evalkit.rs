//! QA datasets, answer metrics and the batch evaluation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbedError, Encoder};
use crate::env::Trajectory;
use crate::reward::{f1_tokens, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("instance {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("run {index} has id {found:?} but instance {index} is {expected:?}")]
    IdMismatch { index: usize, expected: String, found: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge: Option<String>,
    /// Entity the question is phrased around (synthetic tasks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    /// Retrieval hops needed to reach the answer (synthetic tasks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u8>,
}

impl QAInstance {
    pub fn new(id: impl Into<String>, question: impl Into<String>, golds: &[&str]) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            golden_answers: golds.iter().map(|s| s.to_string()).collect(),
            gold_knowledge: None,
            anchor: None,
            hops: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: &str| {
            Err(EvalError::Invalid {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if self.question.trim().is_empty() {
            return bad("empty question");
        }
        if self.golden_answers.is_empty() {
            return bad("no gold answers");
        }
        if self.golden_answers.iter().any(|g| tokenize(g).is_empty()) {
            return bad("empty gold answer");
        }
        Ok(())
    }
}

/// Reads a JSONL dataset, keeping at most `limit` instances.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Vec<QAInstance>, EvalError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let inst: QAInstance = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: shown.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Case-fold, drop punctuation and the articles a / an / the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

/// Best token F1 over golds; a gold with no tokens scores 0.
pub fn f1_best(pred: &str, golds: &[String]) -> f64 {
    let p = tokenize(pred);
    golds
        .iter()
        .map(|g| f1_tokens(&p, &tokenize(g)))
        .fold(0.0, f64::max)
}

/// Cosine between retrieved and gold knowledge, or `None` when either is empty.
pub fn retrieval_similarity(retrieved: &str, gold: &str, encoder: &dyn Encoder) -> Result<Option<f64>, EvalError> {
    if retrieved.trim().is_empty() || gold.trim().is_empty() {
        return Ok(None);
    }
    let v = encoder.encode(&[retrieved, gold])?;
    Ok(Some(cosine(v[0].as_slice(), v[1].as_slice())))
}

/// One policy run over one instance; `trajectory` is `None` when the rollout aborted.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub id: String,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub prediction: Option<String>,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rs: Option<f64>,
    pub turns: usize,
    pub retrieval_turns: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    /// Mean over instances that had both retrieved and gold knowledge.
    pub rs: Option<f64>,
    pub rs_skipped: usize,
    pub mean_turns: f64,
    pub mean_retrieval_turns: f64,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub per_instance_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: Vec<InstanceRecord>,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl EvalReport {
    /// Pretty JSON without the timings block, for byte-level comparisons.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.timings = None;
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

pub fn aggregate(records: &[InstanceRecord]) -> Aggregates {
    let n = records.len().max(1) as f64;
    let rs: Vec<f64> = records.iter().filter_map(|r| r.rs).collect();
    Aggregates {
        count: records.len(),
        em: records.iter().map(|r| r.em).sum::<f64>() / n,
        f1: records.iter().map(|r| r.f1).sum::<f64>() / n,
        rs: (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64),
        rs_skipped: records.len() - rs.len(),
        mean_turns: records.iter().map(|r| r.turns as f64).sum::<f64>() / n,
        mean_retrieval_turns: records.iter().map(|r| r.retrieval_turns as f64).sum::<f64>() / n,
        aborted: records.iter().filter(|r| r.aborted).count(),
    }
}

pub fn evaluate_run(instances: &[QAInstance], runs: &[Run], encoder: &dyn Encoder) -> Result<EvalReport, EvalError> {
    if instances.len() != runs.len() {
        return Err(EvalError::IdMismatch {
            index: instances.len().min(runs.len()),
            expected: instances.get(runs.len()).map(|i| i.id.clone()).unwrap_or_default(),
            found: runs.get(instances.len()).map(|r| r.id.clone()).unwrap_or_default(),
        });
    }
    let mut records = Vec::with_capacity(runs.len());
    for (index, (inst, run)) in instances.iter().zip(runs).enumerate() {
        if inst.id != run.id {
            return Err(EvalError::IdMismatch {
                index,
                expected: inst.id.clone(),
                found: run.id.clone(),
            });
        }
        let traj = run.trajectory.as_ref();
        let prediction = traj.and_then(|t| t.final_answer.clone());
        let (em, f1) = match &prediction {
            Some(p) => (exact_match(p, &inst.golden_answers), f1_best(p, &inst.golden_answers)),
            None => (0.0, 0.0),
        };
        let retrieved = traj.map(Trajectory::retrieved_text).unwrap_or_default();
        let rs = match &inst.gold_knowledge {
            Some(gold) => retrieval_similarity(&retrieved, gold, encoder)?,
            None => None,
        };
        records.push(InstanceRecord {
            id: inst.id.clone(),
            prediction,
            em,
            f1,
            rs,
            turns: traj.map_or(0, |t| t.turns.len()),
            retrieval_turns: traj.map_or(0, Trajectory::retrieval_turns),
            aborted: traj.is_none(),
        });
    }
    let aggregates = aggregate(&records);
    Ok(EvalReport {
        instances: records,
        aggregates,
        timings: None,
    })
}
