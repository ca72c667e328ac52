//! Outcome rewards for a finished trajectory.
//!
//! `total = −1 + format + 1{format = 1} · answer`, where `format` is 0.5 per
//! well-formed turn capped at 1 and `answer` is token F1 against the gold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("gold answer {0:?} has no tokens")]
    EmptyGold(String),
    #[error("no gold answers supplied")]
    NoGold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub answer: f64,
    pub total: f64,
}

/// Lowercased whitespace tokens with leading and trailing punctuation
/// stripped; tokens that were pure punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn format_reward(traj: &Trajectory) -> f64 {
    let n = traj.turns.iter().filter(|t| t.well_formed).count();
    (0.5 * n as f64).min(1.0)
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset-overlap F1 over pre-tokenized inputs.
pub fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let p = counts(pred);
    let g = counts(gold);
    let overlap: usize = p.iter().map(|(t, c)| (*c).min(*g.get(t).unwrap_or(&0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

pub fn token_f1(prediction: &str, gold: &str) -> Result<f64, RewardError> {
    let g = tokenize(gold);
    if g.is_empty() {
        return Err(RewardError::EmptyGold(gold.to_string()));
    }
    Ok(f1_tokens(&tokenize(prediction), &g))
}

/// Best F1 of `prediction` over several golds.
pub fn best_f1(prediction: &str, golds: &[String]) -> Result<f64, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::NoGold);
    }
    let mut best = 0.0f64;
    for g in golds {
        best = best.max(token_f1(prediction, g)?);
    }
    Ok(best)
}

pub fn combine(format: f64, answer: f64) -> RewardBreakdown {
    let gated = if format == 1.0 { answer } else { 0.0 };
    RewardBreakdown {
        format,
        answer,
        total: -1.0 + format + gated,
    }
}

pub fn total_reward(traj: &Trajectory, golds: &[String]) -> Result<RewardBreakdown, RewardError> {
    let format = format_reward(traj);
    let answer = match &traj.final_answer {
        Some(a) => best_f1(a, golds)?,
        None => {
            if golds.is_empty() {
                return Err(RewardError::NoGold);
            }
            0.0
        }
    };
    Ok(combine(format, answer))
}
