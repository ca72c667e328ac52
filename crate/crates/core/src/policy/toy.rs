//! Tabular softmax policy over a fixed action menu.
//!
//! The think / intent / content factorization collapses into a single
//! categorical draw: the think text is a fixed template, and each action id
//! names either a query template or an answer slot. Logits are indexed by a
//! state bucket `(turn_index, hash of retrieved entity ids)`, which keeps log-
//! probabilities and their gradients exact.
//!
//! Action ids `0..Q` are query templates: template 0 repeats the question,
//! template `j > 0` asks about the `j`-th answer candidate. Ids `Q..Q+A` are
//! answer slots: slot `j` answers with candidate `j` (wrapping). Candidates are
//! the distinct entities seen so far, most recent knowledge first, excluding
//! entities the question already names.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionChoice, Emission, Policy, PolicyError};
use crate::env::{grammar, AgentState};
use crate::hash::fnv1a_u64s;

const BUCKET_SEED: u64 = 0x0b0c_4e75;
const THINK_QUERY: &str = "More knowledge is needed before answering.";
const THINK_ANSWER: &str = "The retrieved knowledge is sufficient to answer.";

/// Numerically stable `log softmax(row / temperature)`.
pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicyParams {
    turns: usize,
    hash_buckets: usize,
    actions: usize,
    logits: Vec<f64>,
}

/// Sparse on-disk form: only rows with a non-zero entry are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseParams {
    pub turns: usize,
    pub hash_buckets: usize,
    pub actions: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl ToyPolicyParams {
    /// All-zero (uniform) logits.
    pub fn new(turns: usize, hash_buckets: usize, actions: usize) -> Self {
        assert!(turns > 0 && hash_buckets > 0 && actions > 0, "toy policy dimensions must be positive");
        Self {
            turns,
            hash_buckets,
            actions,
            logits: vec![0.0; turns * hash_buckets * actions],
        }
    }

    pub fn from_logits(turns: usize, hash_buckets: usize, actions: usize, logits: Vec<f64>) -> Result<Self, PolicyError> {
        if turns == 0 || hash_buckets == 0 || actions == 0 {
            return Err(PolicyError::Shape("dimensions must be positive".into()));
        }
        if logits.len() != turns * hash_buckets * actions {
            return Err(PolicyError::Shape(format!(
                "expected {} logits, got {}",
                turns * hash_buckets * actions,
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(PolicyError::Shape("non-finite logit".into()));
        }
        Ok(Self {
            turns,
            hash_buckets,
            actions,
            logits,
        })
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    pub fn hash_buckets(&self) -> usize {
        self.hash_buckets
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn rows(&self) -> usize {
        self.turns * self.hash_buckets
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn check_bucket(&self, bucket: usize) -> Result<(), PolicyError> {
        if bucket >= self.rows() {
            return Err(PolicyError::BucketOutOfRange {
                bucket,
                rows: self.rows(),
            });
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<(), PolicyError> {
        if action >= self.actions {
            return Err(PolicyError::ActionOutOfRange {
                action,
                actions: self.actions,
            });
        }
        Ok(())
    }

    pub fn row(&self, bucket: usize) -> Result<&[f64], PolicyError> {
        self.check_bucket(bucket)?;
        Ok(&self.logits[bucket * self.actions..(bucket + 1) * self.actions])
    }

    pub fn row_mut(&mut self, bucket: usize) -> Result<&mut [f64], PolicyError> {
        self.check_bucket(bucket)?;
        let a = self.actions;
        Ok(&mut self.logits[bucket * a..(bucket + 1) * a])
    }

    pub fn log_probs(&self, bucket: usize, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        Ok(log_softmax(self.row(bucket)?, temperature))
    }

    pub fn log_prob(&self, bucket: usize, action: usize, temperature: f64) -> Result<f64, PolicyError> {
        self.check_action(action)?;
        Ok(self.log_probs(bucket, temperature)?[action])
    }

    /// Gradient of `log π(action | bucket)` with respect to every logit.
    /// Only the `bucket` row is non-zero: `(1{a = b} − π(b)) / T`.
    pub fn grad_log_prob(&self, bucket: usize, action: usize, temperature: f64) -> Result<GradTable, PolicyError> {
        self.check_action(action)?;
        let lp = self.log_probs(bucket, temperature)?;
        let mut g = GradTable::new(self.actions);
        let row = g.row_mut(bucket);
        for (b, l) in lp.iter().enumerate() {
            let indicator = if b == action { 1.0 } else { 0.0 };
            row[b] = (indicator - l.exp()) / temperature;
        }
        Ok(g)
    }

    /// Bucket index for a turn number and a set of retrieved entity ids.
    pub fn bucket_for(&self, turn_index: usize, entity_ids: &[u32]) -> usize {
        let mut ids: Vec<u32> = entity_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let h = fnv1a_u64s(BUCKET_SEED, ids.into_iter().map(u64::from));
        let turn = turn_index.min(self.turns - 1);
        turn * self.hash_buckets + (h % self.hash_buckets as u64) as usize
    }

    pub fn bucket(&self, state: &AgentState) -> usize {
        self.bucket_for(state.turn_index, &state.retrieved_entity_ids())
    }

    /// Mean |logit| over rows that have moved away from zero.
    pub fn mean_abs_logit_touched(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for row in self.logits.chunks(self.actions) {
            if row.iter().any(|&z| z != 0.0) {
                sum += row.iter().map(|z| z.abs()).sum::<f64>();
                n += row.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_sparse(&self) -> SparseParams {
        let rows = self
            .logits
            .chunks(self.actions)
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&z| z != 0.0))
            .map(|(i, r)| (i, r.to_vec()))
            .collect();
        SparseParams {
            turns: self.turns,
            hash_buckets: self.hash_buckets,
            actions: self.actions,
            rows,
        }
    }

    pub fn from_sparse(s: &SparseParams) -> Result<Self, PolicyError> {
        if s.turns == 0 || s.hash_buckets == 0 || s.actions == 0 {
            return Err(PolicyError::Shape("dimensions must be positive".into()));
        }
        let mut p = Self::new(s.turns, s.hash_buckets, s.actions);
        for (&bucket, row) in &s.rows {
            if row.len() != s.actions || row.iter().any(|z| !z.is_finite()) {
                return Err(PolicyError::Shape(format!("row {bucket} is malformed")));
            }
            p.row_mut(bucket)?.copy_from_slice(row);
        }
        Ok(p)
    }
}

/// Sparse gradient over the logit table, keyed by bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTable {
    actions: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradTable {
    pub fn new(actions: usize) -> Self {
        Self {
            actions,
            rows: BTreeMap::new(),
        }
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        let a = self.actions;
        self.rows.entry(bucket).or_insert_with(|| vec![0.0; a])
    }

    pub fn row(&self, bucket: usize) -> Option<&[f64]> {
        self.rows.get(&bucket).map(Vec::as_slice)
    }

    pub fn get(&self, bucket: usize, action: usize) -> f64 {
        self.rows.get(&bucket).map_or(0.0, |r| r[action])
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&b, r)| (b, r.as_slice()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (b, r) in other.rows() {
            for (x, y) in self.row_mut(b).iter_mut().zip(r) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for r in self.rows.values_mut() {
            for x in r {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.rows.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Dense copy laid out like [`ToyPolicyParams::logits`].
    pub fn to_dense(&self, rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.actions];
        for (b, r) in self.rows() {
            out[b * self.actions..(b + 1) * self.actions].copy_from_slice(r);
        }
        out
    }
}

/// Shape of the action space and how ids render to text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionMenu {
    pub query_templates: usize,
    pub answer_candidates: usize,
}

impl Default for ActionMenu {
    fn default() -> Self {
        Self {
            query_templates: 4,
            answer_candidates: 8,
        }
    }
}

fn mention_form(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn sanitize(text: &str) -> String {
    let s: String = text.chars().map(|c| if c == '<' || c == '>' { ' ' } else { c }).collect();
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if s.is_empty() {
        "unknown".into()
    } else {
        s
    }
}

impl ActionMenu {
    pub fn num_actions(&self) -> usize {
        self.query_templates + self.answer_candidates
    }

    pub fn is_query(&self, action: usize) -> bool {
        action < self.query_templates
    }

    /// Answer candidates for `state`, most recent knowledge first.
    pub fn candidates(&self, state: &AgentState) -> Vec<String> {
        let question = mention_form(&state.question);
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for turn in state.history.iter().rev() {
            let Some(block) = &turn.retrieved else { continue };
            for fact in &block.facts {
                for name in &fact.entities {
                    let m = mention_form(name);
                    if m.trim().is_empty() || question.contains(&m) {
                        continue;
                    }
                    if seen.insert(name.clone()) {
                        out.push(name.clone());
                    }
                }
            }
        }
        out
    }

    /// Canonical tagged text for `action` in `state`.
    pub fn render(&self, action: usize, state: &AgentState, fallback: &[String]) -> String {
        let cands = self.candidates(state);
        if self.is_query(action) {
            let query = if action == 0 {
                state.question.clone()
            } else {
                cands.get(action - 1).cloned().unwrap_or_else(|| state.question.clone())
            };
            grammar::serialize_query(THINK_QUERY, &sanitize(&query))
        } else {
            let slot = action - self.query_templates;
            let answer = if !cands.is_empty() {
                cands[slot % cands.len()].clone()
            } else if !fallback.is_empty() {
                fallback[slot % fallback.len()].clone()
            } else {
                "unknown".into()
            };
            grammar::serialize_answer(THINK_ANSWER, &sanitize(&answer))
        }
    }
}

/// Samples one action and renders it. Returns `(text, action, log_prob)`.
pub fn toy_emit<R: Rng + ?Sized>(
    params: &ToyPolicyParams,
    menu: &ActionMenu,
    state: &AgentState,
    rng: &mut R,
    temperature: f64,
    fallback: &[String],
) -> Result<(String, usize, f64), PolicyError> {
    let bucket = params.bucket(state);
    let lp = params.log_probs(bucket, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut action = lp.len() - 1;
    for (a, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            action = a;
            break;
        }
    }
    Ok((menu.render(action, state, fallback), action, lp[action]))
}

/// The toy policy as a [`Policy`]: samples, or takes the argmax when greedy.
pub struct ToyPolicy<'a, R> {
    pub params: &'a ToyPolicyParams,
    pub menu: &'a ActionMenu,
    pub fallback: &'a [String],
    pub temperature: f64,
    pub greedy: bool,
    pub rng: R,
}

impl<'a, R: Rng> ToyPolicy<'a, R> {
    pub fn new(params: &'a ToyPolicyParams, menu: &'a ActionMenu, fallback: &'a [String], rng: R) -> Self {
        Self {
            params,
            menu,
            fallback,
            temperature: 1.0,
            greedy: false,
            rng,
        }
    }
}

impl<R: Rng> Policy for ToyPolicy<'_, R> {
    fn emit(&mut self, state: &AgentState) -> Result<Emission, PolicyError> {
        if self.params.actions() != self.menu.num_actions() {
            return Err(PolicyError::Shape(format!(
                "table has {} actions, menu has {}",
                self.params.actions(),
                self.menu.num_actions()
            )));
        }
        let bucket = self.params.bucket(state);
        let (text, action, log_prob) = if self.greedy {
            let lp = self.params.log_probs(bucket, self.temperature)?;
            let mut best = 0;
            for (a, &l) in lp.iter().enumerate() {
                if l > lp[best] {
                    best = a;
                }
            }
            (self.menu.render(best, state, self.fallback), best, lp[best])
        } else {
            toy_emit(self.params, self.menu, state, &mut self.rng, self.temperature, self.fallback)?
        };
        Ok(Emission {
            text,
            choice: Some(ActionChoice {
                bucket,
                action,
                log_prob,
            }),
        })
    }
}
