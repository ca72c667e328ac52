//! Group-relative policy optimization for the toy policy.
//!
//! For each question a group of `N` trajectories is sampled under the current
//! parameters. Rewards are normalized within the group into advantages `Â`,
//! and the objective
//!
//! ```text
//! J = mean_g [ (1/N) Σ_i (1/|τ_i|) Σ_t min(ρ Â_i, clip(ρ, 1−ε, 1+ε) Â_i) − β · KL_g ]
//! ```
//!
//! is ascended, where `ρ = π_θ(a_t | s_t) / π_old(a_t | s_t)` and `KL_g` is the
//! exact categorical KL to the frozen reference policy, averaged over the
//! distinct state buckets the group visited.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvError, Environment, Trajectory};
use crate::evalkit::{QAInstance, Run};
use crate::policy::{ActionMenu, GradTable, PolicyError, ToyPolicy, ToyPolicyParams};
use crate::reward::{total_reward, RewardError};

/// Halt training once the mean |logit| of touched rows exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 50.0;
const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Divide by the population standard deviation; a zero-spread group gets
    /// zero advantages.
    Std,
    /// Divide by population standard deviation plus 1e-8.
    StdEps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub norm: NormKind,
    pub temperature: f64,
    pub optimizer: OptimizerKind,
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 1e-3,
            learning_rate: 0.05,
            iterations: 500,
            seed: 0,
            norm: NormKind::StdEps,
            temperature: 1.0,
            optimizer: OptimizerKind::Adam,
            inner_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("invalid GRPO configuration: {0}")]
    Config(String),
    #[error("trajectory {trajectory} of group {group} has a step without a stored log-probability")]
    MissingLogProbs { group: String, trajectory: usize },
    #[error("training diverged at iteration {iteration}: mean |logit| = {mean_abs_logit:.3} exceeds {DIVERGENCE_LIMIT}")]
    Diverged { iteration: usize, mean_abs_logit: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Group-normalized advantages.
pub fn advantages(rewards: &[f64], norm: NormKind) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Config(format!("a group needs at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = match norm {
        NormKind::StdEps => std + STD_GUARD,
        NormKind::Std if std == 0.0 => return Ok(vec![0.0; rewards.len()]),
        NormKind::Std => std,
    };
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// `∂ surrogate / ∂ ratio`, taking the unclipped branch whenever it is the min.
fn surrogate_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        advantage
    } else {
        0.0
    }
}

/// `KL(p ‖ q)` from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

/// Mean KL over `buckets` and its gradient with respect to `params`.
pub fn kl_penalty(
    params: &ToyPolicyParams,
    reference: &ToyPolicyParams,
    buckets: &BTreeSet<usize>,
    temperature: f64,
) -> Result<(f64, GradTable), PolicyError> {
    let mut grad = GradTable::new(params.actions());
    if buckets.is_empty() {
        return Ok((0.0, grad));
    }
    let w = 1.0 / buckets.len() as f64;
    let mut total = 0.0;
    for &b in buckets {
        let lp = params.log_probs(b, temperature)?;
        let lq = reference.log_probs(b, temperature)?;
        let kl = categorical_kl(&lp, &lq);
        total += w * kl;
        let row = grad.row_mut(b);
        for k in 0..lp.len() {
            row[k] += w * lp[k].exp() / temperature * (lp[k] - lq[k] - kl);
        }
    }
    Ok((total, grad))
}

/// One sampled action with the log-probability it had when sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub bucket: usize,
    pub action: usize,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub question_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_log_probs: Vec<Vec<Step>>,
}

impl GroupBatch {
    /// Builds a batch from sampled trajectories; every turn must carry the
    /// action choice its policy made.
    pub fn new(question_id: impl Into<String>, trajectories: Vec<Trajectory>, rewards: Vec<f64>, norm: NormKind) -> Result<Self, GrpoError> {
        let question_id = question_id.into();
        let mut steps = Vec::with_capacity(trajectories.len());
        for (i, t) in trajectories.iter().enumerate() {
            let s: Option<Vec<Step>> = t
                .turns
                .iter()
                .map(|turn| {
                    turn.choice.map(|c| Step {
                        bucket: c.bucket,
                        action: c.action,
                        old_log_prob: c.log_prob,
                    })
                })
                .collect();
            steps.push(s.ok_or_else(|| GrpoError::MissingLogProbs {
                group: question_id.clone(),
                trajectory: i,
            })?);
        }
        Self::from_steps(question_id, trajectories, rewards, steps, norm)
    }

    pub fn from_steps(
        question_id: String,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        old_log_probs: Vec<Vec<Step>>,
        norm: NormKind,
    ) -> Result<Self, GrpoError> {
        if old_log_probs.len() != rewards.len() {
            return Err(GrpoError::MissingLogProbs {
                group: question_id,
                trajectory: old_log_probs.len().min(rewards.len()),
            });
        }
        let advantages = advantages(&rewards, norm)?;
        Ok(Self {
            question_id,
            trajectories,
            rewards,
            advantages,
            old_log_probs,
        })
    }

    pub fn visited_buckets(&self) -> BTreeSet<usize> {
        self.old_log_probs.iter().flatten().map(|s| s.bucket).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    /// Mean over groups of the reference KL.
    pub kl: f64,
    pub grad: GradTable,
}

/// `J` and `∇J` at `params`.
pub fn objective_and_grad(
    params: &ToyPolicyParams,
    reference: &ToyPolicyParams,
    groups: &[GroupBatch],
    cfg: &GrpoConfig,
) -> Result<Objective, GrpoError> {
    let t = cfg.temperature;
    let mut grad = GradTable::new(params.actions());
    if groups.is_empty() {
        return Ok(Objective { value: 0.0, kl: 0.0, grad });
    }
    let gw = 1.0 / groups.len() as f64;
    let mut value = 0.0;
    let mut kl_mean = 0.0;
    for g in groups {
        let n = g.old_log_probs.len() as f64;
        for (steps, &adv) in g.old_log_probs.iter().zip(&g.advantages) {
            if steps.is_empty() {
                continue;
            }
            let w = gw / (n * steps.len() as f64);
            for s in steps {
                let lp = params.log_probs(s.bucket, t)?;
                if s.action >= lp.len() {
                    return Err(PolicyError::ActionOutOfRange {
                        action: s.action,
                        actions: lp.len(),
                    }
                    .into());
                }
                let ratio = (lp[s.action] - s.old_log_prob).exp();
                value += w * surrogate(ratio, adv, cfg.clip_eps);
                let slope = surrogate_slope(ratio, adv, cfg.clip_eps);
                if slope != 0.0 {
                    let scale = w * slope * ratio / t;
                    let row = grad.row_mut(s.bucket);
                    for (k, l) in lp.iter().enumerate() {
                        let ind = if k == s.action { 1.0 } else { 0.0 };
                        row[k] += scale * (ind - l.exp());
                    }
                }
            }
        }
        let (kl, kl_grad) = kl_penalty(params, reference, &g.visited_buckets(), t)?;
        kl_mean += gw * kl;
        if cfg.kl_beta != 0.0 {
            value -= gw * cfg.kl_beta * kl;
            grad.add_scaled(&kl_grad, -gw * cfg.kl_beta);
        }
    }
    Ok(Objective {
        value,
        kl: kl_mean,
        grad,
    })
}

/// Gradient-ascent optimizer over the dense logit table.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, size: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: vec![0.0; size],
                v: vec![0.0; size],
                t: 0,
            },
        }
    }

    pub fn ascend(&mut self, params: &mut ToyPolicyParams, grad: &GradTable) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let a = params.actions();
        match self {
            Optimizer::Sgd { lr } => {
                for (b, row) in grad.rows() {
                    for (k, g) in row.iter().enumerate() {
                        params.logits_mut()[b * a + k] += *lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                for (b, row) in grad.rows() {
                    for (k, g) in row.iter().enumerate() {
                        let i = b * a + k;
                        m[i] += (1.0 - B1) * (g - m[i]);
                        v[i] += (1.0 - B2) * (g * g - v[i]);
                    }
                }
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let z = params.logits_mut();
                for i in 0..z.len() {
                    if m[i] != 0.0 {
                        z[i] += *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Per-iteration statistics; record `iter` describes the policy after `iter`
/// updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub kl: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub params: ToyPolicyParams,
    pub aborted_rollouts: usize,
    pub discarded_groups: usize,
}

impl TrainReport {
    pub fn baseline(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.mean_reward)
    }

    /// Mean reward over the last `n` records.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }
}

/// Shape of the toy policy: table turns follow the environment's turn budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySettings {
    pub query_templates: usize,
    pub answer_candidates: usize,
    pub hash_buckets: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            query_templates: 4,
            answer_candidates: 8,
            hash_buckets: 4096,
        }
    }
}

impl ToySettings {
    pub fn menu(&self) -> ActionMenu {
        ActionMenu {
            query_templates: self.query_templates,
            answer_candidates: self.answer_candidates,
        }
    }

    pub fn init_params(&self, max_turns: usize) -> ToyPolicyParams {
        ToyPolicyParams::new(max_turns.max(1), self.hash_buckets.max(1), self.menu().num_actions().max(1))
    }
}

struct Sampled {
    groups: Vec<GroupBatch>,
    mean_reward: f64,
    mean_turns: f64,
    aborted: usize,
    discarded: usize,
}

fn sample_groups(
    env: &Environment<'_>,
    params: &ToyPolicyParams,
    menu: &ActionMenu,
    fallback: &[String],
    tasks: &[QAInstance],
    cfg: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sampled, GrpoError> {
    let mut groups = Vec::with_capacity(tasks.len());
    let (mut reward_sum, mut turn_sum, mut count) = (0.0, 0.0, 0usize);
    let (mut aborted, mut discarded) = (0, 0);
    for task in tasks {
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for _ in 0..cfg.group_size {
            let mut policy = ToyPolicy::new(params, menu, fallback, &mut *rng);
            policy.temperature = cfg.temperature;
            let traj = match env.rollout(&mut policy, &task.question) {
                Ok(t) => t,
                Err(EnvError::Policy(PolicyError::Chat(e))) => {
                    log::warn!("rollout for {} aborted: {e}", task.id);
                    aborted += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let r = total_reward(&traj, &task.golden_answers)?.total;
            reward_sum += r;
            turn_sum += traj.turns.len() as f64;
            count += 1;
            rewards.push(r);
            trajectories.push(traj);
        }
        if trajectories.len() < 2 {
            discarded += 1;
            continue;
        }
        groups.push(GroupBatch::new(task.id.clone(), trajectories, rewards, cfg.norm)?);
    }
    let denom = count.max(1) as f64;
    Ok(Sampled {
        groups,
        mean_reward: reward_sum / denom,
        mean_turns: turn_sum / denom,
        aborted,
        discarded,
    })
}

/// Trains a toy policy from uniform logits. Deterministic for a fixed config.
pub fn train_toy(env: &Environment<'_>, tasks: &[QAInstance], toy: &ToySettings, cfg: &GrpoConfig) -> Result<TrainReport, GrpoError> {
    cfg.validate()?;
    let menu = toy.menu();
    let mut params = toy.init_params(env.params().max_turns);
    let reference = params.clone();
    let fallback: Vec<String> = env.graph().entities().iter().map(|e| e.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.logits().len());
    let mut records = Vec::with_capacity(cfg.iterations + 1);
    let (mut aborted, mut discarded) = (0, 0);

    for it in 0..=cfg.iterations {
        let sampled = sample_groups(env, &params, &menu, &fallback, tasks, cfg, &mut rng)?;
        aborted += sampled.aborted;
        discarded += sampled.discarded;
        let first = objective_and_grad(&params, &reference, &sampled.groups, cfg)?;
        records.push(IterationRecord {
            iter: it,
            mean_reward: sampled.mean_reward,
            objective: first.value,
            kl: first.kl,
            mean_turns: sampled.mean_turns,
        });
        log::debug!("iter {it}: mean reward {:.4}, J {:.5}", sampled.mean_reward, first.value);
        if it == cfg.iterations {
            break;
        }
        opt.ascend(&mut params, &first.grad);
        for _ in 1..cfg.inner_epochs {
            let o = objective_and_grad(&params, &reference, &sampled.groups, cfg)?;
            opt.ascend(&mut params, &o.grad);
        }
        let m = params.mean_abs_logit_touched();
        if m > DIVERGENCE_LIMIT {
            return Err(GrpoError::Diverged {
                iteration: it,
                mean_abs_logit: m,
            });
        }
    }
    Ok(TrainReport {
        records,
        params,
        aborted_rollouts: aborted,
        discarded_groups: discarded,
    })
}

/// Runs the toy policy once per task, greedily or by sampling from `seed`.
pub fn toy_runs(
    env: &Environment<'_>,
    params: &ToyPolicyParams,
    menu: &ActionMenu,
    tasks: &[QAInstance],
    temperature: f64,
    greedy: bool,
    seed: u64,
) -> Result<Vec<Run>, GrpoError> {
    let fallback: Vec<String> = env.graph().entities().iter().map(|e| e.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut policy = ToyPolicy::new(params, menu, &fallback, &mut rng);
        policy.temperature = temperature;
        policy.greedy = greedy;
        runs.push(Run {
            id: task.id.clone(),
            trajectory: Some(env.rollout(&mut policy, &task.question)?),
        });
    }
    Ok(runs)
}
