//! Group-relative advantages, probability ratios, KL penalty and the clipped
//! surrogate objective over rollout groups.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    pub logp_theta: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, index: usize) -> Result<(), GrpoError> {
        let n = self.tokens.len();
        for (name, arr) in
            [("logp_theta", &self.logp_theta), ("logp_old", &self.logp_old), ("logp_ref", &self.logp_ref)]
        {
            if arr.len() != n {
                return Err(GrpoError::LengthMismatch { rollout: index, field: name, expected: n, found: arr.len() });
            }
            if let Some(t) = arr.iter().position(|lp| !(lp.is_finite() && *lp <= 0.0)) {
                return Err(GrpoError::InvalidLogprob { rollout: index, field: name, token: t, value: arr[t] });
            }
        }
        if n == 0 {
            return Err(GrpoError::EmptyRollout { rollout: index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioLevel {
    #[default]
    Token,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub ratio_level: RatioLevel,
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, beta: 0.001, ratio_level: RatioLevel::Token, std_floor: 1e-8 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let ok = self.epsilon > 0.0 && self.epsilon < 1.0 && self.beta >= 0.0 && self.std_floor > 0.0;
        if ok && self.beta.is_finite() && self.std_floor.is_finite() {
            Ok(())
        } else {
            Err(GrpoError::InvalidConfig)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group has {0} rollouts; at least 2 are needed")]
    GroupTooSmall(usize),
    #[error("rollout {rollout}: {field} has {found} entries, expected {expected}")]
    LengthMismatch { rollout: usize, field: &'static str, expected: usize, found: usize },
    #[error("rollout {rollout}: {field}[{token}] = {value} is not a finite value <= 0")]
    InvalidLogprob { rollout: usize, field: &'static str, token: usize, value: f64 },
    #[error("rollout {rollout} has no tokens")]
    EmptyRollout { rollout: usize },
    #[error("epsilon must lie in (0, 1), beta >= 0, std_floor > 0")]
    InvalidConfig,
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
}

/// `(R_i - mean) / max(std, std_floor)` with population std. A group of
/// identical rewards gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(cfg.std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn aligned(a: &[f64], b: &[f64], field: &'static str) -> Result<(), GrpoError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(GrpoError::LengthMismatch { rollout: 0, field, expected: a.len(), found: b.len() })
    }
}

/// Token mode: one ratio per token. Sequence mode: a single ratio from the
/// summed log difference.
pub fn prob_ratios(rollout: &Rollout, level: RatioLevel) -> Result<Vec<f64>, GrpoError> {
    aligned(&rollout.logp_theta, &rollout.logp_old, "logp_old")?;
    let diffs = rollout.logp_theta.iter().zip(&rollout.logp_old).map(|(t, o)| t - o);
    Ok(match level {
        RatioLevel::Token => diffs.map(f64::exp).collect(),
        RatioLevel::Sequence => vec![diffs.sum::<f64>().exp()],
    })
}

/// Per-token `exp(d) - d - 1` with `d = logp_ref - logp_theta`.
pub fn kl_penalty(rollout: &Rollout) -> Result<Vec<f64>, GrpoError> {
    aligned(&rollout.logp_theta, &rollout.logp_ref, "logp_ref")?;
    Ok(rollout
        .logp_ref
        .iter()
        .zip(&rollout.logp_theta)
        .map(|(r, t)| {
            let d = r - t;
            (d.exp_m1() - d).max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub objective: f64,
    pub per_rollout: Vec<f64>,
    pub advantages: Vec<f64>,
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

/// Clipped surrogate minus the KL term, token-averaged per rollout and then
/// averaged over the group.
pub fn grpo_objective(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<ObjectiveReport, GrpoError> {
    cfg.validate()?;
    let advantages = group_advantages(&group.rewards(), cfg)?;
    for (i, r) in group.rollouts.iter().enumerate() {
        r.check(i)?;
    }
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let mut per_rollout = Vec::with_capacity(group.rollouts.len());
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut kl_total = 0.0;
    for (r, &adv) in group.rollouts.iter().zip(&advantages) {
        let ratios = prob_ratios(r, cfg.ratio_level)?;
        let kl = kl_penalty(r)?;
        let mut sum = 0.0;
        for (t, k) in kl.iter().enumerate() {
            let rho = match cfg.ratio_level {
                RatioLevel::Token => ratios[t],
                RatioLevel::Sequence => ratios[0],
            };
            let unclipped = rho * adv;
            let clipped_term = rho.clamp(lo, hi) * adv;
            if clipped_term < unclipped {
                clipped += 1;
            }
            sum += unclipped.min(clipped_term) - cfg.beta * k;
            kl_total += k;
        }
        tokens += kl.len();
        per_rollout.push(sum / kl.len() as f64);
    }
    Ok(ObjectiveReport {
        objective: per_rollout.iter().sum::<f64>() / per_rollout.len() as f64,
        per_rollout,
        advantages,
        clip_fraction: clipped as f64 / tokens as f64,
        mean_kl: kl_total / tokens as f64,
    })
}

/// Objective for many groups, evaluated in parallel, in input order.
pub fn grpo_objective_batch(groups: &[RolloutGroup], cfg: &GrpoConfig) -> Vec<Result<ObjectiveReport, GrpoError>> {
    par::map(groups, |g| grpo_objective(g, cfg))
}

/// Reads one rollout group per non-blank line.
pub fn read_groups(reader: impl BufRead) -> Result<Vec<RolloutGroup>, GrpoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GrpoError::Json { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GrpoError::Json { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
