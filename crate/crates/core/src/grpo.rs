//! Group Relative Policy Optimization over categorical policies.
//!
//! For one query the policy draws `G` responses, each is scored, and rewards
//! are standardized inside the group:
//!
//! ```text
//! A_i = (r_i - mean(r)) / max(std(r), eps)        (population std)
//! ```
//!
//! The update is one gradient-ascent step on
//!
//! ```text
//! J(theta) = sum_i A_i * ln pi_theta(o_i) - beta * KL(pi_theta || pi_ref)
//! ```
//!
//! with the gradient taken analytically with respect to the logits:
//! `d ln pi(o) = e_o - pi` and `d KL_j = pi_j * (ln pi_j - ln q_j - KL)`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite gradient component at action {action}")]
    NonFiniteGradient { action: usize },
    #[error("reference assigns zero probability to action {action} where the policy does not")]
    SupportMismatch { action: usize },
    #[error("action space mismatch: policy has {policy} actions, other side has {other}")]
    ActionSpaceMismatch { policy: usize, other: usize },
    #[error("action {action} out of range for {size} actions")]
    ActionOutOfRange { action: usize, size: usize },
    #[error("policy logits must be finite and non-empty")]
    InvalidLogits,
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
}

/// Softmax policy over a finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    logits: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(logits: Vec<f64>) -> Result<Self, GrpoError> {
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(GrpoError::InvalidLogits);
        }
        Ok(Self { logits })
    }

    pub fn uniform(actions: usize) -> Self {
        assert!(actions > 0, "empty action space");
        Self {
            logits: vec![0.0; actions],
        }
    }

    pub fn num_actions(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Draws `g` actions i.i.d. from the policy.
    pub fn sample<R: Rng + ?Sized>(&self, g: usize, rng: &mut R) -> Vec<usize> {
        let dist = WeightedIndex::new(self.probs()).expect("softmax weights are valid");
        (0..g).map(|_| dist.sample(rng)).collect()
    }
}

/// Frozen snapshot of the policy at the start of optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy(CategoricalPolicy);

impl ReferencePolicy {
    pub fn freeze(policy: &CategoricalPolicy) -> Self {
        Self(policy.clone())
    }

    pub fn policy(&self) -> &CategoricalPolicy {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub steps: usize,
    pub seed: u64,
    pub std_floor: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 0.1,
            beta: 0.04,
            steps: 500,
            seed: 0,
            std_floor: 1e-8,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if !(self.std_floor.is_finite() && self.std_floor >= 0.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "std floor must be non-negative, got {}",
                self.std_floor
            )));
        }
        Ok(())
    }
}

/// Actions drawn for one query before scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledGroup {
    pub actions: Vec<usize>,
}

/// A scored group: the unit of advantage normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query_id: String,
    pub actions: Vec<usize>,
    pub responses: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    /// Attaches rewards to sampled actions and computes advantages.
    pub fn new(
        query_id: impl Into<String>,
        actions: Vec<usize>,
        responses: Vec<String>,
        rewards: Vec<f64>,
        std_floor: f64,
    ) -> Result<Self, GrpoError> {
        assert_eq!(actions.len(), responses.len(), "one response per action");
        assert_eq!(actions.len(), rewards.len(), "one reward per action");
        let advantages = group_advantages(&rewards, std_floor)?;
        Ok(Self {
            query_id: query_id.into(),
            actions,
            responses,
            rewards,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.actions.len()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standardizes rewards within a group using the population standard
/// deviation floored at `eps`. Groups of identical rewards get zero advantage.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let m = mean(rewards);
    let var = rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rewards.len() as f64;
    let denom = var.sqrt().max(eps);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - m) / denom).collect())
}

fn check_same_space(p: &CategoricalPolicy, q: &CategoricalPolicy) -> Result<(), GrpoError> {
    if p.num_actions() != q.num_actions() {
        return Err(GrpoError::ActionSpaceMismatch {
            policy: p.num_actions(),
            other: q.num_actions(),
        });
    }
    Ok(())
}

/// Exact `KL(p || q)` over the action set.
pub fn kl_divergence(p: &CategoricalPolicy, q: &ReferencePolicy) -> Result<f64, GrpoError> {
    check_same_space(p, q.policy())?;
    let lp = p.log_probs();
    let lq = q.policy().log_probs();
    let mut kl = 0.0;
    for (a, (&lpa, &lqa)) in lp.iter().zip(&lq).enumerate() {
        let pa = lpa.exp();
        if pa == 0.0 {
            continue;
        }
        if !lqa.is_finite() {
            return Err(GrpoError::SupportMismatch { action: a });
        }
        kl += pa * (lpa - lqa);
    }
    Ok(kl.max(0.0))
}

/// Objective value `sum_i A_i ln pi(o_i) - beta KL(pi || ref)`.
pub fn surrogate_objective(
    policy: &CategoricalPolicy,
    reference: &ReferencePolicy,
    actions: &[usize],
    advantages: &[f64],
    beta: f64,
) -> Result<f64, GrpoError> {
    let lp = policy.log_probs();
    let mut j = 0.0;
    for (&a, &adv) in actions.iter().zip(advantages) {
        let lpa = lp.get(a).ok_or(GrpoError::ActionOutOfRange {
            action: a,
            size: lp.len(),
        })?;
        j += adv * lpa;
    }
    Ok(j - beta * kl_divergence(policy, reference)?)
}

/// Analytic gradient of [`surrogate_objective`] with respect to the logits.
pub fn surrogate_gradient(
    policy: &CategoricalPolicy,
    reference: &ReferencePolicy,
    actions: &[usize],
    advantages: &[f64],
    beta: f64,
) -> Result<Vec<f64>, GrpoError> {
    check_same_space(policy, reference.policy())?;
    let n = policy.num_actions();
    let lp = policy.log_probs();
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut grad = vec![0.0; n];

    let adv_sum: f64 = advantages.iter().sum();
    for (&a, &adv) in actions.iter().zip(advantages) {
        if a >= n {
            return Err(GrpoError::ActionOutOfRange { action: a, size: n });
        }
        grad[a] += adv;
    }
    for (g, p) in grad.iter_mut().zip(&probs) {
        *g -= adv_sum * p;
    }

    if beta != 0.0 {
        let lq = reference.policy().log_probs();
        let kl = kl_divergence(policy, reference)?;
        for j in 0..n {
            grad[j] -= beta * probs[j] * (lp[j] - lq[j] - kl);
        }
    }

    if let Some(action) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient { action });
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    /// KL of the pre-step policy against the reference.
    pub kl: f64,
    pub grad_norm: f64,
}

/// One ascent step on the surrogate for a scored group.
pub fn grpo_step(
    policy: &CategoricalPolicy,
    reference: &ReferencePolicy,
    group: &Group,
    cfg: &TrainerConfig,
) -> Result<(CategoricalPolicy, StepStats), GrpoError> {
    let grad = surrogate_gradient(policy, reference, &group.actions, &group.advantages, cfg.beta)?;
    let kl = kl_divergence(policy, reference)?;
    let logits = policy
        .logits
        .iter()
        .zip(&grad)
        .map(|(l, g)| l + cfg.learning_rate * g)
        .collect::<Vec<_>>();
    if let Some(action) = logits.iter().position(|l| !l.is_finite()) {
        return Err(GrpoError::NonFiniteGradient { action });
    }
    let stats = StepStats {
        mean_reward: group.mean_reward(),
        kl,
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    Ok((CategoricalPolicy { logits }, stats))
}

/// Draws `g` actions with a generator seeded from `seed`.
pub fn sample_group(policy: &CategoricalPolicy, g: usize, seed: u64) -> SampledGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SampledGroup {
        actions: policy.sample(g, &mut rng),
    }
}
