//! Group-relative policy optimization.
//!
//! For a group of `G` rollouts sampled from the behavior policy, rewards are
//! standardized inside the group and the scalar advantage is broadcast to
//! every token of its rollout. The objective is
//!
//! ```text
//! J = 1/G Σ_i 1/|o_i| Σ_t [ min(h Â, clip(h, 1-ε, 1+ε) Â) - β · KL_t ]
//! h = exp(logp_cur - logp_old)
//! KL_t = exp(logp_ref - logp_cur) - (logp_ref - logp_cur) - 1
//! ```
//!
//! Since `J` depends on the parameters only through the per-token
//! `logp_cur`, its gradient is `Σ_{i,t} (∂J/∂logp_cur_{i,t}) ∇ log π(o_{i,t})`.
//! [`DifferentiablePolicy`] supplies the last factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{mean, population_variance, Scalar};

/// Optimizer and objective hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GrpoConfig<T> {
    pub group_size: usize,
    pub clip_eps: T,
    pub kl_coef: T,
    /// Groups whose reward std falls below this get zero advantages.
    pub adv_eps: T,
    pub learning_rate: T,
    /// Optimization passes over each sampled batch. With one pass the
    /// importance ratio is exactly 1.
    pub epochs: usize,
}

impl<T: Scalar> Default for GrpoConfig<T> {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            clip_eps: T::lit(0.2),
            kl_coef: T::lit(0.05),
            adv_eps: T::lit(1e-8),
            learning_rate: T::lit(1e-6),
            epochs: 1,
        }
    }
}

impl<T: Scalar> GrpoConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig(format!("group size must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip_eps > T::zero() && self.clip_eps < T::one()) {
            return Err(Error::InvalidConfig(format!("clip epsilon must lie in (0,1), got {}", self.clip_eps)));
        }
        if !(self.kl_coef >= T::zero()) || !self.kl_coef.is_finite() {
            return Err(Error::InvalidConfig(format!("KL coefficient must be >= 0, got {}", self.kl_coef)));
        }
        if !(self.adv_eps > T::zero()) {
            return Err(Error::InvalidConfig("advantage epsilon must be positive".into()));
        }
        if !(self.learning_rate >= T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-rollout standardized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector<T>(pub Vec<T>);

impl<T: Scalar> AdvantageVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.0.iter().all(|a| *a == T::zero())
    }
}

/// Standardizes rewards with the population standard deviation. A group
/// whose std is below `adv_eps` yields all-zero advantages.
pub fn group_normalize<T: Scalar>(rewards: &[T], adv_eps: T) -> Result<AdvantageVector<T>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidBatch(format!("group needs >= 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidBatch("non-finite reward".into()));
    }
    let m = mean(rewards);
    let sd = population_variance(rewards).sqrt();
    if sd < adv_eps {
        return Ok(AdvantageVector(vec![T::zero(); rewards.len()]));
    }
    Ok(AdvantageVector(rewards.iter().map(|&r| (r - m) / sd).collect()))
}

/// `min(h·adv, clip(h, 1-ε, 1+ε)·adv)`.
#[inline]
pub fn clipped_term<T: Scalar>(h: T, adv: T, eps: T) -> T {
    let clipped = h.max(T::one() - eps).min(T::one() + eps);
    (h * adv).min(clipped * adv)
}

/// Derivative of [`clipped_term`] with respect to `log h`.
#[inline]
fn clipped_term_dlogh<T: Scalar>(h: T, adv: T, eps: T) -> T {
    let clipped = h.max(T::one() - eps).min(T::one() + eps);
    // inside the clip range both branches coincide and the first one wins
    if h * adv <= clipped * adv {
        h * adv
    } else {
        T::zero()
    }
}

/// Nonnegative per-token KL estimator `exp(d) - d - 1`, `d = logp_ref - logp_cur`.
#[inline]
pub fn kl_term<T: Scalar>(logp_cur: T, logp_ref: T) -> T {
    let d = logp_ref - logp_cur;
    d.exp() - d - T::one()
}

/// Per-token log-probabilities of one rollout and its scalar reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RolloutLogProbs<T> {
    pub logp_cur: Vec<T>,
    pub logp_old: Vec<T>,
    pub logp_ref: Vec<T>,
    pub reward: T,
}

impl<T: Scalar> RolloutLogProbs<T> {
    /// On-policy rollout: current and behavior log-probs coincide.
    pub fn on_policy(logp: Vec<T>, logp_ref: Vec<T>, reward: T) -> Self {
        RolloutLogProbs {
            logp_cur: logp.clone(),
            logp_old: logp,
            logp_ref,
            reward,
        }
    }

    pub fn len(&self) -> usize {
        self.logp_cur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_cur.is_empty()
    }
}

/// All rollouts sampled for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GroupBatch<T> {
    pub query_id: String,
    pub rollouts: Vec<RolloutLogProbs<T>>,
}

impl<T: Scalar> GroupBatch<T> {
    pub fn new(query_id: impl Into<String>, rollouts: Vec<RolloutLogProbs<T>>) -> Self {
        GroupBatch {
            query_id: query_id.into(),
            rollouts,
        }
    }

    pub fn rewards(&self) -> Vec<T> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(Error::InvalidBatch(format!(
                "query {}: group needs >= 2 rollouts, got {}",
                self.query_id,
                self.rollouts.len()
            )));
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::InvalidBatch(format!("query {}: rollout {i} is empty", self.query_id)));
            }
            if r.logp_old.len() != r.len() || r.logp_ref.len() != r.len() {
                return Err(Error::InvalidBatch(format!(
                    "query {}: rollout {i} log-prob sequences have lengths {}/{}/{}",
                    self.query_id,
                    r.len(),
                    r.logp_old.len(),
                    r.logp_ref.len()
                )));
            }
            let finite = r.reward.is_finite()
                && r.logp_cur.iter().chain(&r.logp_old).chain(&r.logp_ref).all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidBatch(format!("query {}: rollout {i} has non-finite values", self.query_id)));
            }
        }
        Ok(())
    }
}

/// Objective value together with `∂J/∂logp_cur` for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms<T> {
    pub objective: T,
    pub token_coefficients: Vec<Vec<T>>,
    pub advantages: AdvantageVector<T>,
}

/// Evaluates the objective and its sensitivity to each current log-prob.
pub fn objective_terms<T: Scalar>(batch: &GroupBatch<T>, cfg: &GrpoConfig<T>) -> Result<ObjectiveTerms<T>> {
    batch.validate()?;
    let adv = group_normalize(&batch.rewards(), cfg.adv_eps)?;
    let g = T::from_usize_lossy(batch.rollouts.len());
    let mut objective = T::zero();
    let mut coefs = Vec::with_capacity(batch.rollouts.len());
    for (r, &a) in batch.rollouts.iter().zip(adv.as_slice()) {
        let scale = T::one() / (g * T::from_usize_lossy(r.len()));
        let mut per_token = Vec::with_capacity(r.len());
        let mut sum = T::zero();
        for t in 0..r.len() {
            let (lc, lo, lr) = (r.logp_cur[t], r.logp_old[t], r.logp_ref[t]);
            let h = (lc - lo).exp();
            sum += clipped_term(h, a, cfg.clip_eps) - cfg.kl_coef * kl_term(lc, lr);
            // d/dlc [exp(lr-lc) - (lr-lc) - 1] = 1 - exp(lr-lc)
            let dkl = T::one() - (lr - lc).exp();
            per_token.push(scale * (clipped_term_dlogh(h, a, cfg.clip_eps) - cfg.kl_coef * dkl));
        }
        objective += scale * sum;
        coefs.push(per_token);
    }
    Ok(ObjectiveTerms {
        objective,
        token_coefficients: coefs,
        advantages: adv,
    })
}

/// The clipped, KL-penalized, length-normalized group objective.
pub fn grpo_objective<T: Scalar>(batch: &GroupBatch<T>, cfg: &GrpoConfig<T>) -> Result<T> {
    objective_terms(batch, cfg).map(|t| t.objective)
}

/// A parametric policy that can score token sequences it produced and
/// differentiate their log-probabilities.
pub trait DifferentiablePolicy<T: Scalar> {
    /// Everything needed to re-score one rollout (conditioning + tokens).
    type Trajectory;

    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];

    /// Log-probability of each token of the trajectory under the current
    /// parameters.
    fn token_log_probs(&self, traj: &Self::Trajectory) -> Result<Vec<T>>;

    /// Adds `Σ_t coefs[t] · ∇ log π(o_t)` into `grad`.
    fn accumulate_log_prob_grad(&self, traj: &Self::Trajectory, coefs: &[T], grad: &mut [T]) -> Result<()>;
}

/// Objective value and its parameter gradient at the policy's current
/// parameters. Refreshes `batch`'s current log-probs first.
pub fn objective_gradient<T: Scalar, P: DifferentiablePolicy<T>>(
    policy: &P,
    trajectories: &[P::Trajectory],
    batch: &mut GroupBatch<T>,
    cfg: &GrpoConfig<T>,
) -> Result<(T, Vec<T>)> {
    if trajectories.len() != batch.rollouts.len() {
        return Err(Error::InvalidBatch(format!(
            "{} trajectories for {} rollouts",
            trajectories.len(),
            batch.rollouts.len()
        )));
    }
    for (traj, r) in trajectories.iter().zip(batch.rollouts.iter_mut()) {
        r.logp_cur = policy.token_log_probs(traj)?;
    }
    let terms = objective_terms(batch, cfg)?;
    let mut grad = vec![T::zero(); policy.params().len()];
    if !terms.advantages.is_degenerate() || cfg.kl_coef > T::zero() {
        for (traj, c) in trajectories.iter().zip(&terms.token_coefficients) {
            policy.accumulate_log_prob_grad(traj, c, &mut grad)?;
        }
    }
    Ok((terms.objective, grad))
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct StepReport<T> {
    /// Objective at the sampling parameters (first pass).
    pub objective: T,
    /// L2 norm of the gradient at the sampling parameters.
    pub grad_norm: T,
    pub advantages: Vec<T>,
}

/// Runs `cfg.epochs` gradient-ascent passes on one group.
pub fn grpo_step<T: Scalar, P: DifferentiablePolicy<T>>(
    policy: &mut P,
    trajectories: &[P::Trajectory],
    batch: &mut GroupBatch<T>,
    cfg: &GrpoConfig<T>,
) -> Result<StepReport<T>> {
    cfg.validate()?;
    let advantages = group_normalize(&batch.rewards(), cfg.adv_eps)?.0;
    let mut report = None;
    for _ in 0..cfg.epochs {
        let (objective, grad) = objective_gradient(policy, trajectories, batch, cfg)?;
        let grad_norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
        if report.is_none() {
            report = Some(StepReport {
                objective,
                grad_norm,
                advantages: advantages.clone(),
            });
        }
        if grad_norm > T::zero() {
            for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
                *p += cfg.learning_rate * *g;
            }
        }
    }
    Ok(report.expect("at least one epoch"))
}
