//! GRPO training and held-out evaluation on the toy task.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{Decoding, SamplerConfig, ToyPolicy, ToyTrajectory};
use super::{generate_task, ANSWER_WORDS};
use crate::error::{Error, Result};
use crate::grpo::{grpo_step, DifferentiablePolicy, GroupBatch, GrpoConfig, RolloutLogProbs};
use crate::reward_engine::{accuracy_reward, score_raw, OutputMode, RewardWeights, NUM_COMPONENTS};
use crate::scalar::{mean, population_variance, Scalar};

const EVAL_BIT: u64 = 1 << 63;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Task seed for a training step. Training seeds have the top bit clear, so
/// they never collide with held-out seeds.
pub fn train_task_seed(seed: u64, step: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ step as u64) & !EVAL_BIT
}

/// Seed of the `index`-th held-out task. The held-out set does not depend on
/// the training seed.
pub fn eval_task_seed(index: usize) -> u64 {
    splitmix64(index as u64 ^ 0x5EED_E7A1) | EVAL_BIT
}

/// Independent sampling stream for one rollout of one step.
fn rollout_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xA5A5_0000_0000_0000));
    rng.set_stream(((step as u64) << 16) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TrainConfig<T> {
    pub grpo: GrpoConfig<T>,
    pub weights: RewardWeights<T>,
    pub mode: OutputMode,
    pub steps: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Evaluate every this many updates (0 disables intermediate evaluation).
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub eval_decoding: Decoding,
    /// Evaluate with the caption omitted. Requires the bbox-first layout.
    pub early_stop: bool,
    /// Accuracy whose first crossing is reported as `steps_to_target`.
    pub target_accuracy: f64,
    /// End training at the first evaluation reaching the target.
    pub stop_at_target: bool,
    /// Keep every rollout's component rewards in the step records.
    pub record_rollouts: bool,
    /// Add wall-clock time to the step records (makes logs nondeterministic).
    pub record_elapsed: bool,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            grpo: GrpoConfig {
                learning_rate: T::lit(DEFAULT_TOY_LR),
                ..GrpoConfig::default()
            },
            weights: RewardWeights::equal(),
            mode: OutputMode::CaptionBoxAnswer,
            steps: 2000,
            seed: 0,
            sampler: SamplerConfig::default(),
            eval_every: 50,
            eval_tasks: 200,
            eval_decoding: Decoding::Greedy,
            early_stop: false,
            target_accuracy: 0.9,
            stop_at_target: false,
            record_rollouts: true,
            record_elapsed: false,
        }
    }
}

/// Step size for the toy policy. Its logits are raw weight sums, so it needs
/// a far larger step than a pretrained network.
pub const DEFAULT_TOY_LR: f64 = 30.0;

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.sampler.validate()?;
        if self.early_stop && self.mode != OutputMode::BoxAnswerCaption {
            return Err(Error::InvalidConfig("early stopping requires the bbox-first layout".into()));
        }
        if self.eval_tasks == 0 {
            return Err(Error::InvalidConfig("eval_tasks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::InvalidConfig("target accuracy must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Updates completed, starting at 1.
    pub step: usize,
    pub task_seed: u64,
    /// Group means of caption, bbox, accuracy and format rewards.
    pub mean_components: [f64; NUM_COMPONENTS],
    pub mean_total: f64,
    /// Population variance of the weighted total reward within the group.
    pub group_reward_variance: f64,
    pub objective: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rollout_rewards: Vec<[f64; NUM_COMPONENTS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub accuracy: f64,
    /// Mean number of generated tokens per task.
    pub mean_tokens: f64,
    /// Mean unweighted component rewards (caption, bbox, accuracy, format).
    pub mean_components: [f64; NUM_COMPONENTS],
}

/// Scores `policy` on the first `num_tasks` held-out tasks.
pub fn evaluate<T: Scalar>(
    policy: &ToyPolicy<T>,
    mode: OutputMode,
    early_stop: bool,
    decoding: Decoding,
    num_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ EVAL_BIT);
    let weights = RewardWeights::<T>::equal();
    let mut correct = 0.0;
    let mut tokens = 0usize;
    let mut comps = [0.0; NUM_COMPONENTS];
    for i in 0..num_tasks {
        let task = generate_task(eval_task_seed(i));
        let r = policy.rollout(&task, mode, early_stop, decoding, &mut rng)?;
        tokens += r.trajectory.len();
        correct += accuracy_reward::<T>(r.trajectory.answer(), ANSWER_WORDS[task.gold_answer]).to_f64_lossy();
        let b = score_raw(&r.raw, &task.gold::<T>(), weights, mode);
        for (acc, c) in comps.iter_mut().zip(b.components()) {
            *acc += c.to_f64_lossy();
        }
    }
    let n = num_tasks.max(1) as f64;
    Ok(EvalReport {
        tasks: num_tasks,
        accuracy: correct / n,
        mean_tokens: tokens as f64 / n,
        mean_components: comps.map(|c| c / n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// Held-out accuracy before training and at every evaluation.
    pub evals: Vec<EvalPoint>,
    pub final_eval: EvalReport,
    /// Updates completed at the first evaluation reaching the target.
    pub steps_to_target: Option<usize>,
}

impl TrainingLog {
    /// Mean over steps of the within-group total reward variance.
    pub fn mean_group_reward_variance(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.group_reward_variance).sum::<f64>() / self.records.len() as f64
    }
}

/// Trains a fresh uniform policy; see [`train_with`].
pub fn train<T: Scalar>(cfg: &TrainConfig<T>) -> Result<(ToyPolicy<T>, TrainingLog)> {
    train_with(cfg, |_| Ok(()))
}

/// Trains a fresh uniform policy, handing each step record to `on_step` as
/// soon as it is produced. The reference policy is the initial one.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig<T>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(ToyPolicy<T>, TrainingLog)> {
    cfg.validate()?;
    let mut policy = ToyPolicy::<T>::uniform();
    policy.sampler = cfg.sampler;
    let reference = policy.clone();
    let eval = |p: &ToyPolicy<T>| evaluate(p, cfg.mode, cfg.early_stop, cfg.eval_decoding, cfg.eval_tasks, cfg.seed);

    let mut evals = vec![EvalPoint {
        step: 0,
        accuracy: eval(&policy)?.accuracy,
    }];
    let mut steps_to_target = (evals[0].accuracy >= cfg.target_accuracy).then_some(0);
    let mut records = Vec::with_capacity(cfg.steps);
    let start = Instant::now();

    for step in 0..cfg.steps {
        if cfg.stop_at_target && steps_to_target.is_some() {
            break;
        }
        let task_seed = train_task_seed(cfg.seed, step);
        let task = generate_task(task_seed);
        let gold = task.gold::<T>();
        let mut trajectories: Vec<ToyTrajectory> = Vec::with_capacity(cfg.grpo.group_size);
        let mut rollouts = Vec::with_capacity(cfg.grpo.group_size);
        let mut components = Vec::with_capacity(cfg.grpo.group_size);
        for i in 0..cfg.grpo.group_size {
            let r = policy.rollout(&task, cfg.mode, false, Decoding::Sample, &mut rollout_rng(cfg.seed, step, i))?;
            let b = score_raw(&r.raw, &gold, cfg.weights, cfg.mode);
            let logp_ref = reference.token_log_probs(&r.trajectory)?;
            rollouts.push(RolloutLogProbs::on_policy(r.logp, logp_ref, b.total));
            components.push(b.components().map(|c| c.to_f64_lossy()));
            trajectories.push(r.trajectory);
        }
        let mut batch = GroupBatch::new(format!("{task_seed}"), rollouts);
        let totals = batch.rewards();
        let report = grpo_step(&mut policy, &trajectories, &mut batch, &cfg.grpo)?;

        let done = step + 1;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps;
        let eval_accuracy = if due {
            let acc = eval(&policy)?.accuracy;
            evals.push(EvalPoint { step: done, accuracy: acc });
            if steps_to_target.is_none() && acc >= cfg.target_accuracy {
                steps_to_target = Some(done);
            }
            Some(acc)
        } else {
            None
        };
        let g = components.len() as f64;
        let mut mean_components = [0.0; NUM_COMPONENTS];
        for c in &components {
            for (m, v) in mean_components.iter_mut().zip(c) {
                *m += v / g;
            }
        }
        let record = StepRecord {
            step: done,
            task_seed,
            mean_components,
            mean_total: mean(&totals).to_f64_lossy(),
            group_reward_variance: population_variance(&totals).to_f64_lossy(),
            objective: report.objective.to_f64_lossy(),
            grad_norm: report.grad_norm.to_f64_lossy(),
            rollout_rewards: if cfg.record_rollouts { components } else { Vec::new() },
            eval_accuracy,
            elapsed_ms: cfg.record_elapsed.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        on_step(&record)?;
        records.push(record);
    }

    let final_eval = eval(&policy)?;
    Ok((
        policy,
        TrainingLog {
            records,
            evals,
            final_eval,
            steps_to_target,
        },
    ))
}
