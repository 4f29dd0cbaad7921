use groundrl::grpo::{
    clipped_term, group_normalize, grpo_objective, grpo_step, kl_term, objective_gradient, DifferentiablePolicy,
    GroupBatch, GrpoConfig, RolloutLogProbs,
};
use groundrl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Categorical policy over `n` tokens with free logits; a trajectory is a
/// token sequence scored with the same distribution at every step.
#[derive(Clone)]
struct Softmax {
    logits: Vec<f64>,
}

impl Softmax {
    fn log_probs(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }
}

impl DifferentiablePolicy<f64> for Softmax {
    type Trajectory = Vec<usize>;

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn token_log_probs(&self, traj: &Vec<usize>) -> Result<Vec<f64>> {
        let lp = self.log_probs();
        Ok(traj.iter().map(|&t| lp[t]).collect())
    }

    fn accumulate_log_prob_grad(&self, traj: &Vec<usize>, coefs: &[f64], grad: &mut [f64]) -> Result<()> {
        let p: Vec<f64> = self.log_probs().iter().map(|l| l.exp()).collect();
        for (&t, &c) in traj.iter().zip(coefs) {
            for (v, g) in grad.iter_mut().enumerate() {
                *g += c * ((v == t) as u8 as f64 - p[v]);
            }
        }
        Ok(())
    }
}

fn random_batch(rng: &mut ChaCha8Rng, policy: &Softmax, reference: &Softmax) -> (Vec<Vec<usize>>, GroupBatch<f64>) {
    let n = policy.logits.len();
    let mut trajs = Vec::new();
    let mut rollouts = Vec::new();
    for _ in 0..6 {
        let len = rng.random_range(1..5);
        let t: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let cur = policy.token_log_probs(&t).unwrap();
        let old = cur.iter().map(|l| l + rng.random_range(-0.4..0.4)).collect();
        rollouts.push(RolloutLogProbs {
            logp_cur: cur,
            logp_old: old,
            logp_ref: reference.token_log_probs(&t).unwrap(),
            reward: rng.random::<f64>(),
        });
        trajs.push(t);
    }
    (trajs, GroupBatch::new("q", rollouts))
}

fn objective_at(policy: &Softmax, trajs: &[Vec<usize>], batch: &GroupBatch<f64>, cfg: &GrpoConfig<f64>) -> f64 {
    let mut b = batch.clone();
    for (t, r) in trajs.iter().zip(b.rollouts.iter_mut()) {
        r.logp_cur = policy.token_log_probs(t).unwrap();
    }
    grpo_objective(&b, cfg).unwrap()
}

#[test]
fn two_parameter_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = GrpoConfig::default();
    let policy = Softmax { logits: vec![0.3, -0.2] };
    let reference = Softmax { logits: vec![0.0, 0.0] };
    for _ in 0..5 {
        let (trajs, mut batch) = random_batch(&mut rng, &policy, &reference);
        let (_, grad) = objective_gradient(&policy, &trajs, &mut batch, &cfg).unwrap();
        for k in 0..2 {
            let mut plus = policy.clone();
            plus.logits[k] += 1e-5;
            let mut minus = policy.clone();
            minus.logits[k] -= 1e-5;
            let fd = (objective_at(&plus, &trajs, &batch, &cfg) - objective_at(&minus, &trajs, &batch, &cfg)) / 2e-5;
            assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} vs {}", grad[k]);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut policy = Softmax { logits: vec![0.1, 0.5, -0.3] };
    let reference = policy.clone();
    let (trajs, mut batch) = random_batch(&mut rng, &policy, &reference);
    let cfg = GrpoConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..GrpoConfig::default()
    };
    let before = policy.logits.clone();
    let report = grpo_step(&mut policy, &trajs, &mut batch, &cfg).unwrap();
    assert_eq!(policy.logits, before);
    assert!(report.grad_norm > 0.0);
}

#[test]
fn ascent_raises_objective() {
    let mut policy = Softmax { logits: vec![0.0, 0.0, 0.0] };
    let trajs: Vec<Vec<usize>> = vec![vec![0, 0], vec![1], vec![2, 1, 2], vec![0]];
    let rewards = [1.0, 0.0, 0.2, 0.9];
    let rollouts = trajs
        .iter()
        .zip(rewards)
        .map(|(t, r)| {
            let lp = policy.token_log_probs(t).unwrap();
            RolloutLogProbs::on_policy(lp.clone(), lp, r)
        })
        .collect();
    let mut batch = GroupBatch::new("q", rollouts);
    let cfg = GrpoConfig {
        learning_rate: 0.1,
        ..GrpoConfig::default()
    };
    let before = objective_at(&policy, &trajs, &batch, &cfg);
    grpo_step(&mut policy, &trajs, &mut batch, &cfg).unwrap();
    let after = objective_at(&policy, &trajs, &batch, &cfg);
    assert!(after > before);
    assert!(policy.logits[0] > policy.logits[1]);
}

#[test]
fn degenerate_group_without_kl_has_zero_gradient() {
    let policy = Softmax { logits: vec![0.4, -0.4] };
    let trajs = vec![vec![0], vec![1, 1]];
    let rollouts = trajs
        .iter()
        .map(|t| {
            let lp = policy.token_log_probs(t).unwrap();
            RolloutLogProbs::on_policy(lp.clone(), vec![-0.7; lp.len()], 0.5)
        })
        .collect();
    let mut batch = GroupBatch::new("q", rollouts);
    let cfg = GrpoConfig {
        kl_coef: 0.0,
        ..GrpoConfig::default()
    };
    let (j, g) = objective_gradient(&policy, &trajs, &mut batch, &cfg).unwrap();
    assert_eq!(j, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

fn group() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..32)
}

fn lp_batch() -> impl Strategy<Value = GroupBatch<f64>> {
    prop::collection::vec(
        (prop::collection::vec((-3.0f64..-0.01, -0.3f64..0.3, -3.0f64..-0.01), 1..5), 0.0f64..1.0),
        2..8,
    )
    .prop_map(|rs| {
        GroupBatch::new(
            "q",
            rs.into_iter()
                .map(|(toks, reward)| RolloutLogProbs {
                    logp_cur: toks.iter().map(|t| t.0).collect(),
                    logp_old: toks.iter().map(|t| t.0 + t.1).collect(),
                    logp_ref: toks.iter().map(|t| t.2).collect(),
                    reward,
                })
                .collect(),
        )
    })
}

proptest! {
    #[test]
    fn normalized_moments(r in group()) {
        let a = group_normalize(&r, 1e-8).unwrap();
        let n = r.len() as f64;
        let m = a.0.iter().sum::<f64>() / n;
        if a.is_degenerate() {
            prop_assert!(a.0.iter().all(|v| *v == 0.0));
        } else {
            let sd = (a.0.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clip_is_pessimistic(h in 0.01f64..5.0, adv in -3.0f64..3.0, eps in 0.01f64..0.99) {
        let c = clipped_term(h, adv, eps);
        prop_assert!(c <= h * adv + 1e-15);
        prop_assert!(c <= h.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-15);
    }

    #[test]
    fn kl_nonnegative(a in -10.0f64..0.0, b in -10.0f64..0.0) {
        let k = kl_term(a, b);
        prop_assert!(k >= 0.0);
        let r = (b - a).exp();
        prop_assert!((k - (r - r.ln() - 1.0)).abs() < 1e-9 * (1.0 + k));
        prop_assert_eq!(kl_term(a, a), 0.0);
    }

    #[test]
    fn objective_invariant_to_reward_shift_and_scale(b in lp_batch(), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        // rescaling can push a near-degenerate group across adv_eps
        let rs = b.rewards();
        let spread = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - rs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let cfg = GrpoConfig::default();
        let base = grpo_objective(&b, &cfg).unwrap();
        let mut moved = b.clone();
        for r in &mut moved.rollouts {
            r.reward = r.reward * scale + shift;
        }
        let other = grpo_objective(&moved, &cfg).unwrap();
        prop_assert!((base - other).abs() < 1e-9);
    }
}
