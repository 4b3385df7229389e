use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, collect_rollouts, compute_gae_bootstrapped, minibatch_loss, normalize, Adam};
use super::{MarlError, TrainConfig};
use crate::envs::TaskConfig;
use crate::nn::{Params, Policy};
use crate::numcore::Graph;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub ppo_loss: f64,
    pub critic_loss: f64,
    /// per-timestep attention entropy, averaged over the update
    pub attn_entropy_mean: f64,
    /// mean team reward per frame of the collected batch
    pub reward_mean: f64,
    /// mean success of episodes finished during collection, if any
    pub success_mean: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CheckpointSnapshot {
    /// 1-based iteration after which the snapshot was taken
    pub iteration: usize,
    pub fraction: f64,
    pub params: Params,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: Policy,
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<CheckpointSnapshot>,
}

/// Iterations (1-based) at which each checkpoint fraction falls, rounded up.
pub fn checkpoint_iterations(total: usize, fractions: &[f64]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = fractions
        .iter()
        .map(|&f| (((f * total as f64).ceil() as usize).clamp(1, total), f))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.dedup_by_key(|c| c.0);
    out
}

/// Trains a fresh shared policy. `on_iteration` sees every loss record as it
/// is produced.
pub fn train(
    task: &TaskConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutput, MarlError> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut policy = Policy::init(task.task, task.n_agents, &mut init_rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let marks = checkpoint_iterations(cfg.collector_iterations, &cfg.checkpoint_fractions);
    let mut losses = Vec::with_capacity(cfg.collector_iterations);
    let mut checkpoints = Vec::new();

    for it in 0..cfg.collector_iterations {
        let batch = collect_rollouts(&policy, task, cfg, seed, it)?;
        let (mut adv, returns) = compute_gae_bootstrapped(
            &batch.rewards,
            &batch.values,
            &batch.next_values,
            &batch.boundaries,
            cfg.gamma,
            cfg.gae_lambda,
        )?;
        if cfg.normalize_advantage {
            normalize(&mut adv);
        }
        let frames = batch.frames();
        let mut order: Vec<usize> = (0..frames).collect();
        let (mut ppo_sum, mut critic_sum, mut ent_sum, mut norm_sum, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[it as u64, 3, epoch as u64]));
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let g = Graph::new();
                let bound = policy.params.bind(&g, true);
                let parts = minibatch_loss(&bound, &policy.arch, &batch, chunk, &adv, &returns, cfg)?;
                let total = parts.total.item();
                if !total.is_finite() {
                    return Err(MarlError::Diverged { iteration: it, epoch });
                }
                g.backward(parts.total)?;
                let mut grads = bound.grads();
                let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
                if !norm.is_finite() {
                    return Err(MarlError::Diverged { iteration: it, epoch });
                }
                adam.step(&mut policy.params, &grads);
                ppo_sum += parts.ppo.item();
                critic_sum += parts.critic.item();
                ent_sum += parts.attention_entropy.item();
                norm_sum += norm;
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        let record = LossRecord {
            iteration: it + 1,
            ppo_loss: ppo_sum / c,
            critic_loss: critic_sum / c,
            attn_entropy_mean: ent_sum / c,
            reward_mean: batch.rewards.iter().sum::<f64>() / frames as f64,
            success_mean: (!batch.episode_success.is_empty())
                .then(|| batch.episode_success.iter().sum::<f64>() / batch.episode_success.len() as f64),
            grad_norm: norm_sum / c,
        };
        on_iteration(&record);
        losses.push(record);
        for &(mark, fraction) in &marks {
            if mark == it + 1 {
                checkpoints.push(CheckpointSnapshot {
                    iteration: mark,
                    fraction,
                    params: policy.params.clone(),
                });
            }
        }
    }
    Ok(TrainOutput {
        policy,
        losses,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskId;

    fn tiny(task: TaskId, lambda: f64) -> TrainConfig {
        TrainConfig {
            collector_iterations: 2,
            frames_per_batch: 40,
            num_envs: 2,
            epochs: 2,
            minibatch_size: 20,
            attention_entropy_weight: lambda,
            ..TrainConfig::desk(task)
        }
    }

    #[test]
    fn checkpoint_marks() {
        assert_eq!(
            checkpoint_iterations(75, &[0.2, 0.5, 0.8, 1.0]),
            vec![(15, 0.2), (38, 0.5), (60, 0.8), (75, 1.0)]
        );
        assert_eq!(checkpoint_iterations(2, &[0.2, 0.5]).len(), 1);
    }

    #[test]
    fn same_seed_same_losses() {
        let task = TaskConfig::new(TaskId::Navigation, 3).unwrap();
        let cfg = tiny(TaskId::Navigation, 10.0);
        let a = train(&task, &cfg, 21, |_| {}).unwrap();
        let b = train(&task, &cfg, 21, |_| {}).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.policy.params, b.policy.params);
        assert_eq!(a.checkpoints.last().unwrap().iteration, 2);
        let c = train(&task, &cfg, 22, |_| {}).unwrap();
        assert_ne!(a.losses[0].ppo_loss, c.losses[0].ppo_loss);
    }

    #[test]
    fn negative_lambda_rejected() {
        let task = TaskConfig::new(TaskId::Navigation, 3).unwrap();
        let cfg = tiny(TaskId::Navigation, -0.5);
        assert!(matches!(train(&task, &cfg, 0, |_| {}), Err(MarlError::NegativeLambda(_))));
    }

    #[test]
    fn regularizer_lowers_attention_entropy() {
        let task = TaskConfig::new(TaskId::Passage, 4).unwrap();
        let mut cfg = tiny(TaskId::Passage, 50.0);
        cfg.collector_iterations = 3;
        cfg.learning_rate = 1e-3;
        let out = train(&task, &cfg, 5, |_| {}).unwrap();
        let first = out.losses.first().unwrap().attn_entropy_mean;
        let last = out.losses.last().unwrap().attn_entropy_mean;
        assert!(last < first, "{first} -> {last}");
    }
}
