use std::f64::consts::{E, PI};

use super::{MarlError, RolloutBatch, TrainConfig};
use crate::nn::{critic_forward, policy_forward_batch, Architecture, BoundParams, ACTION_DIM};
use crate::numcore::{Tensor, Var};

/// Weight of the critic term in the total loss.
pub const CRITIC_COEF: f64 = 1.0;

/// Diagonal-Gaussian log density of each row of `samples`, as `M×1`.
pub fn gaussian_log_prob<'g>(samples: Var<'g>, mean: Var<'g>, log_std: Var<'g>) -> Result<Var<'g>, MarlError> {
    let dims = samples.shape()[1] as f64;
    let inv_std = log_std.scale(-1.0).exp();
    let z = samples.sub(&mean)?.mul_row(&inv_std)?;
    let neg_log_norm = log_std.sum().scale(-1.0);
    Ok(z
        .mul(&z)?
        .sum_cols()
        .scale(-0.5)
        .add_row(&neg_log_norm)?
        .add_scalar(-0.5 * dims * (2.0 * PI).ln()))
}

/// `mean(−min(ρ·A, clip(ρ, 1−ε, 1+ε)·A))` with `ρ = exp(new − old)`.
pub fn ppo_clip_loss<'g>(
    new_log_probs: Var<'g>,
    old_log_probs: Var<'g>,
    advantages: Var<'g>,
    clip_eps: f64,
) -> Result<Var<'g>, MarlError> {
    let ratio = new_log_probs.sub(&old_log_probs)?.exp();
    let unclipped = ratio.mul(&advantages)?;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps).mul(&advantages)?;
    Ok(unclipped.minimum(&clipped)?.mean().scale(-1.0))
}

/// `ppo + c·critic − entropy_eps·action_entropy + λ·mean_t H(α_t)`, where
/// `attention_entropies` holds one total entropy per timestep.
pub fn regularized_loss<'g>(
    ppo_loss: Var<'g>,
    critic_loss: Var<'g>,
    action_entropy: Var<'g>,
    attention_entropies: Var<'g>,
    lambda: f64,
    entropy_eps: f64,
) -> Result<Var<'g>, MarlError> {
    if lambda < 0.0 {
        return Err(MarlError::NegativeLambda(lambda));
    }
    let mut total = ppo_loss
        .add(&critic_loss.scale(CRITIC_COEF))?
        .sub(&action_entropy.scale(entropy_eps))?;
    if lambda > 0.0 {
        total = total.add(&attention_entropies.mean().scale(lambda))?;
    }
    Ok(total)
}

pub struct LossParts<'g> {
    pub total: Var<'g>,
    pub ppo: Var<'g>,
    pub critic: Var<'g>,
    pub action_entropy: Var<'g>,
    /// mean over the minibatch of the per-timestep attention entropy
    pub attention_entropy: Var<'g>,
}

/// Full training objective on the frames listed in `indices`.
pub fn minibatch_loss<'g>(
    params: &BoundParams<'g>,
    arch: &Architecture,
    batch: &RolloutBatch,
    indices: &[usize],
    advantages: &[f64],
    returns: &[f64],
    cfg: &TrainConfig,
) -> Result<LossParts<'g>, MarlError> {
    let graph = params
        .vars()
        .first()
        .map(|(_, v)| v.graph())
        .ok_or_else(|| MarlError::Config("no parameters bound".into()))?;
    let n = batch.n_agents;
    let b = indices.len();
    let obs = graph.constant(batch.agent_obs(indices));
    let weights = graph.constant(Tensor::ones(b * n, n));
    let out = policy_forward_batch(params, arch, obs, weights, n)?;

    let mut u = Vec::with_capacity(b * n * ACTION_DIM);
    let mut old = Vec::with_capacity(b * n);
    let mut corr = Vec::with_capacity(b * n);
    let mut adv = Vec::with_capacity(b * n);
    for &t in indices {
        u.extend_from_slice(&batch.pre_squash[t * n * ACTION_DIM..(t + 1) * n * ACTION_DIM]);
        old.extend_from_slice(&batch.log_probs[t * n..(t + 1) * n]);
        corr.extend_from_slice(&batch.squash_correction[t * n..(t + 1) * n]);
        adv.extend(std::iter::repeat_n(advantages[t], n));
    }
    let u = graph.constant(Tensor::new(b * n, ACTION_DIM, u)?);
    let old = graph.constant(Tensor::column_vector(&old));
    let corr = graph.constant(Tensor::column_vector(&corr));
    let adv = graph.constant(Tensor::column_vector(&adv));

    let new = gaussian_log_prob(u, out.mean, out.log_std)?.sub(&corr)?;
    let ppo = ppo_clip_loss(new, old, adv, cfg.clip_eps)?;

    let joint = graph.constant(batch.joint_obs(indices));
    let values = critic_forward(params, arch, joint)?;
    let targets: Vec<f64> = indices.iter().map(|&t| returns[t]).collect();
    let critic = values.sub(&graph.constant(Tensor::column_vector(&targets)))?.smooth_l1().mean();

    let action_entropy = out
        .log_std
        .sum()
        .add_scalar(0.5 * ACTION_DIM as f64 * (2.0 * PI * E).ln());
    let per_step = out.gat.attention.row_entropy()?.reshape(b, n)?.sum_cols();
    let total = regularized_loss(ppo, critic, action_entropy, per_step, cfg.attention_entropy_weight, cfg.entropy_eps)?;
    Ok(LossParts {
        total,
        ppo,
        critic,
        action_entropy,
        attention_entropy: per_step.mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Graph};

    fn col<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.constant(Tensor::column_vector(v))
    }

    #[test]
    fn unit_ratio_gives_negative_mean_advantage() {
        let g = Graph::new();
        let lp = col(&g, &[-1.0, -0.3, -2.0]);
        let adv = col(&g, &[1.0, -2.0, 4.0]);
        let l = ppo_clip_loss(lp, lp, adv, 0.2).unwrap();
        assert!((l.item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn clipped_contribution() {
        let g = Graph::new();
        let new = col(&g, &[2f64.ln()]);
        let old = col(&g, &[0.0]);
        let l = ppo_clip_loss(new, old, col(&g, &[1.0]), 0.2).unwrap();
        assert!((l.item() + 1.2).abs() < 1e-12);
        let zero = ppo_clip_loss(new, old, col(&g, &[0.0]), 0.2).unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn clipped_surrogate_never_exceeds_unclipped() {
        let g = Graph::new();
        for &(r, a) in &[(0.5, 1.0), (0.5, -1.0), (1.5, 1.0), (1.5, -1.0), (1.1, 0.3), (0.9, -0.3)] {
            let new = col(&g, &[f64::ln(r)]);
            let old = col(&g, &[0.0]);
            let adv = col(&g, &[a]);
            let clipped = -ppo_clip_loss(new, old, adv, 0.2).unwrap().item();
            assert!(clipped <= r * a + 1e-12);
        }
    }

    #[test]
    fn ppo_gradient_inside_clip_band() {
        let old = [-0.4, -1.1, 0.2, -0.7];
        let adv = [0.5, -1.5, 2.0, 0.1];
        let point = Tensor::column_vector(&[-0.35, -1.15, 0.25, -0.72]);
        let r = grad_check(
            move |g, new| {
                let old = g.constant(Tensor::column_vector(&old));
                let adv = g.constant(Tensor::column_vector(&adv));
                ppo_clip_loss(new, old, adv, 0.2).map_err(|e| crate::numcore::NumError::Invalid(e.to_string()))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn regularizer_values() {
        let g = Graph::new();
        let ppo = g.scalar(0.7);
        let critic = g.scalar(0.2);
        let ent = g.scalar(1.3);
        // uniform attention over 3 agents: each timestep has 3 rows of entropy ln 3
        let h = col(&g, &[3.0 * 3f64.ln(); 4]);
        let base = regularized_loss(ppo, critic, ent, h, 0.0, 0.01).unwrap().item();
        assert!((base - (0.9 - 0.013)).abs() < 1e-12);
        let reg = regularized_loss(ppo, critic, ent, h, 10.0, 0.01).unwrap().item();
        assert!((reg - base - 32.958_368_660_043_3).abs() < 1e-9);
        let onehot = col(&g, &[0.0; 4]);
        assert_eq!(regularized_loss(ppo, critic, ent, onehot, 10.0, 0.01).unwrap().item(), base);
        assert!(matches!(
            regularized_loss(ppo, critic, ent, h, -1.0, 0.0),
            Err(MarlError::NegativeLambda(_))
        ));
    }

    #[test]
    fn gaussian_log_prob_closed_form() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.3, -1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[[0.0, 0.5]]).unwrap());
        let ls = g.constant(Tensor::row_vector(&[-0.5, 0.2]));
        let lp = gaussian_log_prob(x, m, ls).unwrap().item();
        let expect: f64 = [(0.3f64, 0.0f64, -0.5f64), (-1.0, 0.5, 0.2)]
            .iter()
            .map(|&(x, m, l)| {
                let s = l.exp();
                -0.5 * ((x - m) / s).powi(2) - l - 0.5 * (2.0 * PI).ln()
            })
            .sum();
        assert!((lp - expect).abs() < 1e-12);
    }
}
