//! MAPPO with a centralized critic, shared agent parameters and the
//! attention-entropy regularizer.

mod config;
mod gae;
mod loss;
mod optim;
mod rollout;
mod train;

pub use config::{Profile, TrainConfig};
pub use gae::{compute_gae, compute_gae_bootstrapped, normalize};
pub use loss::{gaussian_log_prob, minibatch_loss, ppo_clip_loss, regularized_loss, LossParts, CRITIC_COEF};
pub use optim::{clip_grad_norm, global_norm, Adam};
pub use rollout::{collect_rollouts, run_episode, ActionMode, EpisodeResult, RolloutBatch};
pub use train::{checkpoint_iterations, train, CheckpointSnapshot, LossRecord, TrainOutput};

use thiserror::Error;

use crate::envs::EnvError;
use crate::nn::NnError;
use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum MarlError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("sequence lengths differ: {0}")]
    Length(String),
    #[error("attention entropy weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("loss became non-finite at iteration {iteration}, epoch {epoch}")]
    Diverged { iteration: usize, epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}
