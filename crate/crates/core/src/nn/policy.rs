use super::layers::{check_weights, sentinel_scores};
use super::{gatv2_layer, mlp_forward, Architecture, BoundParams, GatOutput, GatVars, NnError, Params, ACTION_DIM};
use crate::envs::TaskId;
use crate::numcore::{Graph, NumError, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const LOG_STD_INIT: f64 = -0.5;

/// Diagonal Gaussian over pre-squash actions, one row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHead {
    pub mean: Tensor,
    /// state independent and shared across agents, already clamped
    pub log_std: [f64; ACTION_DIM],
}

impl PolicyHead {
    pub fn std(&self) -> [f64; ACTION_DIM] {
        self.log_std.map(f64::exp)
    }

    /// Deterministic action: the squashed mean.
    pub fn mean_action(&self) -> Vec<[f64; ACTION_DIM]> {
        (0..self.mean.rows())
            .map(|r| [self.mean.get(r, 0).tanh(), self.mean.get(r, 1).tanh()])
            .collect()
    }
}

#[derive(Clone, Copy)]
pub struct PolicyVars<'g> {
    /// `(B·n)×2` pre-squash means
    pub mean: Var<'g>,
    /// `1×2` clamped log standard deviation
    pub log_std: Var<'g>,
    pub gat: GatVars<'g>,
}

/// Encoder → GATv2 → decoder over `B` stacked graphs of `n` agents.
pub fn policy_forward_batch<'g>(
    params: &BoundParams<'g>,
    arch: &Architecture,
    obs: Var<'g>,
    weights: Var<'g>,
    n: usize,
) -> Result<PolicyVars<'g>, NnError> {
    let width = obs.shape()[1];
    if width != arch.obs_dim {
        return Err(NnError::Width {
            expected: arch.obs_dim,
            found: width,
        });
    }
    let encoded = mlp_forward(params, "encoder", obs, &arch.encoder, None)?;
    let gat = gatv2_layer(params, encoded, weights, n, arch.gat_activation)?;
    let mean = mlp_forward(params, "decoder", gat.embeddings, &arch.decoder, Some(ACTION_DIM))?;
    let log_std = params.get("policy.log_std")?.clamp(LOG_STD_MIN, LOG_STD_MAX);
    Ok(PolicyVars { mean, log_std, gat })
}

/// Single-graph forward pass without gradient tracking. `None` weights means
/// the complete graph.
pub fn policy_forward(
    params: &Params,
    arch: &Architecture,
    obs: &Tensor,
    edge_weights: Option<&Tensor>,
) -> Result<(PolicyHead, GatOutput), NnError> {
    let n = obs.rows();
    let weights = match edge_weights {
        Some(w) => {
            if w.shape() != [n, n] {
                return Err(NnError::Num(NumError::ShapeMismatch {
                    op: "policy_forward",
                    lhs: obs.shape(),
                    rhs: w.shape(),
                }));
            }
            check_weights(w)?;
            w.clone()
        }
        None => Tensor::ones(n, n),
    };
    let g = Graph::inference();
    let bound = params.bind(&g, false);
    let x = g.constant(obs.clone());
    let w = g.constant(weights.clone());
    let out = policy_forward_batch(&bound, arch, x, w, n)?;
    let ls = out.log_std.value();
    let head = PolicyHead {
        mean: out.mean.value(),
        log_std: [ls.data()[0], ls.data()[1]],
    };
    let gat = GatOutput {
        embeddings: out.gat.embeddings.value(),
        attention: out.gat.attention.value(),
        scores: sentinel_scores(&out.gat.scores.value(), &weights),
    };
    Ok((head, gat))
}

/// Centralized value estimate from the concatenated team observation
/// (`B × n·obs_dim`), returning `B×1`.
pub fn critic_forward<'g>(params: &BoundParams<'g>, arch: &Architecture, joint_obs: Var<'g>) -> Result<Var<'g>, NnError> {
    mlp_forward(params, "critic", joint_obs, &arch.critic, Some(1))
}

/// Sum over rows of the per-row Shannon entropy (nats), `0·ln 0 = 0`.
pub fn attention_entropy(alpha: &Tensor) -> Result<f64, NnError> {
    let g = Graph::inference();
    let a = g.constant(alpha.clone());
    Ok(a.row_entropy()?.sum().item())
}

/// Shared-parameter team policy together with the architecture it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub task: TaskId,
    /// team size the centralized critic was built for
    pub train_agents: usize,
    pub arch: Architecture,
    pub params: Params,
}

impl Policy {
    pub fn new(task: TaskId, train_agents: usize, params: Params) -> Result<Self, NnError> {
        let arch = Architecture::for_task(task);
        params.validate(&arch, train_agents)?;
        Ok(Self {
            task,
            train_agents,
            arch,
            params,
        })
    }

    pub fn init<R: rand::Rng>(task: TaskId, train_agents: usize, rng: &mut R) -> Self {
        let arch = Architecture::for_task(task);
        let params = Params::init(&arch, train_agents, rng);
        Self {
            task,
            train_agents,
            arch,
            params,
        }
    }

    pub fn forward(&self, obs: &Tensor, edge_weights: Option<&Tensor>) -> Result<(PolicyHead, GatOutput), NnError> {
        policy_forward(&self.params, &self.arch, obs, edge_weights)
    }

    pub fn head(&self, obs: &Tensor, edge_weights: Option<&Tensor>) -> Result<PolicyHead, NnError> {
        Ok(self.forward(obs, edge_weights)?.0)
    }
}
