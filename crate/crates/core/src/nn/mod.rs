//! Graph layers and the encoder → GATv2 → decoder policy.

mod layers;
mod params;
mod policy;

pub use layers::{
    gatv2_layer, gatv2_scores, gcn_layer_forward, masked_softmax_row, mlp_forward, GatOutput, GatVars, GraphBatch,
    LEAKY_SLOPE,
};
pub use params::{BoundParams, Params};
pub use policy::{
    attention_entropy, critic_forward, policy_forward, policy_forward_batch, Policy, PolicyHead, PolicyVars,
    LOG_STD_INIT, LOG_STD_MAX, LOG_STD_MIN,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::TaskId;
use crate::numcore::{NumError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("input width {found} does not match expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("edge weights must be finite and within [0, 1]")]
    EdgeWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'g>(&self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Hidden widths plus the activation shared by those layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(hidden: &[usize], activation: Activation) -> Self {
        Self {
            hidden: hidden.to_vec(),
            activation,
        }
    }

    pub fn identity() -> Self {
        Self::new(&[], Activation::Identity)
    }

    /// `(fan_in, fan_out)` of each layer, with an optional linear output layer.
    pub fn layer_dims(&self, input: usize, output: Option<usize>) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        if let Some(o) = output {
            dims.push((prev, o));
        }
        dims
    }

    pub fn out_width(&self, input: usize) -> usize {
        self.hidden.last().copied().unwrap_or(input)
    }
}

pub const ACTION_DIM: usize = 2;

/// Per-task network shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub encoder: MlpSpec,
    pub gat_dim: usize,
    pub gat_activation: Activation,
    pub decoder: MlpSpec,
    pub critic: MlpSpec,
}

impl Architecture {
    pub fn for_task(task: TaskId) -> Self {
        use Activation::*;
        match task {
            TaskId::Navigation => Self {
                obs_dim: 6,
                encoder: MlpSpec::identity(),
                gat_dim: 32,
                gat_activation: Tanh,
                decoder: MlpSpec::new(&[256, 256], Tanh),
                critic: MlpSpec::new(&[32, 32], Tanh),
            },
            TaskId::Passage => Self {
                obs_dim: 8,
                encoder: MlpSpec::new(&[32; 4], Relu),
                gat_dim: 32,
                gat_activation: Tanh,
                decoder: MlpSpec::new(&[64; 4], Relu),
                critic: MlpSpec::new(&[32, 32], Tanh),
            },
            TaskId::Discovery => Self {
                obs_dim: 5,
                encoder: MlpSpec::new(&[64], Relu),
                gat_dim: 64,
                gat_activation: Relu,
                decoder: MlpSpec::new(&[64, 64], Relu),
                critic: MlpSpec::new(&[128, 128], Tanh),
            },
        }
    }

    pub fn encoder_width(&self) -> usize {
        self.encoder.out_width(self.obs_dim)
    }

    /// Ordered `(name, shape)` list of every parameter for a team of `n_agents`
    /// (the centralized critic sees all agents' observations at once).
    pub fn param_shapes(&self, n_agents: usize) -> Vec<(String, [usize; 2])> {
        let mut out = Vec::new();
        let mut push_mlp = |prefix: &str, dims: Vec<(usize, usize)>| {
            for (i, (fi, fo)) in dims.into_iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), [fi, fo]));
                out.push((format!("{prefix}.{i}.bias"), [1, fo]));
            }
        };
        push_mlp("encoder", self.encoder.layer_dims(self.obs_dim, None));
        let enc = self.encoder_width();
        let mut gat = vec![
            ("gat.w_src".to_string(), [enc, self.gat_dim]),
            ("gat.w_dst".to_string(), [enc, self.gat_dim]),
            ("gat.att".to_string(), [self.gat_dim, 1]),
        ];
        let mut decoder = Vec::new();
        for (i, (fi, fo)) in self.decoder.layer_dims(self.gat_dim, Some(ACTION_DIM)).into_iter().enumerate() {
            decoder.push((format!("decoder.{i}.weight"), [fi, fo]));
            decoder.push((format!("decoder.{i}.bias"), [1, fo]));
        }
        let mut critic = Vec::new();
        for (i, (fi, fo)) in self.critic.layer_dims(self.obs_dim * n_agents, Some(1)).into_iter().enumerate() {
            critic.push((format!("critic.{i}.weight"), [fi, fo]));
            critic.push((format!("critic.{i}.bias"), [1, fo]));
        }
        out.append(&mut gat);
        out.append(&mut decoder);
        out.push(("policy.log_std".to_string(), [1, ACTION_DIM]));
        out.append(&mut critic);
        out
    }
}
