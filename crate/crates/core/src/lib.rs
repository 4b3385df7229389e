//! Graph-attention multi-agent policies trained with an attention-entropy
//! regularizer, post-hoc subgraph explainers, and the fidelity metrics used to
//! score them.

pub mod numcore;
pub mod envs;
pub mod nn;
pub mod seeds;
pub mod marl;
pub mod explainers;
pub mod expmetrics;
pub mod theory;
pub mod stats;
pub mod harness;
