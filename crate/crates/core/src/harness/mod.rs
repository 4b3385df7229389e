//! Run configuration, checkpoint files, report emission and the command line.

mod checkpoint;
mod cli;
mod config;
mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::envs::{task_metrics, EnvError, TaskConfig, TaskMetrics};
use crate::explainers::{ExplainError, ExplainerConfig, ExplainerKind};
use crate::expmetrics::{evaluate_explainer, Evaluation, MetricError};
use crate::marl::{run_episode, train, ActionMode, LossRecord, MarlError, TrainOutput};
use crate::nn::NnError;
use crate::seeds::derive_seed;
use crate::stats::StatsError;
use crate::theory::TheoryError;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use cli::cli_dispatch;
pub use config::RunConfig;
pub use report::{read_metric_column, write_loss_csv, write_report, ReportPaths};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {expected}, computed {found}")]
    Checksum { expected: String, found: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Trains per `cfg` and writes `final.ckpt`, one `iter_XXXXX.ckpt` per
/// checkpoint fraction, `losses.csv` and `config.txt` into `out_dir`.
pub fn run_training(
    cfg: &RunConfig,
    out_dir: &Path,
    on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutput, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let config_path = out_dir.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(|e| HarnessError::io(&config_path, e))?;
    let out = train(&cfg.task, &cfg.train, cfg.seed, on_iteration)?;
    write_loss_csv(&out.losses, &out_dir.join("losses.csv"))?;
    for snap in &out.checkpoints {
        let ckpt = Checkpoint {
            params: snap.params.clone(),
            iteration: snap.iteration,
            ..Checkpoint::new(&out.policy, &cfg.train, snap.iteration, cfg.seed)
        };
        save_checkpoint(&ckpt, &out_dir.join(format!("iter_{:05}.ckpt", snap.iteration)))?;
    }
    let last = Checkpoint::new(&out.policy, &cfg.train, cfg.train.collector_iterations, cfg.seed);
    save_checkpoint(&last, &out_dir.join("final.ckpt"))?;
    Ok(out)
}

/// Per-episode task metrics of deterministic rollouts, plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n_agents: usize,
    pub episodes: Vec<TaskMetrics>,
    pub success_rate: f64,
    pub reward: f64,
    pub no_agent_coll: f64,
}

/// Evaluates a checkpoint at `n_agents` (any supported size; larger than the
/// training size is the zero-shot setting).
pub fn run_evaluation(ckpt: &Checkpoint, n_agents: usize, episodes: usize, seed: u64) -> Result<EvalSummary, HarnessError> {
    let policy = ckpt.policy()?;
    let task = TaskConfig::new(ckpt.task, n_agents)?;
    let mut all = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let run = run_episode(&policy, &task, derive_seed(seed, &[e as u64]), ActionMode::Mean)?;
        all.push(task_metrics(&run.log, &task));
    }
    let mean = |f: fn(&TaskMetrics) -> f64| {
        if all.is_empty() {
            0.0
        } else {
            all.iter().map(f).sum::<f64>() / all.len() as f64
        }
    };
    Ok(EvalSummary {
        n_agents,
        success_rate: mean(|m| m.success_rate),
        reward: mean(|m| m.reward),
        no_agent_coll: mean(|m| m.no_agent_coll),
        episodes: all,
    })
}

/// Explains every timestep of `episodes` rollouts and scores the masks.
pub fn run_explanation(
    ckpt: &Checkpoint,
    kind: ExplainerKind,
    cfg: &ExplainerConfig,
    n_agents: usize,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, HarnessError> {
    cfg.validate()?;
    let policy = ckpt.policy()?;
    let task = TaskConfig::new(ckpt.task, n_agents)?;
    Ok(evaluate_explainer(&policy, &task, kind, cfg, ckpt.regularized(), episodes, seed)?)
}
