use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MarlError;
use crate::envs::TaskId;

/// Which hyperparameter table a run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// the full published tables
    Paper,
    /// reduced budget that finishes on one workstation core
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = MarlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(MarlError::Config(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// action-entropy bonus coefficient
    pub entropy_eps: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub max_grad_norm: f64,
    pub frames_per_batch: usize,
    pub collector_iterations: usize,
    pub normalize_advantage: bool,
    /// λ of the attention-entropy term; 0 disables it
    pub attention_entropy_weight: f64,
    /// environments stepped in lockstep while collecting
    pub num_envs: usize,
    /// fractions of `collector_iterations` at which checkpoints are emitted
    pub checkpoint_fractions: Vec<f64>,
}

impl TrainConfig {
    pub fn paper(task: TaskId) -> Self {
        match task {
            TaskId::Navigation => Self {
                learning_rate: 0.0003,
                gamma: 0.99999,
                gae_lambda: 0.9,
                entropy_eps: 0.0001,
                clip_eps: 0.2,
                epochs: 30,
                minibatch_size: 800,
                max_grad_norm: 1.0,
                frames_per_batch: 18000,
                collector_iterations: 150,
                normalize_advantage: false,
                attention_entropy_weight: 10.0,
                num_envs: 45,
                checkpoint_fractions: default_fractions(),
            },
            TaskId::Passage => Self {
                learning_rate: 0.00005,
                gamma: 0.99999,
                gae_lambda: 0.9,
                entropy_eps: 0.0001,
                clip_eps: 0.2,
                epochs: 30,
                minibatch_size: 800,
                max_grad_norm: 1.0,
                frames_per_batch: 60000,
                collector_iterations: 100,
                normalize_advantage: false,
                attention_entropy_weight: 50.0,
                num_envs: 120,
                checkpoint_fractions: default_fractions(),
            },
            TaskId::Discovery => Self {
                learning_rate: 0.0007,
                gamma: 0.9999,
                gae_lambda: 0.95,
                entropy_eps: 0.0001,
                clip_eps: 0.05,
                epochs: 5,
                minibatch_size: 10000,
                max_grad_norm: 10.0,
                frames_per_batch: 10000,
                collector_iterations: 1000,
                normalize_advantage: true,
                attention_entropy_weight: 50.0,
                num_envs: 20,
                checkpoint_fractions: default_fractions(),
            },
        }
    }

    /// Workstation budget: fewer iterations, smaller batches and fewer epochs;
    /// every other coefficient is the published one.
    pub fn desk(task: TaskId) -> Self {
        let paper = Self::paper(task);
        match task {
            TaskId::Navigation => Self {
                collector_iterations: 100,
                frames_per_batch: 4000,
                epochs: 4,
                minibatch_size: 800,
                num_envs: 20,
                ..paper
            },
            TaskId::Passage => Self {
                collector_iterations: 50,
                frames_per_batch: 6000,
                epochs: 4,
                minibatch_size: 800,
                num_envs: 20,
                ..paper
            },
            TaskId::Discovery => Self {
                collector_iterations: 100,
                frames_per_batch: 5000,
                epochs: 5,
                minibatch_size: 5000,
                num_envs: 10,
                ..paper
            },
        }
    }

    pub fn for_profile(task: TaskId, profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(task),
            Profile::Desk => Self::desk(task),
        }
    }

    pub fn validate(&self) -> Result<(), MarlError> {
        if self.attention_entropy_weight < 0.0 {
            return Err(MarlError::NegativeLambda(self.attention_entropy_weight));
        }
        let bad = |m: &str| Err(MarlError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.frames_per_batch == 0 || self.num_envs == 0 {
            return bad("epochs, minibatch_size, frames_per_batch and num_envs must be positive");
        }
        if self.collector_iterations == 0 {
            return bad("collector_iterations must be positive");
        }
        if self.checkpoint_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("checkpoint fractions must lie in (0, 1]");
        }
        Ok(())
    }

    /// Flat `key=value` view, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("gamma", self.gamma.to_string()),
            ("gae_lambda", self.gae_lambda.to_string()),
            ("entropy_eps", self.entropy_eps.to_string()),
            ("clip_eps", self.clip_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("minibatch_size", self.minibatch_size.to_string()),
            ("max_grad_norm", self.max_grad_norm.to_string()),
            ("frames_per_batch", self.frames_per_batch.to_string()),
            ("collector_iterations", self.collector_iterations.to_string()),
            ("normalize_advantage", self.normalize_advantage.to_string()),
            ("lambda_attn", self.attention_entropy_weight.to_string()),
            ("num_envs", self.num_envs.to_string()),
            (
                "checkpoint_fractions",
                self.checkpoint_fractions
                    .iter()
                    .map(|f| f.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ]
    }

    pub const KEYS: [&'static str; 14] = [
        "learning_rate",
        "gamma",
        "gae_lambda",
        "entropy_eps",
        "clip_eps",
        "epochs",
        "minibatch_size",
        "max_grad_norm",
        "frames_per_batch",
        "collector_iterations",
        "normalize_advantage",
        "lambda_attn",
        "num_envs",
        "checkpoint_fractions",
    ];

    /// Applies one `key=value` override. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), MarlError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, MarlError> {
            value
                .trim()
                .parse()
                .map_err(|_| MarlError::Config(format!("cannot parse '{value}' for key '{key}'")))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "gae_lambda" => self.gae_lambda = parse(key, value)?,
            "entropy_eps" => self.entropy_eps = parse(key, value)?,
            "clip_eps" => self.clip_eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "minibatch_size" => self.minibatch_size = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "frames_per_batch" => self.frames_per_batch = parse(key, value)?,
            "collector_iterations" => self.collector_iterations = parse(key, value)?,
            "normalize_advantage" => self.normalize_advantage = parse(key, value)?,
            "lambda_attn" | "attention_entropy_weight" => self.attention_entropy_weight = parse(key, value)?,
            "num_envs" => self.num_envs = parse(key, value)?,
            "checkpoint_fractions" => {
                self.checkpoint_fractions = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(MarlError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }
}

fn default_fractions() -> Vec<f64> {
    vec![0.2, 0.5, 0.8, 1.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_values() {
        let nav = TrainConfig::paper(TaskId::Navigation);
        assert_eq!(nav.learning_rate, 0.0003);
        assert_eq!(nav.attention_entropy_weight, 10.0);
        assert_eq!(nav.frames_per_batch, 18000);
        assert_eq!(nav.collector_iterations, 150);
        let pas = TrainConfig::paper(TaskId::Passage);
        assert_eq!(pas.attention_entropy_weight, 50.0);
        assert_eq!(pas.learning_rate, 0.00005);
        let dis = TrainConfig::paper(TaskId::Discovery);
        assert!(dis.normalize_advantage);
        assert_eq!(dis.clip_eps, 0.05);
        assert_eq!(dis.max_grad_norm, 10.0);
    }

    #[test]
    fn desk_halves_iterations() {
        assert_eq!(TrainConfig::desk(TaskId::Navigation).collector_iterations, 100);
        assert_eq!(TrainConfig::desk(TaskId::Passage).collector_iterations, 50);
        assert_eq!(TrainConfig::desk(TaskId::Discovery).collector_iterations, 100);
    }

    #[test]
    fn set_roundtrips_entries() {
        let base = TrainConfig::desk(TaskId::Passage);
        let mut copy = TrainConfig::paper(TaskId::Discovery);
        for (k, v) in base.entries() {
            copy.set(k, &v).unwrap();
        }
        assert_eq!(copy, base);
        assert!(copy.set("learnin_rate", "1").is_err());
        assert!(copy.set("epochs", "many").is_err());
        let mut neg = base.clone();
        neg.attention_entropy_weight = -1.0;
        assert!(matches!(neg.validate(), Err(MarlError::NegativeLambda(_))));
    }
}
