use std::collections::BTreeSet;

use super::HarnessError;
use crate::envs::{TaskConfig, TaskId};
use crate::explainers::ExplainerConfig;
use crate::marl::{Profile, TrainConfig};

/// Everything a run needs, parsed from a flat `key=value` document.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub seed: u64,
    pub profile: Profile,
    pub train: TrainConfig,
    pub explainer: ExplainerConfig,
}

const BASE_KEYS: [&str; 5] = ["task", "n_agents", "seed", "profile", "lambda_attn"];

impl RunConfig {
    pub fn new(task: TaskId, n_agents: usize, seed: u64, profile: Profile) -> Result<Self, HarnessError> {
        Ok(Self {
            task: TaskConfig::new(task, n_agents)?,
            seed,
            profile,
            train: TrainConfig::for_profile(task, profile),
            explainer: ExplainerConfig::default(),
        })
    }

    /// Parses `key=value` lines; `#` starts a comment. `task` is required and
    /// every other key overrides a default. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !seen.insert(k.clone()) {
                return Err(HarnessError::Config(format!("line {}: key '{k}' given twice", lineno + 1)));
            }
            pairs.push((k, v));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, HarnessError> {
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let task: TaskId = get("task")
            .ok_or_else(|| HarnessError::Config("missing required key 'task'".into()))?
            .parse()?;
        let n_agents = match get("n_agents") {
            Some(v) => v.parse().map_err(|_| HarnessError::Config(format!("cannot parse n_agents '{v}'")))?,
            None => 3,
        };
        let seed = match get("seed") {
            Some(v) => v.parse().map_err(|_| HarnessError::Config(format!("cannot parse seed '{v}'")))?,
            None => 0,
        };
        let profile = match get("profile") {
            Some(v) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::new(task, n_agents, seed, profile)?;
        if let Some(v) = get("lambda_attn") {
            cfg.train.set("lambda_attn", v)?;
        }
        for (k, v) in pairs {
            cfg.apply(k, v)?;
        }
        cfg.train.validate()?;
        cfg.explainer.validate()?;
        Ok(cfg)
    }

    /// Applies one override on top of the current values.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        if BASE_KEYS.contains(&key) {
            if key == "lambda_attn" {
                self.train.set(key, value)?;
            }
            return Ok(());
        }
        if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)?;
            return Ok(());
        }
        if self.explainer.set(key, value)? || self.task.set(key, value)? {
            return Ok(());
        }
        Err(HarnessError::Config(format!("unknown key '{key}'")))
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "task={}\nn_agents={}\nseed={}\nprofile={}\n",
            self.task.task, self.task.n_agents, self.seed, self.profile
        );
        for (k, v) in self.train.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in self.explainer.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in self.task.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn regularized(&self) -> bool {
        self.train.attention_entropy_weight > 0.0
    }
}
