//! Deterministic 2D versions of the three coordination tasks.
//!
//! Agents are discs driven by a double integrator with a speed limit. Each
//! task only differs in how it spawns the team, what an agent observes and
//! how the team is rewarded.

mod metrics;
mod world;

pub use metrics::{task_metrics, EpisodeLog, TaskMetrics};
pub use world::{observe, reset, step, StepLog, StepOutcome, WorldState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("team size {0} outside the supported range 3..=8")]
    TeamSize(usize),
    #[error("spawn rejection sampling exceeded {tries} tries for seed {seed}")]
    SpawnFailed { seed: u64, tries: usize },
    #[error("action for agent {agent} is not finite")]
    NonFiniteAction { agent: usize },
    #[error("expected {expected} actions, got {found}")]
    ActionCount { expected: usize, found: usize },
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("cannot parse '{value}' for key '{key}'")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Navigation,
    Passage,
    Discovery,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Navigation, TaskId::Passage, TaskId::Discovery];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Navigation => "navigation",
            TaskId::Passage => "passage",
            TaskId::Discovery => "discovery",
        }
    }

    /// Width of one agent's observation row.
    pub fn obs_dim(&self) -> usize {
        match self {
            TaskId::Navigation => 6,
            TaskId::Passage => 8,
            TaskId::Discovery => 5,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "navigation" => Ok(TaskId::Navigation),
            "passage" => Ok(TaskId::Passage),
            "discovery" => Ok(TaskId::Discovery),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

pub const MIN_AGENTS: usize = 3;
pub const MAX_AGENTS: usize = 8;
/// Rejection-sampling budget for spawn placement.
pub const MAX_SPAWN_TRIES: usize = 1000;

/// Geometry, dynamics and reward constants of one task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskId,
    pub n_agents: usize,
    pub agent_radius: f64,
    pub dt: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub max_steps: usize,
    /// positions are clamped to `[-arena, arena]²`
    pub arena: f64,
    /// spawn and goal coordinates are drawn from `[-spawn_extent, spawn_extent]²`
    pub spawn_extent: f64,
    pub goal_reach_radius: f64,
    pub wall_y: f64,
    pub gap_width: f64,
    pub sensing_radius: f64,
    pub capture_radius: f64,
    pub progress_coef: f64,
    pub agent_collision_penalty: f64,
    pub object_collision_penalty: f64,
    pub goal_bonus: f64,
    pub capture_reward: f64,
}

impl TaskConfig {
    pub fn new(task: TaskId, n_agents: usize) -> Result<Self, EnvError> {
        if !(MIN_AGENTS..=MAX_AGENTS).contains(&n_agents) {
            return Err(EnvError::TeamSize(n_agents));
        }
        let max_steps = match task {
            TaskId::Navigation => 400,
            TaskId::Passage | TaskId::Discovery => 500,
        };
        Ok(Self {
            task,
            n_agents,
            agent_radius: 0.05,
            dt: 0.1,
            a_max: 1.0,
            v_max: 0.5,
            max_steps,
            arena: 1.5,
            spawn_extent: 1.0,
            goal_reach_radius: 0.1,
            wall_y: 0.0,
            gap_width: 0.3,
            sensing_radius: 0.3,
            capture_radius: 0.15,
            progress_coef: 1.0,
            agent_collision_penalty: 0.5,
            object_collision_penalty: 0.5,
            goal_bonus: 0.05,
            capture_reward: 1.0,
        })
    }

    /// Same task geometry with a different team size.
    pub fn with_agents(&self, n_agents: usize) -> Result<Self, EnvError> {
        if !(MIN_AGENTS..=MAX_AGENTS).contains(&n_agents) {
            return Err(EnvError::TeamSize(n_agents));
        }
        Ok(Self {
            n_agents,
            ..self.clone()
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    /// Named constants as `key=value` pairs, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("agent_radius", self.agent_radius.to_string()),
            ("dt", self.dt.to_string()),
            ("a_max", self.a_max.to_string()),
            ("v_max", self.v_max.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("arena", self.arena.to_string()),
            ("spawn_extent", self.spawn_extent.to_string()),
            ("goal_reach_radius", self.goal_reach_radius.to_string()),
            ("wall_y", self.wall_y.to_string()),
            ("gap_width", self.gap_width.to_string()),
            ("sensing_radius", self.sensing_radius.to_string()),
            ("capture_radius", self.capture_radius.to_string()),
            ("progress_coef", self.progress_coef.to_string()),
            ("agent_collision_penalty", self.agent_collision_penalty.to_string()),
            ("object_collision_penalty", self.object_collision_penalty.to_string()),
            ("goal_bonus", self.goal_bonus.to_string()),
            ("capture_reward", self.capture_reward.to_string()),
        ]
    }

    /// Overrides one constant; `Ok(false)` when the key is not an env constant.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, EnvError> {
        let bad = || EnvError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        if key == "max_steps" {
            self.max_steps = value.trim().parse().map_err(|_| bad())?;
            return Ok(true);
        }
        let slot = match key {
            "agent_radius" => &mut self.agent_radius,
            "dt" => &mut self.dt,
            "a_max" => &mut self.a_max,
            "v_max" => &mut self.v_max,
            "arena" => &mut self.arena,
            "spawn_extent" => &mut self.spawn_extent,
            "goal_reach_radius" => &mut self.goal_reach_radius,
            "wall_y" => &mut self.wall_y,
            "gap_width" => &mut self.gap_width,
            "sensing_radius" => &mut self.sensing_radius,
            "capture_radius" => &mut self.capture_radius,
            "progress_coef" => &mut self.progress_coef,
            "agent_collision_penalty" => &mut self.agent_collision_penalty,
            "object_collision_penalty" => &mut self.object_collision_penalty,
            "goal_bonus" => &mut self.goal_bonus,
            "capture_reward" => &mut self.capture_reward,
            _ => return Ok(false),
        };
        *slot = value.trim().parse().map_err(|_| bad())?;
        Ok(true)
    }
}
