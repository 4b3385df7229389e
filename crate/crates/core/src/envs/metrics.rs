use serde::{Deserialize, Serialize};

use super::{StepOutcome, TaskConfig, TaskId};

/// Everything the task-performance metrics need from one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub rewards: Vec<f64>,
    pub agent_collision: Vec<bool>,
    pub object_collision: Vec<bool>,
    /// first step (1-based) at which each agent was inside its goal radius
    pub goal_reach_times: Vec<Option<usize>>,
    pub discovery_time: Option<usize>,
    pub completion_step: Option<usize>,
}

impl EpisodeLog {
    pub fn new(n_agents: usize) -> Self {
        Self {
            goal_reach_times: vec![None; n_agents],
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn record(&mut self, outcome: &StepOutcome) {
        self.rewards.push(outcome.team_reward);
        let step = self.rewards.len();
        let log = &outcome.log;
        self.agent_collision
            .push(log.agent_collisions.iter().flatten().any(|&c| c));
        self.object_collision.push(log.object_collisions.iter().any(|&c| c));
        for (t, &g) in self.goal_reach_times.iter_mut().zip(&log.at_goal) {
            if g && t.is_none() {
                *t = Some(step);
            }
        }
        if log.captured && self.discovery_time.is_none() {
            self.discovery_time = Some(step);
        }
        if outcome.terminated && self.completion_step.is_none() {
            self.completion_step = Some(step);
        }
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub reward: f64,
    pub success_rate: f64,
    /// 1 when the episode had no agent-agent contact
    pub no_agent_coll: f64,
    /// passage only
    pub no_object_coll: Option<f64>,
    pub makespan: usize,
}

pub fn task_metrics(log: &EpisodeLog, config: &TaskConfig) -> TaskMetrics {
    let success_rate = match config.task {
        TaskId::Navigation | TaskId::Passage => {
            let n = log.goal_reach_times.len().max(1);
            log.goal_reach_times.iter().filter(|t| t.is_some()).count() as f64 / n as f64
        }
        TaskId::Discovery => f64::from(u8::from(log.discovery_time.is_some())),
    };
    let no_agent_coll = f64::from(u8::from(!log.agent_collision.iter().any(|&c| c)));
    let no_object_coll = (config.task == TaskId::Passage)
        .then(|| f64::from(u8::from(!log.object_collision.iter().any(|&c| c))));
    TaskMetrics {
        reward: log.episode_return(),
        success_rate,
        no_agent_coll,
        no_object_coll,
        makespan: log.completion_step.unwrap_or(config.max_steps),
    }
}
