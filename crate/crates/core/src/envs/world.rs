use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{EnvError, TaskConfig, TaskId, MAX_SPAWN_TRIES};
use crate::numcore::Tensor;

pub type Vec2 = [f64; 2];

/// Cross formation used by the passage task; the first five slots are the
/// classic cross, the diagonals only fill in for teams larger than five.
const FORMATION: [Vec2; 9] = [
    [0.0, 0.0],
    [-0.25, 0.0],
    [0.25, 0.0],
    [0.0, 0.25],
    [0.0, -0.25],
    [-0.25, 0.25],
    [0.25, 0.25],
    [-0.25, -0.25],
    [0.25, -0.25],
];
const FORMATION_DEPTH: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    /// per-agent goals; empty for discovery
    pub goals: Vec<Vec2>,
    pub landmark: Option<Vec2>,
    /// centre of the wall gap (passage only)
    pub gap_center: Option<Vec2>,
    pub step_index: usize,
    pub config: TaskConfig,
}

impl WorldState {
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn distance_to_goal(&self, agent: usize) -> f64 {
        dist(self.positions[agent], self.goals[agent])
    }

    pub fn sees_landmark(&self, agent: usize) -> bool {
        self.landmark
            .is_some_and(|l| dist(self.positions[agent], l) <= self.config.sensing_radius)
    }
}

/// Per-step record of what happened during one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub agent_rewards: Vec<f64>,
    /// symmetric `N×N` agent-agent contact matrix (diagonal always false)
    pub agent_collisions: Vec<Vec<bool>>,
    pub object_collisions: Vec<bool>,
    pub at_goal: Vec<bool>,
    pub captured: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub team_reward: f64,
    /// episode over, either by completion or by the step limit
    pub done: bool,
    /// the task was completed on this step
    pub terminated: bool,
    pub log: StepLog,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn uniform_point(rng: &mut ChaCha8Rng, extent: f64) -> Vec2 {
    [rng.random_range(-extent..extent), rng.random_range(-extent..extent)]
}

/// Places `n` points uniformly with pairwise distance above `min_sep`,
/// optionally also keeping them farther than `avoid.1` from `avoid.0`.
fn spawn_points(
    rng: &mut ChaCha8Rng,
    n: usize,
    extent: f64,
    min_sep: f64,
    avoid: Option<(Vec2, f64)>,
    seed: u64,
) -> Result<Vec<Vec2>, EnvError> {
    for _ in 0..MAX_SPAWN_TRIES {
        let pts: Vec<Vec2> = (0..n).map(|_| uniform_point(rng, extent)).collect();
        let separated = (0..n).all(|i| (i + 1..n).all(|j| dist(pts[i], pts[j]) > min_sep));
        let clear = avoid.is_none_or(|(c, r)| pts.iter().all(|&p| dist(p, c) > r));
        if separated && clear {
            return Ok(pts);
        }
    }
    Err(EnvError::SpawnFailed {
        seed,
        tries: MAX_SPAWN_TRIES,
    })
}

pub fn reset(config: &TaskConfig, seed: u64) -> Result<WorldState, EnvError> {
    let n = config.n_agents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = 4.0 * config.agent_radius;
    let extent = config.spawn_extent;
    let mut state = WorldState {
        positions: Vec::new(),
        velocities: vec![[0.0; 2]; n],
        goals: Vec::new(),
        landmark: None,
        gap_center: None,
        step_index: 0,
        config: config.clone(),
    };
    match config.task {
        TaskId::Navigation => {
            state.positions = spawn_points(&mut rng, n, extent, sep, None, seed)?;
            state.goals = spawn_points(&mut rng, n, extent, sep, None, seed)?;
        }
        TaskId::Passage => {
            let gap_x = rng.random_range(-0.5..0.5);
            let center_x = rng.random_range(-0.5..0.5);
            let mut slots: Vec<usize> = if n <= 5 { (0..5).collect() } else { (0..FORMATION.len()).collect() };
            slots.shuffle(&mut rng);
            for &s in &slots[..n] {
                let [dx, dy] = FORMATION[s];
                let start = [center_x + dx, config.wall_y - FORMATION_DEPTH + dy];
                state.positions.push(start);
                state.goals.push([start[0], 2.0 * config.wall_y - start[1]]);
            }
            state.gap_center = Some([gap_x, config.wall_y]);
        }
        TaskId::Discovery => {
            let landmark = uniform_point(&mut rng, extent);
            state.positions = spawn_points(&mut rng, n, extent, sep, Some((landmark, config.sensing_radius)), seed)?;
            state.landmark = Some(landmark);
        }
    }
    Ok(state)
}

/// Observation matrix with one row per agent, in world units.
pub fn observe(state: &WorldState) -> Tensor {
    let n = state.n_agents();
    let d = state.config.obs_dim();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        data.extend_from_slice(&state.positions[i]);
        data.extend_from_slice(&state.velocities[i]);
        match state.config.task {
            TaskId::Navigation => data.extend_from_slice(&state.goals[i]),
            TaskId::Passage => {
                data.extend_from_slice(&state.goals[i]);
                data.extend_from_slice(&state.gap_center.unwrap_or([0.0, 0.0]));
            }
            TaskId::Discovery => data.push(if state.sees_landmark(i) { 1.0 } else { 0.0 }),
        }
    }
    Tensor::new(n, d, data).expect("observation layout")
}

fn hits_wall(cfg: &TaskConfig, gap_x: f64, p: Vec2, prev_y: f64) -> bool {
    let outside_gap = (p[0] - gap_x).abs() > cfg.gap_width / 2.0 - cfg.agent_radius;
    let rel = p[1] - cfg.wall_y;
    let crossed = (prev_y - cfg.wall_y >= 0.0) != (rel >= 0.0);
    outside_gap && (rel.abs() < cfg.agent_radius || crossed)
}

pub fn step(state: &WorldState, actions: &[[f64; 2]]) -> Result<(WorldState, StepOutcome), EnvError> {
    let cfg = &state.config;
    let n = state.n_agents();
    if actions.len() != n {
        return Err(EnvError::ActionCount {
            expected: n,
            found: actions.len(),
        });
    }
    if let Some(agent) = actions.iter().position(|a| !a[0].is_finite() || !a[1].is_finite()) {
        return Err(EnvError::NonFiniteAction { agent });
    }
    let mut next = state.clone();
    let mut object_collisions = vec![false; n];
    for i in 0..n {
        let a = [actions[i][0].clamp(-1.0, 1.0), actions[i][1].clamp(-1.0, 1.0)];
        let mut v = [
            state.velocities[i][0] + a[0] * cfg.a_max * cfg.dt,
            state.velocities[i][1] + a[1] * cfg.a_max * cfg.dt,
        ];
        let speed = v[0].hypot(v[1]);
        if speed > cfg.v_max {
            v = [v[0] * cfg.v_max / speed, v[1] * cfg.v_max / speed];
        }
        let mut p = [
            (state.positions[i][0] + v[0] * cfg.dt).clamp(-cfg.arena, cfg.arena),
            (state.positions[i][1] + v[1] * cfg.dt).clamp(-cfg.arena, cfg.arena),
        ];
        if let Some([gap_x, _]) = state.gap_center {
            let prev_y = state.positions[i][1];
            if hits_wall(cfg, gap_x, p, prev_y) {
                object_collisions[i] = true;
                let side = if prev_y >= cfg.wall_y { 1.0 } else { -1.0 };
                p[1] = cfg.wall_y + side * cfg.agent_radius;
                v[1] = 0.0;
            }
        }
        next.positions[i] = p;
        next.velocities[i] = v;
    }
    next.step_index += 1;

    let mut agent_collisions = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if dist(next.positions[i], next.positions[j]) < 2.0 * cfg.agent_radius {
                agent_collisions[i][j] = true;
                agent_collisions[j][i] = true;
            }
        }
    }

    let mut agent_rewards = vec![0.0; n];
    let mut at_goal = vec![false; n];
    let mut captured = false;
    let team_reward;
    let terminated;
    match cfg.task {
        TaskId::Navigation | TaskId::Passage => {
            for i in 0..n {
                let before = state.distance_to_goal(i);
                let after = next.distance_to_goal(i);
                at_goal[i] = after < cfg.goal_reach_radius;
                let mut r = cfg.progress_coef * (before - after);
                if agent_collisions[i].iter().any(|&c| c) {
                    r -= cfg.agent_collision_penalty;
                }
                if object_collisions[i] {
                    r -= cfg.object_collision_penalty;
                }
                if at_goal[i] {
                    r += cfg.goal_bonus;
                }
                agent_rewards[i] = r;
            }
            team_reward = agent_rewards.iter().sum::<f64>() / n as f64;
            terminated = at_goal.iter().all(|&g| g);
        }
        TaskId::Discovery => {
            let landmark = next.landmark.expect("discovery state has a landmark");
            let close = next
                .positions
                .iter()
                .filter(|&&p| dist(p, landmark) <= cfg.capture_radius)
                .count();
            captured = close >= 2;
            team_reward = if captured { cfg.capture_reward } else { 0.0 };
            agent_rewards.iter_mut().for_each(|r| *r = team_reward);
            terminated = captured;
        }
    }
    let done = terminated || next.step_index >= cfg.max_steps;
    Ok((
        next,
        StepOutcome {
            team_reward,
            done,
            terminated,
            log: StepLog {
                agent_rewards,
                agent_collisions,
                object_collisions,
                at_goal,
                captured,
            },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nav(n: usize) -> TaskConfig {
        TaskConfig::new(TaskId::Navigation, n).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        for task in TaskId::ALL {
            let cfg = TaskConfig::new(task, 4).unwrap();
            assert_eq!(reset(&cfg, 17).unwrap(), reset(&cfg, 17).unwrap());
            assert_ne!(reset(&cfg, 17).unwrap(), reset(&cfg, 18).unwrap());
        }
    }

    #[test]
    fn navigation_schema() {
        let s = reset(&nav(3), 0).unwrap();
        assert_eq!(s.goals.len(), 3);
        assert!(s.landmark.is_none());
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(dist(s.positions[i], s.positions[j]) > 0.2);
            }
        }
    }

    #[test]
    fn discovery_spawns_out_of_sight() {
        let cfg = TaskConfig::new(TaskId::Discovery, 5).unwrap();
        for seed in 0..50 {
            let s = reset(&cfg, seed).unwrap();
            let obs = observe(&s);
            assert!((0..5).all(|i| obs.get(i, 4) == 0.0));
        }
    }

    #[test]
    fn passage_spawns_below_goals_above() {
        let cfg = TaskConfig::new(TaskId::Passage, 5).unwrap();
        let s = reset(&cfg, 3).unwrap();
        assert!(s.positions.iter().all(|p| p[1] < 0.0));
        assert!(s.goals.iter().all(|g| g[1] > 0.0));
        let eight = reset(&cfg.with_agents(8).unwrap(), 3).unwrap();
        assert_eq!(eight.positions.len(), 8);
    }

    #[test]
    fn spawn_failure_names_seed() {
        let mut cfg = nav(8);
        cfg.spawn_extent = 0.05;
        assert_eq!(
            reset(&cfg, 99).unwrap_err(),
            EnvError::SpawnFailed {
                seed: 99,
                tries: MAX_SPAWN_TRIES
            }
        );
    }

    #[test]
    fn team_size_bounds() {
        assert_eq!(TaskConfig::new(TaskId::Navigation, 2).unwrap_err(), EnvError::TeamSize(2));
        assert!(TaskConfig::new(TaskId::Navigation, 9).is_err());
    }

    fn manual_nav() -> WorldState {
        let mut s = reset(&nav(3), 0).unwrap();
        s.positions = vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        s.goals = vec![[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]];
        s
    }

    #[test]
    fn navigation_observation_row() {
        let obs = observe(&manual_nav());
        assert_eq!(obs.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn discovery_observation_bit() {
        let mut s = reset(&TaskConfig::new(TaskId::Discovery, 3).unwrap(), 0).unwrap();
        s.landmark = Some([0.0, 0.0]);
        s.positions = vec![[0.1, 0.0], [1.0, 1.0], [0.0, -0.3]];
        let obs = observe(&s);
        assert_eq!(obs.get(0, 4), 1.0);
        assert_eq!(obs.get(1, 4), 0.0);
        assert_eq!(obs.get(2, 4), 1.0);
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let s = manual_nav();
        let (next, out) = step(&s, &[[0.0, 0.0]; 3]).unwrap();
        assert_eq!(next.positions, s.positions);
        assert_eq!(out.team_reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn progress_reward_equals_distance_gain() {
        let mut s = manual_nav();
        // agent 0 already moving straight at its goal along +y
        s.goals[0] = [0.0, 1.0];
        s.velocities[0] = [0.0, 0.5];
        let (next, out) = step(&s, &[[0.0, 0.0]; 3]).unwrap();
        assert!((next.positions[0][1] - 0.05).abs() < 1e-15);
        assert!((out.log.agent_rewards[0] - 0.05).abs() < 1e-12);
        // moving 0.1 closer yields +0.1 with the default progress coefficient
        let mut s2 = manual_nav();
        s2.goals[0] = [0.0, 1.0];
        s2.config.dt = 0.2;
        s2.velocities[0] = [0.0, 0.5];
        let (_, out2) = step(&s2, &[[0.0, 0.0]; 3]).unwrap();
        assert!((out2.log.agent_rewards[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn discovery_capture_rewards_and_ends() {
        let mut s = reset(&TaskConfig::new(TaskId::Discovery, 3).unwrap(), 1).unwrap();
        s.landmark = Some([0.5, 0.5]);
        s.positions = vec![[0.55, 0.5], [0.45, 0.5], [-1.0, -1.0]];
        let (_, out) = step(&s, &[[0.0, 0.0]; 3]).unwrap();
        assert_eq!(out.team_reward, 1.0);
        assert!(out.done && out.terminated && out.log.captured);
    }

    #[test]
    fn collisions_are_symmetric_and_penalized() {
        let mut s = manual_nav();
        s.positions[1] = [0.05, 0.0];
        let (_, out) = step(&s, &[[0.0, 0.0]; 3]).unwrap();
        assert!(out.log.agent_collisions[0][1] && out.log.agent_collisions[1][0]);
        assert!(!out.log.agent_collisions[0][2]);
        assert_eq!(out.log.agent_rewards[0], -0.5);
    }

    #[test]
    fn wall_blocks_outside_gap() {
        let cfg = TaskConfig::new(TaskId::Passage, 3).unwrap();
        let mut s = reset(&cfg, 0).unwrap();
        s.gap_center = Some([0.0, 0.0]);
        s.positions = vec![[1.0, -0.06], [0.0, -0.06], [-1.0, -1.0]];
        s.velocities = vec![[0.0, 0.5], [0.0, 0.5], [0.0, 0.0]];
        let (next, out) = step(&s, &[[0.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(out.log.object_collisions[0]);
        assert_eq!(next.positions[0][1], -cfg.agent_radius);
        assert!(!out.log.object_collisions[1]);
        assert!(next.positions[1][1] > -0.06);
    }

    #[test]
    fn rejects_nan_action() {
        let s = manual_nav();
        let err = step(&s, &[[0.0, 0.0], [f64::NAN, 0.0], [0.0, 0.0]]).unwrap_err();
        assert_eq!(err, EnvError::NonFiniteAction { agent: 1 });
    }

    #[test]
    fn velocity_is_clamped() {
        let mut s = manual_nav();
        s.velocities[0] = [0.5, 0.0];
        let (next, _) = step(&s, &[[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let v = next.velocities[0];
        assert!((v[0].hypot(v[1]) - 0.5).abs() < 1e-12);
    }
}
