use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{MarlError, TrainConfig};
use crate::envs::{observe, reset, step, task_metrics, EpisodeLog, TaskConfig, TaskMetrics, WorldState};
use crate::nn::{critic_forward, policy_forward_batch, Architecture, Params, Policy, PolicyHead, ACTION_DIM};
use crate::numcore::{Graph, Tensor};
use crate::seeds::derive_seed;

const SQUASH_EPS: f64 = 1e-6;

/// How actions are chosen from the policy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    /// tanh of the mean, used for evaluation and explanation
    Mean,
}

/// On-policy frames from several environments, one env segment after another.
/// A frame is one team timestep; per-agent arrays are agent-major within it.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    /// `frames·n·obs_dim`
    pub obs: Vec<f64>,
    /// `frames·n·2`
    pub pre_squash: Vec<f64>,
    /// log density of the squashed action, `frames·n`
    pub log_probs: Vec<f64>,
    /// `Σ_k ln(1 − tanh²u_k + 1e-6)` per agent, `frames·n`
    pub squash_correction: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// value of the successor state, zero when the step terminated the task
    pub next_values: Vec<f64>,
    pub terminated: Vec<bool>,
    /// advantage recursion is cut after these frames
    pub boundaries: Vec<bool>,
    /// total attention entropy of each frame
    pub attention_entropy: Vec<f64>,
    /// row-stochastic attention of each frame, `frames·n·n`
    pub attention: Vec<f64>,
    /// attention-entropy weight of the config that collected the batch
    pub lambda_attn: f64,
    pub episode_returns: Vec<f64>,
    pub episode_success: Vec<f64>,
}

impl RolloutBatch {
    pub fn frames(&self) -> usize {
        self.rewards.len()
    }

    /// Stacked per-agent observations of the listed frames, `(B·n)×d`.
    pub fn agent_obs(&self, indices: &[usize]) -> Tensor {
        let w = self.n_agents * self.obs_dim;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &t in indices {
            data.extend_from_slice(&self.obs[t * w..(t + 1) * w]);
        }
        Tensor::new(indices.len() * self.n_agents, self.obs_dim, data).expect("consistent rollout layout")
    }

    /// Concatenated team observation of the listed frames, `B×(n·d)`.
    pub fn joint_obs(&self, indices: &[usize]) -> Tensor {
        let w = self.n_agents * self.obs_dim;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &t in indices {
            data.extend_from_slice(&self.obs[t * w..(t + 1) * w]);
        }
        Tensor::new(indices.len(), w, data).expect("consistent rollout layout")
    }

    fn append(&mut self, other: RolloutBatch) {
        self.obs.extend(other.obs);
        self.pre_squash.extend(other.pre_squash);
        self.log_probs.extend(other.log_probs);
        self.squash_correction.extend(other.squash_correction);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.next_values.extend(other.next_values);
        self.terminated.extend(other.terminated);
        self.boundaries.extend(other.boundaries);
        self.attention_entropy.extend(other.attention_entropy);
        self.attention.extend(other.attention);
    }
}

fn stack(rows: &[Tensor]) -> Tensor {
    let cols = rows[0].cols();
    let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(data.len() / cols, cols, data).expect("equal widths")
}

fn flatten(rows: &[Tensor]) -> Tensor {
    let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(rows.len(), data.len() / rows.len(), data).expect("equal sizes")
}

/// Values of a set of team observations.
fn values(params: &Params, arch: &Architecture, obs: &[Tensor]) -> Result<Vec<f64>, MarlError> {
    let g = Graph::inference();
    let bound = params.bind(&g, false);
    let v = critic_forward(&bound, arch, g.constant(flatten(obs)))?;
    Ok(v.value().into_data())
}

/// Pre-squash sample, its squashed action, the log density of the squashed
/// action and the tanh correction, for one agent.
fn sample_action(
    mean: [f64; ACTION_DIM],
    log_std: [f64; ACTION_DIM],
    rng: &mut ChaCha8Rng,
) -> ([f64; ACTION_DIM], [f64; ACTION_DIM], f64, f64) {
    let mut u = [0.0; ACTION_DIM];
    let mut a = [0.0; ACTION_DIM];
    let mut gauss = 0.0;
    let mut corr = 0.0;
    for k in 0..ACTION_DIM {
        let z: f64 = StandardNormal.sample(rng);
        u[k] = mean[k] + log_std[k].exp() * z;
        a[k] = u[k].tanh();
        gauss += -0.5 * z * z - log_std[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        corr += (1.0 - a[k] * a[k] + SQUASH_EPS).ln();
    }
    (u, a, gauss - corr, corr)
}

/// Collects at least `cfg.frames_per_batch` frames from `cfg.num_envs`
/// environments stepped in lockstep. Episodes still running at the end are
/// truncated and bootstrapped from the critic.
pub fn collect_rollouts(
    policy: &Policy,
    task: &TaskConfig,
    cfg: &TrainConfig,
    seed: u64,
    iteration: usize,
) -> Result<RolloutBatch, MarlError> {
    let n = task.n_agents;
    let d = task.obs_dim();
    let envs = cfg.num_envs;
    let horizon = cfg.frames_per_batch.div_ceil(envs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[iteration as u64, 1]));
    let env_seed = |e: usize, k: u64| derive_seed(seed, &[iteration as u64, 2, e as u64, k]);

    let mut states: Vec<WorldState> = Vec::with_capacity(envs);
    let mut episodes = vec![0u64; envs];
    let mut logs: Vec<EpisodeLog> = Vec::with_capacity(envs);
    for e in 0..envs {
        states.push(reset(task, env_seed(e, 0))?);
        logs.push(EpisodeLog::new(n));
    }
    let mut segments: Vec<RolloutBatch> = (0..envs)
        .map(|_| RolloutBatch {
            n_agents: n,
            obs_dim: d,
            ..RolloutBatch::default()
        })
        .collect();
    let mut out = RolloutBatch {
        n_agents: n,
        obs_dim: d,
        lambda_attn: cfg.attention_entropy_weight,
        ..RolloutBatch::default()
    };

    for t in 0..horizon {
        let obs: Vec<Tensor> = states.iter().map(observe).collect();
        let g = Graph::inference();
        let bound = policy.params.bind(&g, false);
        let pv = policy_forward_batch(
            &bound,
            &policy.arch,
            g.constant(stack(&obs)),
            g.constant(Tensor::ones(envs * n, n)),
            n,
        )?;
        let v = critic_forward(&bound, &policy.arch, g.constant(flatten(&obs)))?.value();
        let ent = pv.gat.attention.row_entropy()?.reshape(envs, n)?.sum_cols().value();
        let alpha = pv.gat.attention.value();
        let mean = pv.mean.value();
        let ls = pv.log_std.value();
        let log_std = [ls.data()[0], ls.data()[1]];

        let mut next_obs = Vec::with_capacity(envs);
        let mut outcomes = Vec::with_capacity(envs);
        for e in 0..envs {
            let seg = &mut segments[e];
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let r = e * n + i;
                let (u, a, lp, corr) = sample_action([mean.get(r, 0), mean.get(r, 1)], log_std, &mut rng);
                seg.pre_squash.extend_from_slice(&u);
                seg.log_probs.push(lp);
                seg.squash_correction.push(corr);
                actions.push(a);
            }
            seg.obs.extend_from_slice(obs[e].data());
            seg.values.push(v.data()[e]);
            seg.attention_entropy.push(ent.data()[e]);
            seg.attention.extend_from_slice(&alpha.data()[e * n * n..(e + 1) * n * n]);
            let (next, outcome) = step(&states[e], &actions)?;
            seg.rewards.push(outcome.team_reward);
            seg.terminated.push(outcome.terminated);
            seg.boundaries.push(outcome.done || t + 1 == horizon);
            next_obs.push(observe(&next));
            outcomes.push(outcome);
            states[e] = next;
        }
        let next_v = values(&policy.params, &policy.arch, &next_obs)?;
        for e in 0..envs {
            let outcome = &outcomes[e];
            segments[e]
                .next_values
                .push(if outcome.terminated { 0.0 } else { next_v[e] });
            logs[e].record(outcome);
            if outcome.done {
                let m = task_metrics(&logs[e], task);
                out.episode_returns.push(m.reward);
                out.episode_success.push(m.success_rate);
                episodes[e] += 1;
                states[e] = reset(task, env_seed(e, episodes[e]))?;
                logs[e] = EpisodeLog::new(n);
            }
        }
    }
    for seg in segments {
        out.append(seg);
    }
    Ok(out)
}

/// One evaluation or explanation episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub log: EpisodeLog,
    pub metrics: TaskMetrics,
    /// observation at every decision step
    pub observations: Vec<Tensor>,
    /// attention matrix at every decision step
    pub attention: Vec<Tensor>,
    pub heads: Vec<PolicyHead>,
}

/// Runs one episode to completion. Works for any team size, since only the
/// shared per-agent policy is used.
pub fn run_episode(policy: &Policy, task: &TaskConfig, seed: u64, mode: ActionMode) -> Result<EpisodeResult, MarlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
    let mut state = reset(task, seed)?;
    let mut log = EpisodeLog::new(task.n_agents);
    let mut observations = Vec::new();
    let mut attention = Vec::new();
    let mut heads = Vec::new();
    loop {
        let obs = observe(&state);
        let (head, gat) = policy.forward(&obs, None)?;
        let actions: Vec<[f64; ACTION_DIM]> = match mode {
            ActionMode::Mean => head.mean_action(),
            ActionMode::Sample => (0..task.n_agents)
                .map(|i| sample_action([head.mean.get(i, 0), head.mean.get(i, 1)], head.log_std, &mut rng).1)
                .collect(),
        };
        let (next, outcome) = step(&state, &actions)?;
        log.record(&outcome);
        observations.push(obs);
        attention.push(gat.attention);
        heads.push(head);
        state = next;
        if outcome.done {
            break;
        }
    }
    let metrics = task_metrics(&log, task);
    Ok(EpisodeResult {
        log,
        metrics,
        observations,
        attention,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskId;

    fn small_cfg(task: TaskId) -> TrainConfig {
        TrainConfig {
            frames_per_batch: 60,
            num_envs: 3,
            ..TrainConfig::desk(task)
        }
    }

    #[test]
    fn layout_and_bootstrap() {
        let task = TaskConfig::new(TaskId::Navigation, 3).unwrap();
        let policy = Policy::init(TaskId::Navigation, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let b = collect_rollouts(&policy, &task, &small_cfg(TaskId::Navigation), 5, 0).unwrap();
        assert_eq!(b.frames(), 60);
        assert_eq!(b.obs.len(), 60 * 3 * 6);
        assert_eq!(b.pre_squash.len(), 60 * 3 * 2);
        assert_eq!(b.log_probs.len(), 60 * 3);
        // each env segment ends on a boundary
        assert_eq!(b.boundaries.iter().filter(|&&x| x).count(), 3);
        assert!(b.boundaries[19] && b.boundaries[39] && b.boundaries[59]);
        // the successor of a non-final frame is the next frame
        let next = values(&policy.params, &policy.arch, &[b.joint_obs(&[1])]).unwrap()[0];
        assert!((b.next_values[0] - next).abs() < 1e-12);
        assert!((b.values[1] - next).abs() < 1e-12);
        assert_eq!(b.joint_obs(&[2, 4]).shape(), [2, 18]);
        assert_eq!(b.agent_obs(&[2, 4]).shape(), [6, 6]);
        assert_eq!(b.lambda_attn, small_cfg(TaskId::Navigation).attention_entropy_weight);
        assert_eq!(b.attention.len(), 60 * 9);
        for row in b.attention.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let task = TaskConfig::new(TaskId::Discovery, 4).unwrap();
        let policy = Policy::init(TaskId::Discovery, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = small_cfg(TaskId::Discovery);
        let a = collect_rollouts(&policy, &task, &cfg, 9, 2).unwrap();
        let b = collect_rollouts(&policy, &task, &cfg, 9, 2).unwrap();
        assert_eq!(a.pre_squash, b.pre_squash);
        assert_eq!(a.rewards, b.rewards);
        let c = collect_rollouts(&policy, &task, &cfg, 9, 3).unwrap();
        assert_ne!(a.pre_squash, c.pre_squash);
    }

    #[test]
    fn stored_log_prob_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, a, lp, corr) = sample_action([0.2, -0.4], [-0.5, 0.1], &mut rng);
        let g = Graph::new();
        let x = g.constant(Tensor::row_vector(&u));
        let m = g.constant(Tensor::row_vector(&[0.2, -0.4]));
        let ls = g.constant(Tensor::row_vector(&[-0.5, 0.1]));
        let gauss = super::super::gaussian_log_prob(x, m, ls).unwrap().item();
        assert!((lp - (gauss - corr)).abs() < 1e-12);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_shot_episode_runs_on_larger_team() {
        let policy = Policy::init(TaskId::Navigation, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let mut task = TaskConfig::new(TaskId::Navigation, 5).unwrap();
        task.max_steps = 12;
        let r = run_episode(&policy, &task, 11, ActionMode::Mean).unwrap();
        assert_eq!(r.observations.len(), r.log.steps());
        assert_eq!(r.attention[0].shape(), [5, 5]);
        let again = run_episode(&policy, &task, 11, ActionMode::Mean).unwrap();
        assert_eq!(r.log, again.log);
    }
}
