//! Fidelity and graph-explanation-faithfulness metrics, and the rollout
//! pipeline that scores an explainer over many timesteps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{TaskConfig, TaskId};
use crate::explainers::{explain, EdgeMask, ExplainError, ExplainerConfig, ExplainerKind};
use crate::marl::{run_episode, ActionMode, MarlError};
use crate::nn::{NnError, Policy, PolicyHead};
use crate::seeds::derive_seed;
use crate::stats::{summarize, Summary};

/// How `|F(G) − F(G')|` is realized; written into every report.
pub const FIDELITY_DEFINITION: &str = "mean-abs-pre-squash-means";

pub const CSV_HEADER: &str = "task,n_agents,regularized,explainer,episode,t,fid_plus,fid_minus,fid_delta,gef";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("heads differ in shape: {0:?} vs {1:?}")]
    Shape([usize; 2], [usize; 2]),
    #[error("heads have different log-std: {0:?} vs {1:?}")]
    Sigma([f64; 2], [f64; 2]),
    #[error("mask is {found:?} but the team has {n} agents")]
    MaskShape { n: usize, found: [usize; 2] },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Marl(#[from] MarlError),
}

/// Mean absolute difference of the pre-squash means.
pub fn model_output_distance(a: &PolicyHead, b: &PolicyHead) -> Result<f64, MetricError> {
    if a.mean.shape() != b.mean.shape() {
        return Err(MetricError::Shape(a.mean.shape(), b.mean.shape()));
    }
    let n = a.mean.len().max(1) as f64;
    Ok(a.mean.data().iter().zip(b.mean.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `Σ (μ_a − μ_b)² / 2σ²` over agents and action dimensions.
pub fn gaussian_kl(a: &PolicyHead, b: &PolicyHead) -> Result<f64, MetricError> {
    if a.mean.shape() != b.mean.shape() {
        return Err(MetricError::Shape(a.mean.shape(), b.mean.shape()));
    }
    if a.log_std != b.log_std {
        return Err(MetricError::Sigma(a.log_std, b.log_std));
    }
    Ok(crate::explainers::head_kl(a, b))
}

/// `1 − exp(−KL)`.
pub fn gef_from_kl(kl: f64) -> f64 {
    -(-kl).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub fid_plus: f64,
    pub fid_minus: f64,
    pub fid_delta: f64,
}

fn check_mask(obs_rows: usize, mask: &EdgeMask) -> Result<(), MetricError> {
    if mask.values.shape() != [obs_rows, obs_rows] {
        return Err(MetricError::MaskShape {
            n: obs_rows,
            found: mask.values.shape(),
        });
    }
    Ok(())
}

fn fidelity_from(full: &PolicyHead, kept: &PolicyHead, removed: &PolicyHead) -> Result<Fidelity, MetricError> {
    let fid_plus = model_output_distance(full, removed)?;
    let fid_minus = model_output_distance(full, kept)?;
    Ok(Fidelity {
        fid_plus,
        fid_minus,
        fid_delta: fid_plus - fid_minus,
    })
}

/// Necessity (`G \ G_S`), sufficiency (`G_S`) and their difference.
pub fn fidelity_suite(policy: &Policy, obs: &crate::numcore::Tensor, mask: &EdgeMask) -> Result<Fidelity, MetricError> {
    check_mask(obs.rows(), mask)?;
    let full = policy.head(obs, None)?;
    let kept = policy.head(obs, Some(&mask.values))?;
    let removed = policy.head(obs, Some(&mask.complement()))?;
    fidelity_from(&full, &kept, &removed)
}

pub fn gef(policy: &Policy, obs: &crate::numcore::Tensor, mask: &EdgeMask) -> Result<f64, MetricError> {
    check_mask(obs.rows(), mask)?;
    let full = policy.head(obs, None)?;
    let kept = policy.head(obs, Some(&mask.values))?;
    Ok(gef_from_kl(gaussian_kl(&full, &kept)?))
}

/// One scored timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub task: TaskId,
    pub n_agents: usize,
    pub regularized: bool,
    pub explainer: String,
    pub episode: usize,
    pub t: usize,
    pub fid_plus: f64,
    pub fid_minus: f64,
    pub fid_delta: f64,
    pub gef: f64,
}

impl ExplanationRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.n_agents,
            self.regularized,
            self.explainer,
            self.episode,
            self.t,
            self.fid_plus,
            self.fid_minus,
            self.fid_delta,
            self.gef
        )
    }
}

/// Summaries of each metric over the successful records of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: TaskId,
    pub n_agents: usize,
    pub regularized: bool,
    pub explainer: String,
    pub n: usize,
    pub failures: usize,
    pub fid_plus: Option<Summary>,
    pub fid_minus: Option<Summary>,
    pub fid_delta: Option<Summary>,
    pub gef: Option<Summary>,
}

/// Groups records by `(task, n_agents, regularized, explainer)` and summarizes
/// each group; failure counts are looked up by the same key.
pub fn aggregate(records: &[ExplanationRecord], failures: &BTreeMap<(String, usize, bool, String), usize>) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, usize, bool, String), Vec<&ExplanationRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.task.to_string(), r.n_agents, r.regularized, r.explainer.clone()))
            .or_default()
            .push(r);
    }
    for key in failures.keys() {
        groups.entry(key.clone()).or_default();
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let col = |f: fn(&ExplanationRecord) -> f64| summarize(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                task: key.0.parse().expect("task names roundtrip"),
                n_agents: key.1,
                regularized: key.2,
                explainer: key.3.clone(),
                n: rs.len(),
                failures: failures.get(&key).copied().unwrap_or(0),
                fid_plus: col(|r| r.fid_plus),
                fid_minus: col(|r| r.fid_minus),
                fid_delta: col(|r| r.fid_delta),
                gef: col(|r| r.gef),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub episode: usize,
    pub t: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<ExplanationRecord>,
    pub failures: Vec<FailureRecord>,
    pub aggregate: Aggregate,
}

/// Scores an arbitrary mask function over `episodes` deterministic rollouts.
/// Timesteps are explained in parallel; output order is always (episode, t).
pub fn evaluate_with<F>(
    policy: &Policy,
    task: &TaskConfig,
    label: &str,
    regularized: bool,
    episodes: usize,
    seed: u64,
    explain_fn: F,
) -> Result<Evaluation, MetricError>
where
    F: Fn(&Policy, &crate::numcore::Tensor) -> Result<EdgeMask, ExplainError> + Sync,
{
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for episode in 0..episodes {
        let run = run_episode(policy, task, derive_seed(seed, &[episode as u64]), ActionMode::Mean)?;
        let scored: Vec<Result<ExplanationRecord, String>> = run
            .observations
            .par_iter()
            .zip(run.heads.par_iter())
            .enumerate()
            .map(|(t, (obs, full))| {
                let mask = explain_fn(policy, obs).map_err(|e| e.to_string())?;
                check_mask(obs.rows(), &mask).map_err(|e| e.to_string())?;
                let kept = policy.head(obs, Some(&mask.values)).map_err(|e| e.to_string())?;
                let removed = policy.head(obs, Some(&mask.complement())).map_err(|e| e.to_string())?;
                let fid = fidelity_from(full, &kept, &removed).map_err(|e| e.to_string())?;
                let kl = gaussian_kl(full, &kept).map_err(|e| e.to_string())?;
                Ok(ExplanationRecord {
                    task: task.task,
                    n_agents: task.n_agents,
                    regularized,
                    explainer: label.to_string(),
                    episode,
                    t,
                    fid_plus: fid.fid_plus,
                    fid_minus: fid.fid_minus,
                    fid_delta: fid.fid_delta,
                    gef: gef_from_kl(kl),
                })
            })
            .collect();
        for (t, s) in scored.into_iter().enumerate() {
            match s {
                Ok(r) => records.push(r),
                Err(message) => failures.push(FailureRecord { episode, t, message }),
            }
        }
    }
    let key = (task.task.to_string(), task.n_agents, regularized, label.to_string());
    let counts = BTreeMap::from([(key, failures.len())]);
    let aggregate = aggregate(&records, &counts).into_iter().next().expect("one group");
    Ok(Evaluation {
        records,
        failures,
        aggregate,
    })
}

/// Scores one of the built-in explainers.
pub fn evaluate_explainer(
    policy: &Policy,
    task: &TaskConfig,
    kind: ExplainerKind,
    cfg: &ExplainerConfig,
    regularized: bool,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, MetricError> {
    evaluate_with(policy, task, kind.as_str(), regularized, episodes, seed, |p, obs| explain(kind, p, obs, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{observe, reset};
    use crate::explainers::MaskKind;
    use crate::numcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(mean: &[[f64; 2]], log_std: [f64; 2]) -> PolicyHead {
        PolicyHead {
            mean: Tensor::from_rows(mean).unwrap(),
            log_std,
        }
    }

    #[test]
    fn distance_examples() {
        let a = head(&[[0.0, 0.0]], [0.0; 2]);
        assert_eq!(model_output_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(model_output_distance(&a, &head(&[[1.0, -1.0]], [0.0; 2])).unwrap(), 1.0);
        let b = head(&[[0.3, 0.2], [0.0, -1.0]], [0.0; 2]);
        let c = head(&[[1.3, 1.2], [1.0, 0.0]], [0.0; 2]);
        assert!((model_output_distance(&b, &c).unwrap() - 1.0).abs() < 1e-15);
        assert!(model_output_distance(&a, &b).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = head(&[[0.0, 0.0]], [0.0; 2]);
        assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
        let b = head(&[[1.0, 0.0]], [0.0; 2]);
        assert!((gaussian_kl(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let half = 0.5f64.ln();
        let a2 = head(&[[0.0, 0.0]], [half; 2]);
        let b2 = head(&[[1.0, 0.0]], [half; 2]);
        assert!((gaussian_kl(&a2, &b2).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(gaussian_kl(&a, &a2), Err(MetricError::Sigma(..))));
    }

    #[test]
    fn gef_examples() {
        assert_eq!(gef_from_kl(0.0), 0.0);
        assert!((gef_from_kl(2f64.ln()) - 0.5).abs() < 1e-15);
        assert!(gef_from_kl(30.0) < 1.0 && gef_from_kl(30.0) > 0.999);
    }

    fn setup() -> (Policy, Tensor) {
        let policy = Policy::init(TaskId::Navigation, 3, &mut ChaCha8Rng::seed_from_u64(8));
        let obs = observe(&reset(&TaskConfig::new(TaskId::Navigation, 3).unwrap(), 8).unwrap());
        (policy, obs)
    }

    fn mask(values: Tensor) -> EdgeMask {
        EdgeMask {
            values,
            kind: MaskKind::Soft,
            source: ExplainerKind::Attention,
        }
    }

    #[test]
    fn identity_and_complement_masks() {
        let (policy, obs) = setup();
        let ones = fidelity_suite(&policy, &obs, &mask(Tensor::ones(3, 3))).unwrap();
        assert_eq!(ones.fid_minus, 0.0);
        assert_eq!(ones.fid_delta, ones.fid_plus);
        assert_eq!(gef(&policy, &obs, &mask(Tensor::ones(3, 3))).unwrap(), 0.0);
        let zeros = fidelity_suite(&policy, &obs, &mask(Tensor::zeros(3, 3))).unwrap();
        assert_eq!(zeros.fid_plus, 0.0);
        assert_eq!(zeros.fid_delta, -zeros.fid_minus);
    }

    #[test]
    fn complement_swaps_fidelities() {
        // dyadic entries keep 1 − (1 − m) = m exact
        let (policy, obs) = setup();
        let m = Tensor::from_rows(&[[0.25, 0.5, 1.0], [0.0, 0.75, 0.125], [0.5, 0.5, 0.375]]).unwrap();
        let a = fidelity_suite(&policy, &obs, &mask(m.clone())).unwrap();
        let b = fidelity_suite(&policy, &obs, &mask(m.map(|x| 1.0 - x))).unwrap();
        assert_eq!(a.fid_plus, b.fid_minus);
        assert_eq!(a.fid_minus, b.fid_plus);
    }

    #[test]
    fn pipeline_is_deterministic_and_bounded() {
        let (policy, _) = setup();
        let mut task = TaskConfig::new(TaskId::Navigation, 3).unwrap();
        task.max_steps = 15;
        let cfg = ExplainerConfig::default();
        let a = evaluate_explainer(&policy, &task, ExplainerKind::GraphMask, &cfg, false, 2, 4).unwrap();
        let b = evaluate_explainer(&policy, &task, ExplainerKind::GraphMask, &cfg, false, 2, 4).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.len() <= 30);
        for r in &a.records {
            assert_eq!(r.fid_delta, r.fid_plus - r.fid_minus);
            assert!((0.0..1.0).contains(&r.gef));
        }
        let ident = evaluate_with(&policy, &task, "identity", false, 2, 4, |_, o| {
            Ok(EdgeMask::full(o.rows(), ExplainerKind::Attention))
        })
        .unwrap();
        let agg = ident.aggregate;
        assert!(agg.fid_minus.unwrap().max.abs() < 1e-9);
        assert!(agg.gef.unwrap().max.abs() < 1e-9);
    }

    #[test]
    fn failures_are_counted_not_aggregated() {
        let (policy, _) = setup();
        let mut task = TaskConfig::new(TaskId::Navigation, 3).unwrap();
        task.max_steps = 6;
        let ev = evaluate_with(&policy, &task, "broken", true, 1, 0, |_, _| {
            Ok(EdgeMask::full(2, ExplainerKind::Attention))
        })
        .unwrap();
        assert_eq!(ev.records.len(), 0);
        assert_eq!(ev.aggregate.failures, ev.failures.len());
        assert_eq!(ev.aggregate.n, 0);
        assert!(ev.aggregate.gef.is_none());
    }

    #[test]
    fn aggregate_mean_is_linear() {
        let rec = |v: f64, e: usize| ExplanationRecord {
            task: TaskId::Navigation,
            n_agents: 3,
            regularized: false,
            explainer: "x".into(),
            episode: e,
            t: 0,
            fid_plus: v,
            fid_minus: 0.0,
            fid_delta: v,
            gef: 0.0,
        };
        let a: Vec<_> = [0.1, 0.4, 0.7].iter().map(|&v| rec(v, 0)).collect();
        let b: Vec<_> = [1.0, 2.5].iter().map(|&v| rec(v, 1)).collect();
        let both: Vec<_> = a.iter().chain(&b).cloned().collect();
        let none = BTreeMap::new();
        let ma = aggregate(&a, &none)[0].fid_plus.unwrap().mean;
        let mb = aggregate(&b, &none)[0].fid_plus.unwrap().mean;
        let mab = aggregate(&both, &none)[0].fid_plus.unwrap().mean;
        assert!((mab - (3.0 * ma + 2.0 * mb) / 5.0).abs() < 1e-12);
    }
}
