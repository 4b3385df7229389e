//! Post-hoc edge explainers: raw attention, GNNExplainer-style mask
//! optimization, and a greedy GraphMask search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marl::Adam;
use crate::nn::{policy_forward_batch, NnError, Params, Policy, PolicyHead};
use crate::numcore::{Graph, NumError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("explainer objective became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("invalid explainer config: {0}")]
    Config(String),
    #[error("unknown explainer '{0}'")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    Attention,
    GnnExplainer,
    GraphMask,
}

impl ExplainerKind {
    pub const ALL: [ExplainerKind; 3] = [ExplainerKind::Attention, ExplainerKind::GnnExplainer, ExplainerKind::GraphMask];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExplainerKind::Attention => "attention",
            ExplainerKind::GnnExplainer => "gnnexplainer",
            ExplainerKind::GraphMask => "graphmask",
        }
    }
}

impl fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplainerKind {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ExplainError::Unknown(s.to_string()))
    }
}

/// An edge subset `G_S`, possibly soft.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    /// `N×N`, entries in `[0, 1]`
    pub values: Tensor,
    pub kind: MaskKind,
    pub source: ExplainerKind,
}

impl EdgeMask {
    /// `1 − mask`, the complement graph `G \ G_S`.
    pub fn complement(&self) -> Tensor {
        self.values.map(|x| 1.0 - x)
    }

    pub fn full(n: usize, source: ExplainerKind) -> Self {
        Self {
            values: Tensor::ones(n, n),
            kind: MaskKind::Hard,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    /// GraphMask divergence threshold in nats
    pub beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub size_weight: f64,
    pub mask_entropy_weight: f64,
    /// how many times GNNExplainer may restart with a halved learning rate
    pub max_retries: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            steps: 200,
            learning_rate: 0.05,
            size_weight: 0.005,
            mask_entropy_weight: 0.1,
            max_retries: 4,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        let bad = |m: &str| Err(ExplainError::Config(m.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.size_weight >= 0.0 && self.mask_entropy_weight >= 0.0) {
            return bad("regularizer weights must be non-negative");
        }
        Ok(())
    }

    /// Applies one `key=value` override; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ExplainError> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| ExplainError::Config(format!("cannot parse '{v}' for key '{key}'")))
        };
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| ExplainError::Config(format!("cannot parse '{v}' for key '{key}'")))
        };
        match key {
            "beta" => self.beta = num(value)?,
            "explainer_steps" => self.steps = int(value)?,
            "explainer_lr" => self.learning_rate = num(value)?,
            "size_weight" => self.size_weight = num(value)?,
            "mask_entropy_weight" => self.mask_entropy_weight = num(value)?,
            "explainer_retries" => self.max_retries = int(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beta", self.beta.to_string()),
            ("explainer_steps", self.steps.to_string()),
            ("explainer_lr", self.learning_rate.to_string()),
            ("size_weight", self.size_weight.to_string()),
            ("mask_entropy_weight", self.mask_entropy_weight.to_string()),
            ("explainer_retries", self.max_retries.to_string()),
        ]
    }
}

/// KL between two Gaussian heads that share one σ.
pub(crate) fn head_kl(a: &PolicyHead, b: &PolicyHead) -> f64 {
    let inv = a.log_std.map(|l| 1.0 / (2.0 * (2.0 * l).exp()));
    a.mean
        .data()
        .iter()
        .zip(b.mean.data())
        .enumerate()
        .map(|(k, (x, y))| (x - y).powi(2) * inv[k % inv.len()])
        .sum()
}

/// The attention matrix of the unmasked forward pass.
pub fn explain_attention(policy: &Policy, obs: &Tensor) -> Result<EdgeMask, ExplainError> {
    let (_, gat) = policy.forward(obs, None)?;
    Ok(EdgeMask {
        values: gat.attention,
        kind: MaskKind::Soft,
        source: ExplainerKind::Attention,
    })
}

/// Outcome of one GNNExplainer fit, with the objective at the start and end.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnFit {
    pub mask: EdgeMask,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub learning_rate: f64,
    pub retries: usize,
}

struct Objective<'a> {
    policy: &'a Policy,
    obs: &'a Tensor,
    target: Tensor,
    inv_var: Tensor,
    cfg: &'a ExplainerConfig,
}

impl<'a> Objective<'a> {
    fn new(policy: &'a Policy, obs: &'a Tensor, cfg: &'a ExplainerConfig) -> Result<Self, ExplainError> {
        let head = policy.head(obs, None)?;
        let inv_var = Tensor::row_vector(&head.log_std.map(|l| 1.0 / (2.0 * (2.0 * l).exp())));
        Ok(Self {
            policy,
            obs,
            target: head.mean,
            inv_var,
            cfg,
        })
    }

    fn eval<'g>(&self, g: &'g Graph, logits: Var<'g>) -> Result<Var<'g>, ExplainError> {
        let n = self.obs.rows();
        let bound = self.policy.params.bind(g, false);
        let mask = logits.sigmoid();
        let out = policy_forward_batch(&bound, &self.policy.arch, g.constant(self.obs.clone()), mask, n)?;
        let diff = out.mean.sub(&g.constant(self.target.clone()))?;
        let kl = diff.mul(&diff)?.mul_row(&g.constant(self.inv_var.clone()))?.sum();
        let size = mask.sum().scale(self.cfg.size_weight);
        let m = mask.clamp(1e-12, 1.0 - 1e-12);
        let one_minus = m.scale(-1.0).add_scalar(1.0);
        let ent = m
            .mul(&m.log()?)?
            .add(&one_minus.mul(&one_minus.log()?)?)?
            .sum()
            .scale(-self.cfg.mask_entropy_weight);
        Ok(kl.add(&size)?.add(&ent)?)
    }

    fn value(&self, logits: &Tensor) -> Result<f64, ExplainError> {
        let g = Graph::inference();
        Ok(self.eval(&g, g.constant(logits.clone()))?.item())
    }

    /// Adam on the mask logits from `L = 0`.
    fn run(&self, lr: f64) -> Result<(Tensor, f64), ExplainError> {
        let n = self.obs.rows();
        let mut params = Params::new(vec![("mask.logits".into(), Tensor::zeros(n, n))]);
        let mut adam = Adam::new(lr);
        for step in 0..self.cfg.steps {
            let g = Graph::new();
            let logits = g.leaf(params.entries()[0].1.clone());
            let obj = self.eval(&g, logits)?;
            if !obj.item().is_finite() {
                return Err(ExplainError::NonFinite { step });
            }
            g.backward(obj)?;
            let grad = logits.grad().unwrap_or_else(|| Tensor::zeros(n, n));
            adam.step(&mut params, &[grad]);
        }
        let logits = params.entries()[0].1.clone();
        let value = self.value(&logits)?;
        if !value.is_finite() {
            return Err(ExplainError::NonFinite { step: self.cfg.steps });
        }
        Ok((logits, value))
    }
}

/// Optimizes a sigmoid edge mask so the masked policy stays close to the
/// original while the mask shrinks and saturates. When the final objective
/// exceeds the initial one the fit is restarted with half the learning rate.
pub fn gnnexplainer_fit(policy: &Policy, obs: &Tensor, cfg: &ExplainerConfig) -> Result<GnnFit, ExplainError> {
    cfg.validate()?;
    let objective = Objective::new(policy, obs, cfg)?;
    let n = obs.rows();
    let initial = objective.value(&Tensor::zeros(n, n))?;
    let mut lr = cfg.learning_rate;
    let mut retries = 0;
    loop {
        let (logits, value) = objective.run(lr)?;
        if value <= initial || retries >= cfg.max_retries {
            return Ok(GnnFit {
                mask: EdgeMask {
                    values: logits.map(|l| 1.0 / (1.0 + (-l).exp())),
                    kind: MaskKind::Soft,
                    source: ExplainerKind::GnnExplainer,
                },
                initial_objective: initial,
                final_objective: value,
                learning_rate: lr,
                retries,
            });
        }
        lr *= 0.5;
        retries += 1;
    }
}

pub fn explain_gnnexplainer(policy: &Policy, obs: &Tensor, cfg: &ExplainerConfig) -> Result<EdgeMask, ExplainError> {
    Ok(gnnexplainer_fit(policy, obs, cfg)?.mask)
}

/// Result of the greedy GraphMask search.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMaskFit {
    pub mask: EdgeMask,
    /// KL of the returned subgraph against the full graph
    pub divergence: f64,
    /// smallest KL among the removals rejected at termination; `None` when
    /// every edge was removed
    pub next_divergence: Option<f64>,
}

/// KL of the head under each candidate weight matrix, evaluated as one batch.
fn candidate_divergences(policy: &Policy, obs: &Tensor, full: &PolicyHead, candidates: &[Tensor]) -> Result<Vec<f64>, ExplainError> {
    let n = obs.rows();
    let b = candidates.len();
    let mut x = Vec::with_capacity(b * obs.len());
    let mut w = Vec::with_capacity(b * n * n);
    for c in candidates {
        x.extend_from_slice(obs.data());
        w.extend_from_slice(c.data());
    }
    let g = Graph::inference();
    let bound = policy.params.bind(&g, false);
    let out = policy_forward_batch(
        &bound,
        &policy.arch,
        g.constant(Tensor::new(b * n, obs.cols(), x)?),
        g.constant(Tensor::new(b * n, n, w)?),
        n,
    )?;
    let means = out.mean.value();
    let width = means.cols();
    Ok((0..b)
        .map(|k| {
            let head = PolicyHead {
                mean: Tensor::new(n, width, means.data()[k * n * width..(k + 1) * n * width].to_vec())
                    .expect("slice of a consistent batch"),
                log_std: full.log_std,
            };
            head_kl(full, &head)
        })
        .collect())
}

/// Greedy backward elimination: repeatedly drop the edge whose removal keeps
/// the output closest to the original, while that divergence stays below β.
pub fn graphmask_fit(policy: &Policy, obs: &Tensor, cfg: &ExplainerConfig) -> Result<GraphMaskFit, ExplainError> {
    cfg.validate()?;
    let n = obs.rows();
    let full = policy.head(obs, None)?;
    let mut kept = Tensor::ones(n, n);
    let mut divergence = 0.0;
    loop {
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| kept.get(i, j) == 1.0)
            .collect();
        if edges.is_empty() {
            return Ok(GraphMaskFit {
                mask: EdgeMask {
                    values: kept,
                    kind: MaskKind::Hard,
                    source: ExplainerKind::GraphMask,
                },
                divergence,
                next_divergence: None,
            });
        }
        let candidates: Vec<Tensor> = edges
            .iter()
            .map(|&(i, j)| {
                let mut c = kept.clone();
                c.set(i, j, 0.0);
                c
            })
            .collect();
        let kls = candidate_divergences(policy, obs, &full, &candidates)?;
        // first minimum in lexicographic edge order
        let (best, best_kl) = kls
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
        if best_kl < cfg.beta {
            let (i, j) = edges[best];
            kept.set(i, j, 0.0);
            divergence = best_kl;
        } else {
            return Ok(GraphMaskFit {
                mask: EdgeMask {
                    values: kept,
                    kind: MaskKind::Hard,
                    source: ExplainerKind::GraphMask,
                },
                divergence,
                next_divergence: Some(best_kl),
            });
        }
    }
}

pub fn explain_graphmask(policy: &Policy, obs: &Tensor, cfg: &ExplainerConfig) -> Result<EdgeMask, ExplainError> {
    Ok(graphmask_fit(policy, obs, cfg)?.mask)
}

/// Dispatches on the explainer kind.
pub fn explain(kind: ExplainerKind, policy: &Policy, obs: &Tensor, cfg: &ExplainerConfig) -> Result<EdgeMask, ExplainError> {
    match kind {
        ExplainerKind::Attention => explain_attention(policy, obs),
        ExplainerKind::GnnExplainer => explain_gnnexplainer(policy, obs, cfg),
        ExplainerKind::GraphMask => explain_graphmask(policy, obs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{observe, reset, TaskConfig, TaskId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Policy, Tensor) {
        let policy = Policy::init(TaskId::Navigation, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let obs = observe(&reset(&TaskConfig::new(TaskId::Navigation, 3).unwrap(), seed).unwrap());
        (policy, obs)
    }

    #[test]
    fn attention_mask_is_the_attention() {
        let (policy, obs) = setup(1);
        let m = explain_attention(&policy, &obs).unwrap();
        assert_eq!(m.values, policy.forward(&obs, None).unwrap().1.attention);
        for r in 0..3 {
            let s: f64 = m.values.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let same = Tensor::from_rows(&[[0.1, 0.2, 0.0, 0.0, 0.5, 0.5]; 3]).unwrap();
        let u = explain_attention(&policy, &same).unwrap();
        assert!(u.values.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn graphmask_limits() {
        let (policy, obs) = setup(2);
        let all = graphmask_fit(&policy, &obs, &ExplainerConfig { beta: f64::INFINITY, ..Default::default() }).unwrap();
        assert!(all.mask.values.data().iter().all(|&x| x == 0.0));
        assert_eq!(all.next_divergence, None);
        let none = graphmask_fit(&policy, &obs, &ExplainerConfig { beta: 1e-300, ..Default::default() }).unwrap();
        assert!(none.mask.values.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn graphmask_contract() {
        for seed in 0..5 {
            let (policy, obs) = setup(seed);
            let cfg = ExplainerConfig::default();
            let fit = graphmask_fit(&policy, &obs, &cfg).unwrap();
            assert!(fit.divergence < cfg.beta);
            let head = policy.head(&obs, Some(&fit.mask.values)).unwrap();
            let full = policy.head(&obs, None).unwrap();
            assert!((head_kl(&full, &head) - fit.divergence).abs() < 1e-12);
            if let Some(next) = fit.next_divergence {
                assert!(next >= cfg.beta);
            }
        }
    }

    #[test]
    fn graphmask_drops_an_inert_edge() {
        let (mut policy, obs) = setup(3);
        // zero source messages make every edge inert
        let w = policy.params.get_mut("gat.w_src").unwrap();
        w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let fit = graphmask_fit(&policy, &obs, &ExplainerConfig { beta: 1e-12, ..Default::default() }).unwrap();
        assert!(fit.mask.values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gnnexplainer_improves_and_stays_open() {
        let (policy, obs) = setup(4);
        let cfg = ExplainerConfig {
            steps: 60,
            ..Default::default()
        };
        let before = policy.params.digest();
        let fit = gnnexplainer_fit(&policy, &obs, &cfg).unwrap();
        assert_eq!(before, policy.params.digest());
        assert!(fit.final_objective <= fit.initial_objective);
        assert!(fit.mask.values.data().iter().all(|&m| m > 0.0 && m < 1.0));
        let again = gnnexplainer_fit(&policy, &obs, &cfg).unwrap();
        assert_eq!(fit, again);
    }

    #[test]
    fn gnnexplainer_objective_zero_at_full_mask_without_penalties() {
        let (policy, obs) = setup(5);
        let cfg = ExplainerConfig {
            size_weight: 0.0,
            mask_entropy_weight: 0.0,
            ..Default::default()
        };
        let obj = Objective::new(&policy, &obs, &cfg).unwrap();
        // sigmoid(40) rounds to 1 in f64
        assert_eq!(obj.value(&Tensor::full(3, 3, 40.0)).unwrap(), 0.0);
    }

    #[test]
    fn kind_roundtrip() {
        for k in ExplainerKind::ALL {
            assert_eq!(k.as_str().parse::<ExplainerKind>().unwrap(), k);
        }
        assert!("gradcam".parse::<ExplainerKind>().is_err());
    }
}
