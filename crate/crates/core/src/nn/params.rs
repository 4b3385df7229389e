use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Architecture, NnError, LOG_STD_INIT};
use crate::numcore::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    /// Uniform `±1/sqrt(fan_in)` weights and biases; the action-mean output
    /// layer is shrunk by 100x so the initial policy is close to zero-mean.
    pub fn init<R: Rng>(arch: &Architecture, n_agents: usize, rng: &mut R) -> Self {
        let shapes = arch.param_shapes(n_agents);
        let last_decoder = shapes
            .iter()
            .filter(|(n, _)| n.starts_with("decoder."))
            .map(|(n, _)| n.split('.').nth(1).unwrap_or("0").to_string())
            .next_back();
        let mut entries = Vec::with_capacity(shapes.len());
        let mut fan_in = 1;
        for (name, [r, c]) in shapes {
            let t = if name == "policy.log_std" {
                Tensor::full(r, c, LOG_STD_INIT)
            } else {
                if name.ends_with(".weight") || name.starts_with("gat.") {
                    fan_in = r;
                }
                let mut bound = 1.0 / (fan_in as f64).sqrt();
                let is_output = last_decoder
                    .as_deref()
                    .is_some_and(|l| name.starts_with(&format!("decoder.{l}.")));
                if is_output {
                    bound *= 0.01;
                }
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(r, c, data).expect("shape from architecture")
            };
            entries.push((name, t));
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks names and shapes against an architecture, in order.
    pub fn validate(&self, arch: &Architecture, n_agents: usize) -> Result<(), NnError> {
        for (name, shape) in arch.param_shapes(n_agents) {
            let t = self.get(&name).ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if t.shape() != shape {
                return Err(NnError::ParamShape {
                    name,
                    expected: shape,
                    found: t.shape(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Registers every parameter on `graph`; trainable leaves when `train`.
    pub fn bind<'g>(&self, graph: &'g Graph, train: bool) -> BoundParams<'g> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if train { graph.leaf(t.clone()) } else { graph.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds every parameter as a constant except `name`, which is taken
    /// from `var` (used to differentiate with respect to one tensor).
    pub fn bind_replacing<'g>(&self, graph: &'g Graph, name: &str, var: Var<'g>) -> Result<BoundParams<'g>, NnError> {
        let current = self.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if current.shape() != var.shape() {
            return Err(NnError::ParamShape {
                name: name.to_string(),
                expected: current.shape(),
                found: var.shape(),
            });
        }
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), if n == name { var } else { graph.constant(t.clone()) }))
            .collect();
        Ok(BoundParams { vars })
    }
}

/// Parameters registered on one graph.
pub struct BoundParams<'g> {
    vars: Vec<(String, Var<'g>)>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>, NnError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[(String, Var<'g>)] {
        &self.vars
    }

    /// Gradients in parameter order; zeros where backward did not reach.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| {
                v.grad().unwrap_or_else(|| {
                    let [r, c] = v.shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}
