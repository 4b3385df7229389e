use crate::nn::Params;
use crate::numcore::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is in the same order as `params.entries()`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = Params::new(vec![("w".into(), Tensor::row_vector(&[1.0, -2.0]))]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Tensor::row_vector(&[3.0, -0.5])]);
        let w = p.get("w").unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        assert!((w.data()[1] + 1.9).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(vals in prop::collection::vec(-100.0f64..100.0, 1..30), max in 0.01f64..10.0) {
            let split = vals.len() / 2;
            let mut grads = vec![Tensor::row_vector(&vals[..split]), Tensor::row_vector(&vals[split..])];
            let before = clip_grad_norm(&mut grads, max);
            let after = global_norm(&grads);
            prop_assert!(after <= max + 1e-9);
            if before <= max {
                prop_assert_eq!(after, before);
            }
        }
    }
}
