use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adam with optional linear learning-rate warmup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, warmup: usize) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by the next call to [`Adam::step`].
    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// True when moment buffers line up with `params`.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params.iter())
                .all(|(m, (_, t))| m.len() == t.len())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        assert!(self.matches(params), "optimizer state does not match parameters");
        let lr = self.current_lr();
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1c;
                let vh = v[i] / b2c;
                p.data_mut()[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn adam_moves_against_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(&ps, 0.1, 0);
        opt.step(&mut ps, &[vec![1.0, -1.0]]);
        let w = ps.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn warmup_is_linear() {
        let ps = ParamStore::new();
        let opt = Adam::new(&ps, 1.0, 4);
        assert_eq!(opt.current_lr(), 0.25);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
