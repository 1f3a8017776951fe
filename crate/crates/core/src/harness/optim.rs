use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub betas: (f64, f64),
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-5, eps: 1e-8, betas: (0.9, 0.999) }
    }
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at the first step to zero after the last.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

/// Adam with decoupled weight decay, applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> AdamW {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let AdamWConfig { lr, weight_decay, eps, betas: (b1, b2) } = self.config;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * weight_decay * p[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_fn(2, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5)));
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &store);
        let mut tape = crate::tensor::Tape::new(&store);
        let w = tape.param(id);
        let loss = tape.mse_const(w, &Tensor::filled(&[2, 2], 3.0)).unwrap();
        let g = tape.backward(loss);
        opt.step(&mut store, &g);
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first Adam step has magnitude lr for any non-zero gradient
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, eps: 0.0, betas: (0.9, 0.999) };
        let mut opt = AdamW::new(cfg, &store);
        let mut tape = crate::tensor::Tape::new(&store);
        let w = tape.param(id);
        let loss = tape.mse_const(w, &Tensor::zeros(&[2])).unwrap();
        let g = tape.backward(loss);
        opt.step(&mut store, &g);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-12);
        assert!((store.get(id).data()[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let mut tape = crate::tensor::Tape::new(&store);
        let w = tape.param(id);
        let loss = tape.mse_const(w, &Tensor::zeros(&[2])).unwrap();
        // d/dw mean(w^2) = w, norm 5
        let mut g = tape.backward(loss);
        assert!((clip_grad_norm(&mut g, 1.0) - 5.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let before = g.clone();
        clip_grad_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }
}
