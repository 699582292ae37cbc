//! Adam with decoupled weight decay and a warmup-then-cosine learning rate.

use crate::{Array, Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Linear warmup to `initial`, then cosine decay to `final_lr` at `total_steps`.
///
/// Steps are 1-based: step `warmup` is the first to run at the full rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.initial * step as f64 / self.warmup as f64;
        }
        if self.total_steps <= self.warmup {
            return self.initial;
        }
        let progress = ((step - self.warmup) as f64 / (self.total_steps - self.warmup) as f64).min(1.0);
        self.final_lr + (self.initial - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, a)| Array::zeros(a.shape())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient still receive weight decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in 0..params.len() {
            let p = params.get_mut(id).data_mut();
            if c.weight_decay > 0.0 {
                let decay = 1.0 - lr * c.weight_decay;
                p.iter_mut().for_each(|x| *x *= decay);
            }
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((x, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { initial: 2e-4, final_lr: 1e-4, warmup: 1000, total_steps: 300_000 };
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(500), 1e-4);
        assert_eq!(s.at(1000), 2e-4);
        assert!((s.at(300_000) - 1e-4).abs() < 1e-18);
        assert!(s.at(150_000) < 2e-4 && s.at(150_000) > 1e-4);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Array::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = crate::Graph::new(&store);
        let w = g.param(0);
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &store);
        adam.update(&mut store, &grads, 0.1);
        // first Adam step moves each coordinate by lr * sign(g)
        let d = store.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Array::full(&[1], 2.0));
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let mut g = crate::Graph::detached();
        let x = g.constant(Array::scalar(1.0));
        let no_grads = g.backward(x);
        adam.update(&mut store, &no_grads, 0.5);
        assert!((store.get(0).data()[0] - 2.0 * (1.0 - 0.5 * 1e-2)).abs() < 1e-15);
    }
}
