//! Adam with per-parameter learning rates and exponential decay.

use serde::{Deserialize, Serialize};

use crate::grad::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).rows(), store.value(id).cols())).collect();
        Self { hyper, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter with its own rate; rate 0 freezes a parameter.
    pub fn step(&mut self, store: &mut ParamStore, lrs: &[f64]) {
        assert_eq!(lrs.len(), store.len(), "one learning rate per parameter");
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if lrs[k] == 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            adam_update(p.value.data_mut(), p.grad.data(), self.m[k].data_mut(), self.v[k].data_mut(), self.step, lrs[k], &self.hyper);
        }
    }

    /// Keeps the moment rows of parameter `k` where `keep` is set.
    pub fn select_rows(&mut self, k: usize, keep: &[bool]) {
        self.m[k] = self.m[k].select_rows(keep);
        self.v[k] = self.v[k].select_rows(keep);
    }
}

/// Textbook bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, h: &AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
    }
}

/// `lr0 · final_factor^(step / (total − 1))`.
pub fn exp_decay(lr0: f64, final_factor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    lr0 * final_factor.powf(step as f64 / (total - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let mut adam = Adam::new(&store, AdamHyper::default());
        adam.step(&mut store, &[0.1]);
        assert_eq!(store.value(store.ids().next().unwrap()).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let h = AdamHyper::default();
        let (mut x, g) = ([0.5, -1.0], [0.2, -3.0]);
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut x, &g, &mut m, &mut v, 1, 0.01, &h);
        for k in 0..2 {
            let expect = [0.5, -1.0][k] - 0.01 * g[k] / (g[k].abs() + h.eps);
            assert!((x[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let target = Tensor::from_vec(1, 2, vec![0.25, 0.75]);
        let mut adam = Adam::new(&store, AdamHyper::default());
        for s in 0..2000 {
            store.zero_grad();
            let tape = Tape::new();
            let loss = (tape.param(&store, id) - tape.constant(target.clone())).square().sum();
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store, &[exp_decay(0.05, 0.001, s, 2000)]);
        }
        for k in 0..2 {
            assert!((store.value(id).data()[k] - target.data()[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_hits_endpoints() {
        assert_eq!(exp_decay(1e-2, 0.1, 0, 1000), 1e-2);
        assert!((exp_decay(1e-2, 0.1, 999, 1000) - 1e-3).abs() < 1e-15);
    }
}
