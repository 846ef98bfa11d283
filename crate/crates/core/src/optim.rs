//! AdamW with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{GradSet, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `base · ½(1 + cos(π·step/total))`, clamped at the end of the schedule.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Optimizer state for one parameter store. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new<F: Scalar>(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let n = store.len();
        Self {
            config,
            m: vec![None; n],
            v: vec![None; n],
            steps: vec![0; n],
        }
    }

    /// Updates every trainable parameter that has a gradient. Biases and
    /// normalization gains are not decayed.
    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &GradSet<F>,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if k >= self.m.len() {
                self.m.push(None);
                self.v.push(None);
                self.steps.push(0);
            }
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let lr = lr(p.group);
            let decay = !(p.name.ends_with(".bias") || p.name.ends_with(".gain"));
            let n = g.data().len();
            let m = self.m[k].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[k].get_or_insert_with(|| vec![0.0; n]);
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for ((w, &gi), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gi = gi.f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mut x = w.f64();
                if decay {
                    x -= lr * c.weight_decay * x;
                }
                x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w = F::of(x);
            }
        }
    }
}

/// Sum of squares of every gradient entry, for diagnostics.
pub fn grad_norm<F: Scalar>(store: &ParamStore<F>, grads: &GradSet<F>) -> f64 {
    store
        .ids()
        .filter_map(|id| grads.get(id))
        .map(|g: &Matrix<F>| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 20, 10).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w.weight", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap(), ParamGroup::Head);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true);
        let ones = tape.constant(Matrix::filled(1, 2, 1.0));
        let s = tape.matmul_nt(b.var(id), ones);
        let mut g = tape.backward(s);
        let gs = b.collect(&mut g);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &store,
        );
        opt.step(&mut store, &gs, |_| 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w.weight", Matrix::filled(2, 2, 0.5), ParamGroup::Encoder);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true);
        let m = tape.mean_rows(b.var(id));
        let ones = tape.constant(Matrix::filled(1, 2, 1.0));
        let loss = tape.matmul_nt(m, ones);
        let mut g = tape.backward(loss);
        let gs = b.collect(&mut g);
        assert!(gs.get(id).is_some());
        store.set_trainable(id, false);
        let before = store.fingerprint();
        AdamW::new(AdamWConfig::default(), &store).step(&mut store, &gs, |_| 1.0);
        assert_eq!(store.fingerprint(), before);
    }
}
