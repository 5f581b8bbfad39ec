use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators and step counter of AdamW. The learning rate lives in
/// `config.lr` and may be changed between steps by a scheduler.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) first: Vec<ArrayD<T>>,
    pub(crate) second: Vec<ArrayD<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || -> Vec<ArrayD<T>> {
            store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect()
        };
        OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &ArrayD<T> {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &ArrayD<T> {
        &self.second[index]
    }

    /// One AdamW update from the gradients currently held in `store`.
    /// Weight decay is applied to the weights directly, not through the
    /// moments. Fails without touching any parameter if a gradient is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        for id in store.ids() {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        for (i, id) in store.ids().enumerate() {
            let (w, g) = store.value_and_grad_mut(id);
            Zip::from(w)
                .and(g)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .for_each(|w, &g, m, v| {
                    *w = *w * decay;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_store(w: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ArrayD::from_elem(IxDyn(&[1]), w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(0.75);
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id)[0], 0.75);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let (mut s, id) = scalar_store(2.0);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        assert!((s.value(id)[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id)[0] = 1.0;
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        // m̂ = v̂ = 1, so Δ = lr / (1 + ε).
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((s.value(id)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_step_trace_matches_hand_rolled_adam() {
        let grads = [0.5, -1.5, 2.0];
        let (mut s, id) = scalar_store(0.3);
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(&s, cfg);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            s.grad_mut(id)[0] = g;
            opt.step(&mut s).unwrap();
            let t = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.value(id)[0] - w).abs() < 1e-14, "step {t}");
        }
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn nan_gradient_reports_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id)[0] = f64::NAN;
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        match opt.step(&mut s) {
            Err(Error::Divergence { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(id)[0], 1.0);
        assert_eq!(opt.step, 0);
    }
}
