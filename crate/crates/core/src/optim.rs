//! Adam with bias correction and per-parameter learning rates.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Optimizer state for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub lr: f64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// One slot per parameter, in store order.
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    /// Fresh state for every parameter in `store`; `lr_for` maps a parameter
    /// name to its learning rate.
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64, lr_for: impl Fn(&str) -> f64) -> Self {
        let slots = store
            .iter()
            .map(|p| AdamSlot {
                name: p.name.clone(),
                lr: lr_for(&p.name),
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            })
            .collect();
        AdamState {
            step: 0,
            beta1,
            beta2,
            epsilon,
            slots,
        }
    }

    /// Checks that this state belongs to `store` (names and shapes).
    pub fn check_matches(&self, store: &ParamStore) -> Result<()> {
        if self.slots.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.slots.len(),
                store.len()
            )));
        }
        for (s, p) in self.slots.iter().zip(store.iter()) {
            if s.name != p.name || s.m.shape() != p.value.shape() || s.v.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "optimizer slot {} does not match parameter {}",
                    s.name, p.name
                )));
            }
        }
        Ok(())
    }

    /// One Adam update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.check_matches(store)?;
        for p in store.iter() {
            if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {} is {} at entry {pos}",
                    p.name,
                    p.grad.data()[pos]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (slot, p) in self.slots.iter_mut().zip(store.iter_mut()) {
            let lr = slot.lr;
            let g = p.grad.data();
            let value = p.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = store(0.7);
        let mut a = AdamState::new(&s, 0.9, 0.999, 1e-8, |_| 0.1);
        for _ in 0..50 {
            a.step(&mut s).unwrap();
        }
        assert_eq!(s.value(crate::autodiff::ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn first_step_size() {
        let mut s = store(0.0);
        s.get_mut(crate::autodiff::ParamId(0)).grad.data_mut()[0] = 1.0;
        let mut a = AdamState::new(&s, 0.9, 0.999, 1e-8, |_| 1e-4);
        a.step(&mut s).unwrap();
        let got = s.value(crate::autodiff::ParamId(0)).data()[0];
        let want = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((got - want).abs() < 1e-18, "{got}");
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut s1 = store(0.3);
        let mut s2 = store(0.3);
        let mut a1 = AdamState::new(&s1, 0.9, 0.999, 1e-8, |_| 0.01);
        let mut a2 = a1.clone();
        for k in 0..10 {
            let g = (k as f64 * 0.7).sin();
            s1.get_mut(crate::autodiff::ParamId(0)).grad.data_mut()[0] = g;
            s2.get_mut(crate::autodiff::ParamId(0)).grad.data_mut()[0] = g;
            a1.step(&mut s1).unwrap();
            a2.step(&mut s2).unwrap();
        }
        assert_eq!(
            s1.value(crate::autodiff::ParamId(0)).data(),
            s2.value(crate::autodiff::ParamId(0)).data()
        );
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(0.0);
        s.get_mut(crate::autodiff::ParamId(0)).grad.data_mut()[0] = f64::NAN;
        let mut a = AdamState::new(&s, 0.9, 0.999, 1e-8, |_| 0.1);
        match a.step(&mut s) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("parameter p")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(a.step, 0);
    }
}
