//! Adam with bias correction over named parameters.

use std::collections::BTreeMap;

use crate::backbone::store::ParamStore;
use crate::error::{Error, Result};

/// Optimizer state: per-parameter moment estimates keyed by name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// First/second moment of a parameter, if the optimizer has touched it.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update across several stores: the view is every unfrozen entry of
    /// every group, with moment keys qualified by the group prefix.
    pub fn step_groups(&mut self, groups: &mut [(&str, &mut ParamStore)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (prefix, store) in groups.iter_mut() {
            let names = store.trainable_names();
            for name in &names {
                let p = store.get(name)?;
                if p.tensor.grad.is_none() {
                    return Err(Error::MissingGradient(format!("{prefix}{name}")));
                }
            }
            for name in &names {
                let qualified = format!("{prefix}{name}");
                let p = store.get_mut(name)?;
                let n = p.tensor.numel();
                let (m, v) = self
                    .moments
                    .entry(qualified)
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let grad = p.tensor.grad.as_ref().expect("checked above").clone();
                let data = p.tensor.data_mut();
                for i in 0..n {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }

    /// One bias-corrected update over the named view, in place.
    ///
    /// Every parameter in the view must be unfrozen and carry a gradient;
    /// frozen parameters in the view are a hard error, not a skip.
    pub fn step(&mut self, store: &mut ParamStore, view: &[String]) -> Result<()> {
        for name in view {
            let p = store.get(name)?;
            if p.frozen {
                return Err(Error::FrozenParamUpdate(name.clone()));
            }
            if p.tensor.grad.is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in view {
            let p = store.get_mut(name)?;
            let n = p.tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.tensor.grad.as_ref().expect("checked above").clone();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_one(theta: f64, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(theta);
        t.requires_grad = !frozen;
        s.insert("theta", t).unwrap();
        if frozen {
            s.freeze_all();
        }
        s
    }

    #[test]
    fn zero_gradients_leave_everything_unchanged() {
        let mut s = store_one(1.5, false);
        s.get_mut("theta").unwrap().tensor.set_grad(vec![0.0]).unwrap();
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut s, &["theta".to_string()]).unwrap();
        assert_eq!(s.tensor("theta").unwrap().data(), &[1.5]);
        let (m, v) = adam.moments("theta").unwrap();
        assert_eq!(m, &[0.0]);
        assert_eq!(v, &[0.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // theta=1, g=1, lr=1e-3, betas (0.9, 0.999), eps=1e-8, step 1:
        // m_hat = v_hat = 1, so theta' = 1 - 1e-3 / (1 + 1e-8)
        let mut s = store_one(1.0, false);
        s.get_mut("theta").unwrap().tensor.set_grad(vec![1.0]).unwrap();
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut s, &["theta".to_string()]).unwrap();
        let got = s.tensor("theta").unwrap().data()[0];
        let want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((got - 0.99900000001).abs() < 1e-11);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn frozen_parameter_update_is_a_hard_error() {
        let mut s = store_one(2.0, true);
        s.get_mut("theta").unwrap().tensor.set_grad(vec![1.0]).unwrap();
        let before = s.param_hash("theta").unwrap();
        let mut adam = AdamState::new(1e-3);
        let err = adam.step(&mut s, &["theta".to_string()]);
        assert!(matches!(err, Err(Error::FrozenParamUpdate(_))));
        assert_eq!(s.param_hash("theta").unwrap(), before);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_one(1.0, false);
        let mut adam = AdamState::new(1e-3);
        assert!(matches!(
            adam.step(&mut s, &["theta".to_string()]),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn step_count_increments_once_per_update() {
        let mut s = store_one(0.0, false);
        let mut adam = AdamState::new(1e-2);
        for k in 1..=5 {
            s.get_mut("theta").unwrap().tensor.set_grad(vec![0.3]).unwrap();
            adam.step(&mut s, &["theta".to_string()]).unwrap();
            assert_eq!(adam.step_count, k);
        }
    }
}
