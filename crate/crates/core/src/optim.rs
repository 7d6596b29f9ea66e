//! Momentum SGD with the L2 term folded into the gradient:
//! `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate {lr} must be non-negative")));
        }
        if !(momentum >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::config("momentum and weight decay must be non-negative"));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocities: Vec::new(),
        })
    }

    /// Updates every trainable tensor that holds a gradient, then clears all
    /// gradients. Tensors without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocities.len() < store.len() {
            self.velocities.resize(store.len(), None);
        }
        for id in store.ids() {
            let t = store.get_mut(id);
            if !t.trainable() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let v = self.velocities[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((v, theta), g) in v.iter_mut().zip(t.data_mut()).zip(&g) {
                *v = self.momentum * *v + g + self.weight_decay * *theta;
                *theta -= self.lr * *v;
            }
        }
        store.zero_grads();
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocities.get(index).and_then(|v| v.as_deref())
    }

    pub fn set_velocity(&mut self, index: usize, v: Vec<f64>) {
        if self.velocities.len() <= index {
            self.velocities.resize(index + 1, None);
        }
        self.velocities[index] = Some(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(theta: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(theta).with_trainable(trainable))
            .unwrap();
        s
    }

    #[test]
    fn plain_step() {
        let mut s = store_with(0.0, true);
        let id = s.find("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        Sgd::new(1.0, 0.0, 0.0).unwrap().step(&mut s);
        assert_eq!(s.get(id).item(), -1.0);
        assert!(s.get(id).grad().is_none());
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9; θ = −0.1·(1 + 1.9)
        let mut s = store_with(0.0, true);
        let id = s.find("p").unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        for _ in 0..2 {
            s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut s);
        }
        assert!((s.get(id).item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_folds_into_gradient() {
        let mut s = store_with(2.0, true);
        let id = s.find("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        Sgd::new(0.5, 0.0, 0.1).unwrap().step(&mut s);
        assert!((s.get(id).item() - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched() {
        let mut s = store_with(3.0, false);
        let id = s.find("p").unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.01).unwrap();
        for _ in 0..10 {
            s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut s);
        }
        assert_eq!(s.get(id).item().to_bits(), 3.0f64.to_bits());
    }

    #[test]
    fn negative_lr_rejected() {
        assert!(matches!(Sgd::new(-0.1, 0.9, 0.0), Err(Error::Config(_))));
    }
}
