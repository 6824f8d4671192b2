//! Adam with decoupled weight decay and a constant learning rate.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter in `store` from matching `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Param(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.m.is_empty() {
            self.m = store.values().iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = p.data().to_vec();
            for j in 0..next.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                next[j] -= self.lr * (update + self.weight_decay * next[j]);
            }
            store.set(id, Tensor::new(p.shape(), next)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &[Tensor::vector(&[3.0, -0.5]).unwrap()]).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[0.3]).unwrap());
        let mut opt = AdamW::new(0.0, 0.1);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::vector(&[2.0]).unwrap()]).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.3]);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[2.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &[Tensor::zeros(&[1])]).unwrap();
        assert!((store.get(id).data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[5.0, -4.0]).unwrap());
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).map("grad", |w| 2.0 * (w - 1.0)).unwrap();
            opt.step(&mut store, &[g]).unwrap();
        }
        assert!(store.get(id).data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
