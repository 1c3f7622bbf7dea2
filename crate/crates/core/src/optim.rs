use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Param(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
            self.steps.resize(store.len(), 0);
        }
        for (id, grad) in grads {
            let i = id.index();
            let n = grad.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let p = store.get_mut(*id).data_mut();
            for j in 0..n {
                let g = grad.data()[j] + self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), ParamKind::Trainable).unwrap();
        let mut opt = Adam::new(0.1, 0.0).unwrap();
        opt.step(&mut s, &[(id, Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        let d = s.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(5.0), ParamKind::Trainable).unwrap();
        let mut opt = Adam::new(0.1, 0.0).unwrap();
        for _ in 0..500 {
            let x = s.get(id).item();
            opt.step(&mut s, &[(id, Tensor::scalar(2.0 * (x - 2.0)))]);
        }
        assert!((s.get(id).item() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Adam::new(0.0, 0.0).is_err());
    }
}
