use serde::{Deserialize, Serialize};

use crate::tensor::{ParamGroup, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam (or plain SGD) with one step counter per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken per group: main, discriminator, predictor.
    pub steps: [u64; 3],
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Main => 0,
        ParamGroup::Discriminator => 1,
        ParamGroup::Predictor => 2,
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Optimizer { kind, m: zeros.clone(), v: zeros, steps: [0; 3] }
    }

    /// Applies the accumulated gradients of `group` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, group: ParamGroup, lr: f64) {
        let gi = group_index(group);
        self.steps[gi] += 1;
        let t = self.steps[gi] as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let ids: Vec<_> = store.ids_in(group).collect();
        for id in ids {
            let g = store.grad(id).clone();
            let i = id.index();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (((w, gv), mv), vv) in
                        store.value_mut(id).data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                        *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                        *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Main, Tensor::from_vec(vec![1.0, -1.0]));
        let other = store.add("d", ParamGroup::Discriminator, Tensor::from_vec(vec![5.0]));
        store.grad_mut(id).data_mut().copy_from_slice(&[3.0, -0.5]);
        store.grad_mut(other).data_mut()[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::Adam, &store);
        opt.step(&mut store, ParamGroup::Main, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
        assert_eq!(store.value(other).data(), &[5.0]);
        assert_eq!(opt.steps, [1, 0, 0]);
    }

    #[test]
    fn sgd_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Predictor, Tensor::from_vec(vec![1.0]));
        store.grad_mut(id).data_mut()[0] = 2.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &store);
        opt.step(&mut store, ParamGroup::Predictor, 0.25);
        assert_eq!(store.value(id).data(), &[0.5]);
    }
}
