//! Plain SGD and Adam over the trainable groups of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{ConfuError, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that holds a
    /// gradient. Frozen parameters are never touched. Fails when no
    /// trainable parameter has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        let ids: Vec<ParamId> =
            store.ids().filter(|&id| store.is_trainable(id) && store.get(id).grad().is_some()).collect();
        if ids.is_empty() {
            return Err(ConfuError::State("optimizer step without gradients".into()));
        }
        self.step += 1;
        let lr = S::lit(lr);
        for id in ids {
            let t = store.get_mut(id);
            let g = t.grad().expect("filtered above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    t.data_mut().iter_mut().zip(&g).for_each(|(w, &gi)| *w -= lr * gi);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                    let bc1 = S::one() - S::lit(beta1.powi(self.step as i32));
                    let bc2 = S::one() - S::lit(beta2.powi(self.step as i32));
                    let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
                    for (((w, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (S::one() - b1) * gi;
                        *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
