use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::model::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Constant-rate optimizer over the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        let adam = kind == OptimizerKind::Adam;
        Self {
            kind,
            lr,
            t: 0,
            m: if adam { zeros() } else { Vec::new() },
            v: if adam { zeros() } else { Vec::new() },
        }
    }

    /// Applies one update; frozen tensors and missing gradients are skipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<(), TrainError> {
        if grads.len() != params.entries().len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.entries().len()
            )));
        }
        self.t += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(self.t as i32), 1.0 - ADAM_BETA2.powi(self.t as i32));
        for (i, (entry, grad)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            let p = entry.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &gi) in p.iter_mut().zip(g.data()) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &gi)) in p.iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gi;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gi * gi;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *x -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
