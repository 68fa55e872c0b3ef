//! Optimizers for the training loops.
//!
//! AdamW is the default recipe; plain SGD stays available as a config
//! option. Both update in f64 and are strictly deterministic.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW
    }
}

impl OptimizerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAM_WEIGHT_DECAY: f64 = 0.01;

/// Optimizer state over a fixed list of parameter tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_sizes: &[usize]) -> Self {
        let (m, v) = match kind {
            OptimizerKind::AdamW => (
                param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
                param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update. `grads[i]` must match `params[i]` in length;
    /// `None` entries (parameters untouched by the loss) are skipped for
    /// SGD and treated as zero gradient for AdamW moment decay.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv -= self.lr * gv;
                        }
                    }
                }
            }
            OptimizerKind::AdamW => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for (j, pv) in p.data_mut().iter_mut().enumerate() {
                        let gv = g.map_or(0.0, |g| g.data()[j]);
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gv;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *pv -= self.lr * (mh / (vh.sqrt() + ADAM_EPS) + ADAM_WEIGHT_DECAY * *pv);
                    }
                }
            }
        }
    }
}
