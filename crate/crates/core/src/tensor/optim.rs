use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// First-order optimizer over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            }),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * d;
                    }
                }
            }
            Optimizer::Adam(adam) => {
                if adam.m.is_empty() {
                    adam.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    adam.v = adam.m.clone();
                }
                adam.step += 1;
                let bc1 = 1.0 - adam.beta1.powi(adam.step as i32);
                let bc2 = 1.0 - adam.beta2.powi(adam.step as i32);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = adam.beta1 * *mi + (1.0 - adam.beta1) * d;
                        *vi = adam.beta2 * *vi + (1.0 - adam.beta2) * d * d;
                        let mh = *mi / bc1;
                        let vh = *vi / bc2;
                        *w -= adam.lr * mh / (vh.sqrt() + adam.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
