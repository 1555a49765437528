//! Multilayer perceptrons on the gradient tape.

use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

/// Fully connected network; the activation is applied between layers,
/// never after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// An [`Mlp`] whose parameters have been placed on a specific graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl Mlp {
    /// Layer widths `sizes[0] -> sizes[1] -> … -> sizes[last]`, weights drawn
    /// from `N(0, 1/fan_in)` and zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            weights.push(Tensor::from_parts(vec![fan_in, fan_out], w));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parameters(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("need one bias per weight matrix"));
        }
        let mut prev = None;
        for (w, b) in weights.iter().zip(&biases) {
            let s = w.shape();
            if s.len() != 2 || b.shape() != [s[1]] {
                return Err(Error::shape(
                    "mlp",
                    format!("weight {:?} with bias {:?}", s, b.shape()),
                ));
            }
            if let Some(p) = prev {
                if p != s[0] {
                    return Err(Error::shape("mlp", format!("layer width {p} feeds {}", s[0])));
                }
            }
            prev = Some(s[1]);
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.shape()[1]).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, …`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundMlp> {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| Ok((g.leaf(w.clone(), trainable)?, g.leaf(b.clone(), trainable)?)))
            .collect::<Result<_>>()?;
        Ok(BoundMlp {
            layers,
            activation: self.activation,
        })
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b)?;
            if k < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Silu => g.silu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::parameters`].
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Accumulated gradients, zero where nothing was written.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.params()
            .into_iter()
            .map(|p| {
                g.grad(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(p)))
            })
            .collect()
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps: `[n, dim]` with
/// sines in the first half and cosines in the second.
pub fn time_embedding(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let start = data.len();
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
        data.resize(start + dim, 0.0);
    }
    Tensor::from_parts(vec![ts.len(), dim], data)
}
