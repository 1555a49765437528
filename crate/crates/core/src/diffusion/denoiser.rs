use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::{time_embedding, Activation, BoundMlp, Mlp};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Anything that predicts the injected noise `ε` from `(x_t, t)`.
///
/// `ts` holds one (possibly fractional) timestep per row of `x_t`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, g: &mut Graph, x_t: Var, ts: &[f64]) -> Result<Var>;
}

/// Time-conditioned MLP `ε_θ(x_t, t)`: the input is `x_t` concatenated with
/// a sinusoidal embedding of `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    mlp: Mlp,
    data_dim: usize,
    embed_dim: usize,
}

#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    mlp: BoundMlp,
    data_dim: usize,
    embed_dim: usize,
}

impl Denoiser {
    pub fn new(data_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_architecture(data_dim, &DEFAULT_HIDDEN, DEFAULT_EMBED_DIM, rng)
    }

    pub fn with_architecture(
        data_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![data_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        Ok(Self {
            mlp: Mlp::new(&sizes, Activation::Silu, rng)?,
            data_dim,
            embed_dim,
        })
    }

    pub fn from_mlp(mlp: Mlp, data_dim: usize, embed_dim: usize) -> Result<Self> {
        if mlp.input_dim() != data_dim + embed_dim || mlp.output_dim() != data_dim {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "mlp {}->{} does not fit data dim {data_dim} + embedding {embed_dim}",
                    mlp.input_dim(),
                    mlp.output_dim()
                ),
            ));
        }
        Ok(Self {
            mlp,
            data_dim,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundDenoiser> {
        Ok(BoundDenoiser {
            mlp: self.mlp.bind(g, trainable)?,
            data_dim: self.data_dim,
            embed_dim: self.embed_dim,
        })
    }

    /// Plain-value prediction at a single timestep for every row.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone())?;
        let ts = vec![t as f64; x_t.rows()];
        let out = self.predict_noise(&mut g, x, &ts)?;
        Ok(g.value(out).clone())
    }
}

impl BoundDenoiser {
    pub fn mlp(&self) -> &BoundMlp {
        &self.mlp
    }
}

fn embed_and_run(
    g: &mut Graph,
    mlp: &BoundMlp,
    data_dim: usize,
    embed_dim: usize,
    x_t: Var,
    ts: &[f64],
) -> Result<Var> {
    let shape = g.shape(x_t).to_vec();
    if shape.len() != 2 || shape[1] != data_dim || shape[0] != ts.len() {
        return Err(Error::shape(
            "denoiser",
            format!("input {shape:?} with {} timesteps, data dim {data_dim}", ts.len()),
        ));
    }
    let emb = g.constant(time_embedding(ts, embed_dim))?;
    let input = g.concat_cols(x_t, emb)?;
    mlp.forward(g, input)
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict_noise(&self, g: &mut Graph, x_t: Var, ts: &[f64]) -> Result<Var> {
        let bound = self.mlp.bind(g, false)?;
        embed_and_run(g, &bound, self.data_dim, self.embed_dim, x_t, ts)
    }
}

impl NoisePredictor for BoundDenoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn predict_noise(&self, g: &mut Graph, x_t: Var, ts: &[f64]) -> Result<Var> {
        embed_and_run(g, &self.mlp, self.data_dim, self.embed_dim, x_t, ts)
    }
}
