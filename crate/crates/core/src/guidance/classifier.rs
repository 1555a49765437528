use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::{time_embedding, Activation, BoundMlp, Mlp};
use crate::tensor::{Graph, Tensor, Var};

pub const CLASSIFIER_HIDDEN: [usize; 3] = [128, 128, 128];
pub const CLASSIFIER_EMBED_DIM: usize = 32;

/// Discrepancy `D(f(x_adv), f(x_t))` between two logit rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMeasure {
    /// `KL(softmax(p) ‖ softmax(q))`.
    #[default]
    KlSoftmax,
    /// `‖p − q‖²` on raw logits.
    L2Logits,
}

impl DistanceMeasure {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMeasure::KlSoftmax => "kl_softmax",
            DistanceMeasure::L2Logits => "l2_logits",
        }
    }

    /// Per-row discrepancy as an `[n]` vector.
    pub fn rows(self, g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
        match self {
            DistanceMeasure::KlSoftmax => crate::tensor::kl_rows(g, p_logits, q_logits),
            DistanceMeasure::L2Logits => {
                if g.shape(p_logits) != g.shape(q_logits) {
                    return Err(Error::shape(
                        "l2_logits",
                        format!("{:?} vs {:?}", g.shape(p_logits), g.shape(q_logits)),
                    ));
                }
                let d = g.sub(p_logits, q_logits)?;
                let sq = g.mul(d, d)?;
                g.row_sum(sq)
            }
        }
    }
}

/// `f_φ`: an MLP from `x` (optionally concatenated with a time embedding)
/// to `C` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceClassifier {
    mlp: Mlp,
    input_dim: usize,
    class_count: usize,
    noise_conditioning: bool,
    embed_dim: usize,
    distance: DistanceMeasure,
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    mlp: BoundMlp,
    input_dim: usize,
    class_count: usize,
    noise_conditioning: bool,
    embed_dim: usize,
}

impl GuidanceClassifier {
    pub fn new(
        input_dim: usize,
        class_count: usize,
        noise_conditioning: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_architecture(
            input_dim,
            class_count,
            &CLASSIFIER_HIDDEN,
            noise_conditioning,
            CLASSIFIER_EMBED_DIM,
            rng,
        )
    }

    pub fn with_architecture(
        input_dim: usize,
        class_count: usize,
        hidden: &[usize],
        noise_conditioning: bool,
        embed_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let embed_dim = if noise_conditioning { embed_dim } else { 0 };
        let mut sizes = vec![input_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(class_count);
        Ok(Self {
            mlp: Mlp::new(&sizes, Activation::Silu, rng)?,
            input_dim,
            class_count,
            noise_conditioning,
            embed_dim,
            distance: DistanceMeasure::default(),
        })
    }

    pub fn from_mlp(
        mlp: Mlp,
        input_dim: usize,
        noise_conditioning: bool,
        embed_dim: usize,
    ) -> Result<Self> {
        let embed_dim = if noise_conditioning { embed_dim } else { 0 };
        if mlp.input_dim() != input_dim + embed_dim || mlp.output_dim() < 2 {
            return Err(Error::shape(
                "classifier",
                format!(
                    "mlp {}->{} does not fit input {input_dim} + embedding {embed_dim}",
                    mlp.input_dim(),
                    mlp.output_dim()
                ),
            ));
        }
        Ok(Self {
            class_count: mlp.output_dim(),
            mlp,
            input_dim,
            noise_conditioning,
            embed_dim,
            distance: DistanceMeasure::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn noise_conditioning(&self) -> bool {
        self.noise_conditioning
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Distance measure the classifier was trained with.
    pub fn distance(&self) -> DistanceMeasure {
        self.distance
    }

    pub fn set_distance(&mut self, d: DistanceMeasure) {
        self.distance = d;
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundClassifier> {
        Ok(BoundClassifier {
            mlp: self.mlp.bind(g, trainable)?,
            input_dim: self.input_dim,
            class_count: self.class_count,
            noise_conditioning: self.noise_conditioning,
            embed_dim: self.embed_dim,
        })
    }

    /// Logits of clean inputs (time 0).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_at(x, &vec![0.0; x.rows()])
    }

    /// Logits with one timestep per row; ignored without noise conditioning.
    pub fn logits_at(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = bound.forward(&mut g, xv, ts)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn check_labels(&self, y: &[usize]) -> Result<()> {
        check_labels(y, self.class_count)
    }
}

pub(crate) fn check_labels(y: &[usize], class_count: usize) -> Result<()> {
    match y.iter().find(|&&c| c >= class_count) {
        Some(&bad) => Err(Error::OutOfRange {
            what: "label",
            index: bad,
            limit: class_count,
        }),
        None => Ok(()),
    }
}

impl BoundClassifier {
    pub fn mlp(&self) -> &BoundMlp {
        &self.mlp
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ts: &[f64]) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape(
                "classifier",
                format!("input {shape:?}, expected [n, {}]", self.input_dim),
            ));
        }
        let input = if self.noise_conditioning {
            if ts.len() != shape[0] {
                return Err(Error::shape(
                    "classifier",
                    format!("{} timesteps for {} rows", ts.len(), shape[0]),
                ));
            }
            let emb = g.constant(time_embedding(ts, self.embed_dim))?;
            g.concat_cols(x, emb)?
        } else {
            x
        };
        self.mlp.forward(g, input)
    }

    /// Forward pass with every row at the same timestep.
    pub fn forward_at(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        let n = g.shape(x).first().copied().unwrap_or(0);
        self.forward(g, x, &vec![t; n])
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
