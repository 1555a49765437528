use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{argmax_rows, GuidanceClassifier};
use crate::purifier::{differentiable_purify, draw_noise_plan, purify_with_noise, PurifyConfig};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// A stochastic map from inputs to logits whose randomness can be frozen:
/// for a fixed noise draw, `logits_var` is a deterministic, differentiable
/// function of `x`.
pub trait Pipeline {
    fn input_dim(&self) -> usize;

    /// Draws the noise a single forward pass consumes for a batch of `shape`.
    fn draw_noise(&self, shape: &[usize], rng: &mut Rng) -> Vec<Tensor>;

    /// Logits of `x` under frozen `noise`. `y` is available to pipelines that
    /// condition on the true label.
    fn logits_var(&self, g: &mut Graph, x: Var, y: &[usize], noise: &[Tensor]) -> Result<Var>;

    fn logits(&self, x: &Tensor, y: &[usize], noise: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let out = self.logits_var(&mut g, xv, y, noise)?;
        Ok(g.value(out).clone())
    }

    /// Prediction under a fresh noise draw.
    fn predict(&self, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
        let noise = self.draw_noise(x.shape(), rng);
        Ok(argmax_rows(&self.logits(x, y, &noise)?))
    }
}

/// An undefended classifier evaluated on clean inputs.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierPipeline<'a>(pub &'a GuidanceClassifier);

impl Pipeline for ClassifierPipeline<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn draw_noise(&self, _: &[usize], _: &mut Rng) -> Vec<Tensor> {
        Vec::new()
    }

    fn logits_var(&self, g: &mut Graph, x: Var, _: &[usize], noise: &[Tensor]) -> Result<Var> {
        if !noise.is_empty() {
            return Err(Error::invalid("a bare classifier takes no noise"));
        }
        let bound = self.0.bind(g, false)?;
        bound.forward_at(g, x, 0.0)
    }
}

/// Purification followed by a downstream classifier at time 0.
#[derive(Clone, Copy, Debug)]
pub struct PurifiedClassifier<'a> {
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a Denoiser,
    pub guide: &'a GuidanceClassifier,
    pub classifier: &'a GuidanceClassifier,
    pub config: &'a PurifyConfig,
}

impl PurifiedClassifier<'_> {
    fn hint<'y>(&self, y: &'y [usize]) -> Option<&'y [usize]> {
        (!y.is_empty()).then_some(y)
    }

    /// Purified inputs under frozen `noise`, without recording a graph.
    pub fn purified(&self, x: &Tensor, y: &[usize], noise: &[Tensor]) -> Result<Tensor> {
        let (out, _) = purify_with_noise(
            self.schedule,
            self.denoiser,
            self.guide,
            x,
            self.hint(y),
            self.config,
            noise,
        )?;
        Ok(out)
    }
}

impl Pipeline for PurifiedClassifier<'_> {
    fn input_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    fn draw_noise(&self, shape: &[usize], rng: &mut Rng) -> Vec<Tensor> {
        draw_noise_plan(shape, self.config, rng)
    }

    fn logits_var(&self, g: &mut Graph, x: Var, y: &[usize], noise: &[Tensor]) -> Result<Var> {
        let model = self.denoiser.bind(g, false)?;
        let guide = self.guide.bind(g, false)?;
        let out = differentiable_purify(
            g,
            self.schedule,
            &model,
            &guide,
            x,
            self.hint(y),
            self.config,
            noise,
        )?;
        let clf = self.classifier.bind(g, false)?;
        clf.forward_at(g, out, 0.0)
    }

    // Stepwise graphs keep memory flat when no gradient is needed.
    fn logits(&self, x: &Tensor, y: &[usize], noise: &[Tensor]) -> Result<Tensor> {
        self.classifier.logits(&self.purified(x, y, noise)?)
    }
}
