//! PGD on a bare classifier and adaptive PGD+EOT through a stochastic
//! pipeline.

mod norm;
mod pipeline;

pub use norm::{ascent_direction, max_row_norm, project_ball, random_in_ball, Norm};
pub use pipeline::{ClassifierPipeline, Pipeline, PurifiedClassifier};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{check_labels, GuidanceClassifier};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

pub(crate) const ATTACK_STREAM: u64 = 0x5047_4400;

pub const CLASSIFIER_ONLY_STEPS: usize = 40;
pub const END_TO_END_STEPS: usize = 20;
pub const END_TO_END_EOT: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    #[default]
    ClassifierOnly,
    EndToEnd,
}

impl AttackTarget {
    pub fn name(self) -> &'static str {
        match self {
            AttackTarget::ClassifierOnly => "classifier_only",
            AttackTarget::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub eot_samples: Option<usize>,
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    #[serde(default)]
    pub target: AttackTarget,
    #[serde(default)]
    pub seed: u64,
}

fn default_random_start() -> bool {
    true
}

impl AttackSpec {
    /// 40 steps of size `ε/10` from a uniform start in the ball.
    pub fn classifier_only(epsilon: f64) -> Self {
        Self {
            name: String::new(),
            norm: Norm::LInf,
            epsilon,
            steps: None,
            step_size: None,
            eot_samples: None,
            random_start: true,
            target: AttackTarget::ClassifierOnly,
            seed: 0,
        }
        .materialized()
    }

    /// 20 steps of size `ε/8`, 10 EOT replicas per step.
    pub fn end_to_end(epsilon: f64) -> Self {
        Self {
            name: String::new(),
            target: AttackTarget::EndToEnd,
            steps: None,
            step_size: None,
            eot_samples: None,
            ..Self::classifier_only(epsilon)
        }
        .materialized()
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(match self.target {
            AttackTarget::ClassifierOnly => CLASSIFIER_ONLY_STEPS,
            AttackTarget::EndToEnd => END_TO_END_STEPS,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(match self.target {
            AttackTarget::ClassifierOnly => self.epsilon / 10.0,
            AttackTarget::EndToEnd => self.epsilon / 8.0,
        })
    }

    pub fn eot_samples(&self) -> usize {
        self.eot_samples.unwrap_or(match self.target {
            AttackTarget::ClassifierOnly => 1,
            AttackTarget::EndToEnd => END_TO_END_EOT,
        })
    }

    /// Label used in reports, derived from the settings when unnamed.
    pub fn label(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        match self.target {
            AttackTarget::ClassifierOnly => format!("pgd{}", self.steps()),
            AttackTarget::EndToEnd => format!("pgd{}_eot{}", self.steps(), self.eot_samples()),
        }
    }

    /// Copy with every defaulted field filled in.
    pub fn materialized(mut self) -> Self {
        self.steps = Some(self.steps());
        self.step_size = Some(self.step_size());
        self.eot_samples = Some(self.eot_samples());
        self.name = self.label();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if !(self.step_size() >= 0.0) || !self.step_size().is_finite() {
            return Err(Error::invalid("step_size must be a finite non-negative number"));
        }
        if self.eot_samples() == 0 {
            return Err(Error::invalid("eot_samples must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub success: Vec<bool>,
    /// Mean cross-entropy of each iterate, `steps + 1` entries.
    pub losses: Vec<f64>,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// `∇_x` of the summed cross-entropy of one replica, with its mean loss.
fn replica_gradient(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    noise: &[Tensor],
) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let logits = pipeline.logits_var(&mut g, xv, y, noise)?;
    let rows = crate::tensor::nll_rows(&mut g, logits, y)?;
    let total = g.sum(rows)?;
    let loss = g.value(total).item() / y.len().max(1) as f64;
    let grad = g.input_gradient(total, xv)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "attack gradient" });
    }
    Ok((grad, loss))
}

fn check_batch(pipeline: &dyn Pipeline, x: &Tensor, y: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != pipeline.input_dim() {
        return Err(Error::shape(
            "attack",
            format!("input {:?}, expected [n, {}]", x.shape(), pipeline.input_dim()),
        ));
    }
    if y.len() != x.rows() {
        return Err(Error::shape("attack", "one label per row required"));
    }
    Ok(())
}

/// Running mean of per-replica gradients under the given noise draws, with
/// the mean replica loss. Identical replicas reproduce the single gradient
/// bit for bit.
pub fn eot_gradient_with_noise(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    replicas: &[Vec<Tensor>],
) -> Result<(Tensor, f64)> {
    check_batch(pipeline, x, y)?;
    if replicas.is_empty() {
        return Err(Error::invalid("at least one EOT replica is required"));
    }
    let mut mean = Tensor::zeros(x.shape());
    let mut loss = 0.0;
    for (k, noise) in replicas.iter().enumerate() {
        let (grad, l) = replica_gradient(pipeline, x, y, noise)?;
        let w = 1.0 / (k + 1) as f64;
        mean = mean.zip_map(&grad, |m, g| m + (g - m) * w)?;
        loss += (l - loss) * w;
    }
    Ok((mean, loss))
}

/// EOT gradient with `spec.eot_samples()` independent noise draws.
pub fn eot_gradient(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<Tensor> {
    Ok(eot_step(pipeline, x, y, spec.eot_samples(), rng)?.0)
}

fn eot_step(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    samples: usize,
    rng: &mut Rng,
) -> Result<(Tensor, f64)> {
    let replicas: Vec<Vec<Tensor>> =
        (0..samples).map(|_| pipeline.draw_noise(x.shape(), rng)).collect();
    eot_gradient_with_noise(pipeline, x, y, &replicas)
}

fn mean_loss(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut loss = 0.0;
    for k in 0..samples {
        let noise = pipeline.draw_noise(x.shape(), rng);
        let logits = pipeline.logits(x, y, &noise)?;
        let lp = logits_to_nll(&logits, y);
        loss += (lp - loss) / (k + 1) as f64;
    }
    Ok(loss)
}

fn logits_to_nll(logits: &Tensor, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &c) in y.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    total / y.len().max(1) as f64
}

/// Projected gradient ascent on the EOT cross-entropy of `pipeline`.
/// `rng` drives the random start, the replica noise and the final
/// fresh-noise success check.
pub fn pgd_with_rng(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<AttackResult> {
    spec.validate()?;
    check_batch(pipeline, x, y)?;
    let (eps, norm) = (spec.epsilon, spec.norm);
    let samples = spec.eot_samples();
    let mut delta = if spec.random_start {
        random_in_ball(x.shape(), eps, norm, rng)
    } else {
        Tensor::zeros(x.shape())
    };
    let mut losses = Vec::with_capacity(spec.steps() + 1);
    for step in 0..spec.steps() {
        let x_adv = x.add(&delta)?;
        let (grad, loss) = eot_step(pipeline, &x_adv, y, samples, rng).map_err(|e| {
            Error::Attack {
                step,
                source: Box::new(e),
            }
        })?;
        losses.push(loss);
        let dir = ascent_direction(&grad, norm);
        let moved = delta.zip_map(&dir, |d, s| d + spec.step_size() * s)?;
        delta = project_ball(&moved, eps, norm);
    }
    let adversarial = x.add(&delta)?;
    let last = mean_loss(pipeline, &adversarial, y, samples, rng).map_err(|e| Error::Attack {
        step: spec.steps(),
        source: Box::new(e),
    })?;
    losses.push(last);
    let pred = pipeline.predict(&adversarial, y, rng)?;
    Ok(AttackResult {
        success: pred.iter().zip(y).map(|(p, t)| p != t).collect(),
        adversarial,
        losses,
    })
}

/// PGD against a bare classifier, seeded from `spec.seed`.
pub fn pgd_attack(
    clf: &GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.target != AttackTarget::ClassifierOnly {
        return Err(Error::invalid("pgd_attack needs a classifier_only spec"));
    }
    check_labels(y, clf.class_count())?;
    let mut rng = Rng::new(spec.seed, ATTACK_STREAM);
    pgd_with_rng(&ClassifierPipeline(clf), x, y, spec, &mut rng)
}

/// Adaptive PGD+EOT through a stochastic pipeline, seeded from `spec.seed`.
pub fn pgd_eot_attack(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.target != AttackTarget::EndToEnd {
        return Err(Error::invalid("pgd_eot_attack needs an end_to_end spec"));
    }
    let mut rng = Rng::new(spec.seed, ATTACK_STREAM);
    pgd_with_rng(pipeline, x, y, spec, &mut rng)
}

/// Fraction of rows where `pred` matches `y`.
pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}
