use serde::{Deserialize, Serialize};

use super::{check_labels, BoundClassifier, GuidanceClassifier};
use crate::attacks::{ascent_direction, project_ball, random_in_ball, Norm};
use crate::diffusion::{q_sample_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::optim::{Optimizer, OptimizerKind};
use crate::tensor::{nll_rows, Graph, Tensor, Var};

const INIT_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustTrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub inner_steps: usize,
    /// `None` means `epsilon / 4`.
    pub inner_step_size: Option<f64>,
    pub norm: Norm,
    /// Start the inner search from a small Gaussian draw instead of zero.
    pub inner_random_start: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub noise_augment: bool,
    /// Augmented copies draw `t` uniformly below this bound (default: the full schedule).
    pub augment_max_t: Option<usize>,
    /// Apply the discrepancy term to the diffused copies as well as the clean rows.
    pub robust_noisy: bool,
    pub seed: u64,
}

impl Default for RobustTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 6.0,
            epsilon: 0.5,
            inner_steps: 10,
            inner_step_size: None,
            norm: Norm::LInf,
            inner_random_start: true,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            noise_augment: true,
            augment_max_t: None,
            robust_noisy: true,
            seed: 0,
        }
    }
}

impl RobustTrainConfig {
    pub fn step_size(&self) -> f64 {
        self.inner_step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::invalid("lambda and epsilon must be non-negative"));
        }
        if self.epsilon > 0.0 && self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1 when epsilon > 0"));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Separate terms of the robust objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradesDiagnostics {
    pub loss: f64,
    pub cross_entropy: f64,
    pub discrepancy: f64,
}

fn initial_delta(shape: &[usize], config: &RobustTrainConfig, rng: &mut Rng) -> Tensor {
    if config.inner_random_start {
        let d = rng.normal_tensor(shape).scale(INIT_SCALE);
        project_ball(&d, config.epsilon, config.norm)
    } else {
        Tensor::zeros(shape)
    }
}

/// One projected ascent step on `δ ↦ D(f(x), f(x + δ))` from `delta`.
pub(crate) fn inner_ascent_step(
    clf: &GuidanceClassifier,
    clean_logits: &Tensor,
    x: &Tensor,
    ts: &[f64],
    delta: &Tensor,
    config: &RobustTrainConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let p = g.constant(clean_logits.clone())?;
    let xv = g.constant(x.clone())?;
    let dv = g.constant(delta.clone())?;
    let xin = g.add(xv, dv)?;
    let q = bound.forward(&mut g, xin, ts)?;
    let rows = clf.distance().rows(&mut g, p, q)?;
    let total = g.sum(rows)?;
    let grad = g.input_gradient(total, dv)?;
    let step = ascent_direction(&grad, config.norm).scale(config.step_size());
    Ok(project_ball(&delta.add(&step)?, config.epsilon, config.norm))
}

/// Approximate `argmax_{‖δ‖ ≤ ε} D(f(x), f(x + δ))` by projected ascent.
pub fn inner_max_perturbation(
    clf: &GuidanceClassifier,
    x: &Tensor,
    ts: &[f64],
    config: &RobustTrainConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    if config.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let clean = clf.logits_at(x, ts)?;
    let mut delta = initial_delta(x.shape(), config, rng);
    for _ in 0..config.inner_steps {
        delta = inner_ascent_step(clf, &clean, x, ts, &delta, config)?;
    }
    Ok(delta)
}

fn trades_var(
    g: &mut Graph,
    bound: &BoundClassifier,
    clf: &GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    ts: &[f64],
    config: &RobustTrainConfig,
    rng: &mut Rng,
) -> Result<(Var, Var, Option<Var>)> {
    let n = x.rows() as f64;
    let xv = g.constant(x.clone())?;
    let logits = bound.forward(g, xv, ts)?;
    let nll = nll_rows(g, logits, y)?;
    let ce_sum = g.sum(nll)?;
    let ce = g.scale(ce_sum, 1.0 / n)?;
    if config.lambda == 0.0 || config.epsilon == 0.0 {
        return Ok((ce, ce, None));
    }
    let (x, ts, logits, n) = if config.robust_noisy || ts.iter().all(|&t| t == 0.0) {
        (x.clone(), ts.to_vec(), logits, n)
    } else {
        let rows: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] == 0.0).collect();
        if rows.is_empty() {
            return Ok((ce, ce, None));
        }
        let xc = x.select_rows(&rows);
        let tc = vec![0.0; rows.len()];
        let xv = g.constant(xc.clone())?;
        let logits = bound.forward(g, xv, &tc)?;
        (xc, tc, logits, rows.len() as f64)
    };
    let delta = inner_max_perturbation(clf, &x, &ts, config, rng)?;
    let xp = g.constant(x.add(&delta)?)?;
    let logits_p = bound.forward(g, xp, &ts)?;
    let d_rows = clf.distance().rows(g, logits, logits_p)?;
    let d_sum = g.sum(d_rows)?;
    let d = g.scale(d_sum, 1.0 / n)?;
    let weighted = g.scale(d, config.lambda)?;
    let loss = g.add(ce, weighted)?;
    Ok((loss, ce, Some(d)))
}

fn check_batch(clf: &GuidanceClassifier, x: &Tensor, y: &[usize], ts: &[f64]) -> Result<()> {
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if y.len() != x.rows() || ts.len() != x.rows() {
        return Err(Error::shape("trades_loss", "labels and timesteps must match the batch"));
    }
    check_labels(y, clf.class_count())
}

/// `CE(f(x), y) + λ · D(f(x), f(x + δ*))`, both terms averaged over rows.
pub fn trades_loss(
    clf: &GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    ts: &[f64],
    config: &RobustTrainConfig,
    rng: &mut Rng,
) -> Result<(f64, TradesDiagnostics)> {
    check_batch(clf, x, y, ts)?;
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let (loss, ce, d) = trades_var(&mut g, &bound, clf, x, y, ts, config, rng)?;
    let diag = TradesDiagnostics {
        loss: g.value(loss).item(),
        cross_entropy: g.value(ce).item(),
        discrepancy: d.map(|d| g.value(d).item()).unwrap_or(0.0),
    };
    Ok((diag.loss, diag))
}

/// Clean rows at `t = 0`, plus (with augmentation) a diffused copy of every
/// row at a uniform random `t`.
fn training_batch(
    x: &Tensor,
    y: &[usize],
    schedule: Option<&NoiseSchedule>,
    config: &RobustTrainConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
    let n = x.rows();
    let mut ts = vec![0.0; n];
    if !config.noise_augment {
        return Ok((x.clone(), y.to_vec(), ts));
    }
    let schedule = schedule.expect("validated by caller");
    let bound = config
        .augment_max_t
        .unwrap_or(schedule.steps())
        .clamp(1, schedule.steps());
    let steps: Vec<usize> = (0..n).map(|_| rng.below(bound)).collect();
    let eps = rng.normal_tensor(x.shape());
    let noisy = q_sample_rows(schedule, x, &steps, &eps)?;
    ts.extend(steps.iter().map(|&t| t as f64));
    let mut labels = y.to_vec();
    labels.extend_from_slice(y);
    Ok((x.concat_rows(&noisy)?, labels, ts))
}

pub(crate) const GUIDANCE_STREAM: u64 = 0x6775_6964_6500;

fn train_loop<F>(
    clf: &mut GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    schedule: Option<&NoiseSchedule>,
    config: &RobustTrainConfig,
    stream: u64,
    mut objective: F,
) -> Result<Vec<f64>>
where
    F: FnMut(
        &mut Graph,
        &BoundClassifier,
        &GuidanceClassifier,
        &Tensor,
        &[usize],
        &[f64],
        &mut Rng,
    ) -> Result<Var>,
{
    config.validate()?;
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if y.len() != x.rows() || x.cols() != clf.input_dim() {
        return Err(Error::shape("train_guidance", "data and labels do not fit the classifier"));
    }
    clf.check_labels(y)?;
    if config.noise_augment && schedule.is_none() {
        return Err(Error::invalid("noise augmentation needs a schedule"));
    }
    let mut rng = Rng::new(config.seed, stream);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = rng.permutation(x.rows());
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let bx = x.select_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let step = (|| -> Result<f64> {
                let (bx, by, ts) = training_batch(&bx, &by, schedule, config, &mut rng)?;
                let mut g = Graph::new();
                let bound = clf.bind(&mut g, true)?;
                let loss = objective(&mut g, &bound, clf, &bx, &by, &ts, &mut rng)?;
                let value = g.value(loss).item();
                g.backpropagate(loss, &Tensor::scalar(1.0))?;
                let grads = bound.mlp().grads(&g);
                opt.step(clf.mlp_mut().parameters_mut(), &grads)?;
                Ok(value)
            })();
            match step {
                Ok(v) => total += v,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.push(mean);
    }
    Ok(trace)
}

/// Minimizes [`trades_loss`]; `schedule` is required when `noise_augment` is set.
pub fn train_guidance(
    clf: &mut GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    schedule: Option<&NoiseSchedule>,
    config: &RobustTrainConfig,
) -> Result<Vec<f64>> {
    train_loop(clf, x, y, schedule, config, GUIDANCE_STREAM, |g, bound, clf, bx, by, ts, rng| {
        Ok(trades_var(g, bound, clf, bx, by, ts, config, rng)?.0)
    })
}

/// PGD on cross-entropy against the current parameters (inner solver of
/// adversarial training).
fn ce_perturbation(
    clf: &GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    ts: &[f64],
    config: &RobustTrainConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    if config.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut delta = if config.inner_random_start {
        random_in_ball(x.shape(), config.epsilon, config.norm, rng)
    } else {
        Tensor::zeros(x.shape())
    };
    for _ in 0..config.inner_steps {
        let mut g = Graph::new();
        let bound = clf.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let dv = g.constant(delta.clone())?;
        let xin = g.add(xv, dv)?;
        let logits = bound.forward(&mut g, xin, ts)?;
        let nll = nll_rows(&mut g, logits, y)?;
        let total = g.sum(nll)?;
        let grad = g.input_gradient(total, dv)?;
        let step = ascent_direction(&grad, config.norm).scale(config.step_size());
        delta = project_ball(&delta.add(&step)?, config.epsilon, config.norm);
    }
    Ok(delta)
}

/// Adversarial-training comparator: minimizes `CE(f(x + δ*), y)` with `δ*`
/// from PGD on the same loss. `lambda` is ignored.
pub fn train_at_baseline(
    clf: &mut GuidanceClassifier,
    x: &Tensor,
    y: &[usize],
    schedule: Option<&NoiseSchedule>,
    config: &RobustTrainConfig,
) -> Result<Vec<f64>> {
    train_loop(clf, x, y, schedule, config, GUIDANCE_STREAM, |g, bound, clf, bx, by, ts, rng| {
        let delta = ce_perturbation(clf, bx, by, ts, config, rng)?;
        let xv = g.constant(bx.add(&delta)?)?;
        let logits = bound.forward(g, xv, ts)?;
        let nll = nll_rows(g, logits, by)?;
        let total = g.sum(nll)?;
        g.scale(total, 1.0 / bx.rows() as f64)
    })
}
