//! DDPM forward process, denoiser training and ancestral sampling.
//!
//! Indexing is zero-based: the state "at `t`" is `x` after `t + 1` forward
//! noising steps, and a reverse step at `t` maps it to the state at `t − 1`
//! (or to data when `t = 0`).

mod denoiser;
mod schedule;

pub use denoiser::{BoundDenoiser, Denoiser, NoisePredictor, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
pub use schedule::{NoiseSchedule, SigmaMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Graph, Tensor, Var};

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let a = schedule.alpha_bar(t).sqrt();
    let b = (1.0 - schedule.alpha_bar(t)).sqrt();
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Row-wise [`q_sample`] with one timestep per row of `x0`.
pub fn q_sample_rows(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(Error::shape("q_sample", "rows, timesteps and noise must agree"));
    }
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let a = schedule.alpha_bar(t).sqrt();
        let b = (1.0 - schedule.alpha_bar(t)).sqrt();
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Coefficients `(1/√α_t, (1 − α_t) / (√(1 − ᾱ_t) √α_t))` of the reverse mean.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    let alpha = schedule.alpha(t);
    let c1 = 1.0 / alpha.sqrt();
    let one_minus = 1.0 - alpha;
    let c2 = if one_minus == 0.0 {
        0.0
    } else {
        one_minus / ((1.0 - schedule.alpha_bar(t)).sqrt() * alpha.sqrt())
    };
    (c1, c2)
}

/// Reverse mean `μ_θ(x_t, t)` recorded on `g`.
pub fn posterior_mean_var(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x_t: Var,
    t: usize,
) -> Result<Var> {
    schedule.check_t(t)?;
    let n = g.shape(x_t).first().copied().unwrap_or(0);
    let eps = model.predict_noise(g, x_t, &vec![t as f64; n])?;
    let (c1, c2) = posterior_coefficients(schedule, t);
    let a = g.scale(x_t, c1)?;
    let b = g.scale(eps, c2)?;
    g.sub(a, b)
}

pub fn posterior_mean(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_t.clone())?;
    let mu = posterior_mean_var(&mut g, schedule, model, x, t)?;
    Ok(g.value(mu).clone())
}

/// Adds `σ_t · noise` to a reverse mean; the final step (`t = 0`) adds nothing.
pub(crate) fn add_step_noise(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    mean: Var,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<Var> {
    match noise {
        Some(z) if t > 0 => {
            if z.shape() != g.shape(mean) {
                return Err(Error::shape(
                    "reverse_step",
                    format!("noise {:?} vs state {:?}", z.shape(), g.shape(mean)),
                ));
            }
            let z = g.constant(z.scale(schedule.sigma(t)))?;
            g.add(mean, z)
        }
        _ => Ok(mean),
    }
}

/// One ancestral step with caller-supplied standard-normal `noise`.
pub fn reverse_step_with_noise(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_t.clone())?;
    let mu = posterior_mean_var(&mut g, schedule, model, x, t)?;
    let out = add_step_noise(&mut g, schedule, mu, t, noise)?;
    Ok(g.value(out).clone())
}

/// Draws the standard-normal noise for a reverse step at `t` (none at `t = 0`).
pub fn draw_step_noise(shape: &[usize], t: usize, rng: &mut Rng) -> Option<Tensor> {
    (t > 0).then(|| rng.normal_tensor(shape))
}

/// Sample from `N(μ_θ(x_t, t), σ_t² I)`; exactly the mean at `t = 0`.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let noise = draw_step_noise(x_t.shape(), t, rng);
    reverse_step_with_noise(schedule, model, x_t, t, noise.as_ref())
}

/// Full ancestral chain from `x_{T−1} ~ N(0, I)` down to data: `[n, d]`.
pub fn sample_unconditional(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let d = model.data_dim();
    let mut x = rng.normal_tensor(&[n, d]);
    if n == 0 {
        return Ok(x);
    }
    for t in (0..schedule.steps()).rev() {
        x = reverse_step(schedule, model, &x, t, rng)?;
    }
    Ok(x)
}

/// `s_θ(x_t, t) = −ε_θ(x_t, t) / √(1 − ᾱ_t)`.
pub fn score_from_denoiser(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let mut g = Graph::new();
    let x = g.constant(x_t.clone())?;
    let eps = model.predict_noise(&mut g, x, &vec![t as f64; x_t.rows()])?;
    let scale = -1.0 / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(g.value(eps).scale(scale))
}

/// Records the noise-prediction loss `mean_i ‖ε_i − ε_θ(x_t,i, t_i)‖²` with
/// `t_i` uniform over the schedule and fresh `ε`.
pub fn ddpm_loss_var(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x0: &Tensor,
    rng: &mut Rng,
) -> Result<Var> {
    let n = x0.rows();
    if n == 0 || x0.is_empty() {
        return Err(Error::invalid("ddpm_loss needs a non-empty batch"));
    }
    let ts: Vec<usize> = (0..n).map(|_| rng.below(schedule.steps())).collect();
    let eps = rng.normal_tensor(x0.shape());
    let x_t = q_sample_rows(schedule, x0, &ts, &eps)?;
    let x_t = g.constant(x_t)?;
    let ts: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = model.predict_noise(g, x_t, &ts)?;
    let target = g.constant(eps)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}

pub fn ddpm_loss(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    x0: &Tensor,
    rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = ddpm_loss_var(&mut g, schedule, model, x0, rng)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl DiffTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Mean minibatch loss per epoch.
pub type TrainTrace = Vec<f64>;

pub(crate) const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

/// Minimizes [`ddpm_loss`] over `data` (`[n, d]`).
pub fn train_denoiser(
    schedule: &NoiseSchedule,
    model: &mut Denoiser,
    data: &Tensor,
    config: &DiffTrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.cols() != model.data_dim() {
        return Err(Error::shape(
            "train_denoiser",
            format!("data width {} vs model {}", data.cols(), model.data_dim()),
        ));
    }
    let mut rng = Rng::new(config.seed, TRAIN_STREAM);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = rng.permutation(data.rows());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select_rows(chunk);
            let step = (|| -> Result<f64> {
                let mut g = Graph::new();
                let bound = model.bind(&mut g, true)?;
                let loss = ddpm_loss_var(&mut g, schedule, &bound, &batch, &mut rng)?;
                let value = g.value(loss).item();
                g.backpropagate(loss, &Tensor::scalar(1.0))?;
                let grads = bound.mlp().grads(&g);
                opt.step(model.mlp_mut().parameters_mut(), &grads)?;
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
        if !mean.is_finite() || !model.mlp().parameters().iter().all(|p| p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        trace.push(mean);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::{Activation, Mlp};

    /// Denoiser whose every output is zero.
    fn zero_denoiser(d: usize) -> Denoiser {
        let embed = 4;
        let mlp = Mlp::from_parameters(
            vec![Tensor::zeros(&[d + embed, d])],
            vec![Tensor::zeros(&[d])],
            Activation::Silu,
        )
        .unwrap();
        Denoiser::from_mlp(mlp, d, embed).unwrap()
    }

    /// Predicts the exact injected noise when the clean data is zero.
    struct ZeroDataOracle<'a> {
        schedule: &'a NoiseSchedule,
        dim: usize,
    }

    impl NoisePredictor for ZeroDataOracle<'_> {
        fn data_dim(&self) -> usize {
            self.dim
        }
        fn predict_noise(&self, g: &mut Graph, x_t: Var, ts: &[f64]) -> Result<Var> {
            let mut out = g.value(x_t).clone();
            for (i, &t) in ts.iter().enumerate() {
                let s = (1.0 - self.schedule.alpha_bar(t as usize)).sqrt();
                for v in out.row_mut(i) {
                    *v /= s;
                }
            }
            g.constant(out)
        }
    }

    fn toy_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(3, 0.1, 0.3, SigmaMode::Posterior).unwrap()
    }

    #[test]
    fn q_sample_hand_values() {
        let s = toy_schedule();
        let x0 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let eps = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let x = q_sample(&s, &x0, 1, &eps).unwrap();
        assert!((x.data()[0] - 0.72f64.sqrt()).abs() < 1e-15);
        assert!((x.data()[1] - 0.28f64.sqrt()).abs() < 1e-15);
        assert!((x.data()[0] - 0.8485).abs() < 1e-4 && (x.data()[1] - 0.5292).abs() < 1e-4);
    }

    #[test]
    fn q_sample_zero_noise_and_identity_limit() {
        let s = toy_schedule();
        let x0 = Tensor::new(vec![1, 2], vec![2.0, -3.0]).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let x = q_sample(&s, &x0, 2, &zero).unwrap();
        assert_eq!(x, x0.scale(s.alpha_bar(2).sqrt()));

        let tiny = NoiseSchedule::linear(2, 1e-12, 1e-12, SigmaMode::Posterior).unwrap();
        let eps = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let x = q_sample(&tiny, &x0, 0, &eps).unwrap();
        assert!(x.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn q_sample_errors() {
        let s = toy_schedule();
        let x0 = Tensor::zeros(&[1, 2]);
        assert!(q_sample(&s, &x0, 3, &x0).is_err());
        assert!(q_sample(&s, &x0, 0, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn posterior_mean_hand_value() {
        // ε_θ ≡ 0.5 through the output bias.
        let embed = 4;
        let mlp = Mlp::from_parameters(
            vec![Tensor::zeros(&[1 + embed, 1])],
            vec![Tensor::vector(vec![0.5])],
            Activation::Silu,
        )
        .unwrap();
        let d = Denoiser::from_mlp(mlp, 1, embed).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let s2 = NoiseSchedule::from_betas(vec![0.2, 0.1], SigmaMode::Posterior).unwrap();
        assert!((s2.alpha_bar(1) - 0.72).abs() < 1e-15);
        let mu = posterior_mean(&s2, &d, &x, 1).unwrap();
        let want = 1.0 / 0.9f64.sqrt() - 0.1 / (0.28f64.sqrt() * 0.9f64.sqrt()) * 0.5;
        assert!((mu.item() - want).abs() < 1e-12);
        assert!((mu.item() - 0.9543).abs() < 5e-4);
    }

    #[test]
    fn posterior_mean_collapses() {
        let s = toy_schedule();
        let d = zero_denoiser(2);
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let mu = posterior_mean(&s, &d, &x, 2).unwrap();
        assert_eq!(mu, x.scale(1.0 / s.alpha(2).sqrt()));

        let ident = NoiseSchedule::from_betas(vec![0.0, 0.0], SigmaMode::Posterior).unwrap();
        let mu = posterior_mean(&ident, &d, &x, 1).unwrap();
        assert_eq!(mu, x);
        assert!(posterior_mean(&s, &d, &x, 3).is_err());
    }

    #[test]
    fn final_step_and_zero_sigma_are_deterministic() {
        let mut rng = Rng::new(3, 0);
        let model = Denoiser::with_architecture(2, &[8], 4, &mut rng).unwrap();
        let mut s = toy_schedule();
        let x = rng.normal_tensor(&[4, 2]);
        let mu = posterior_mean(&s, &model, &x, 0).unwrap();
        assert!(reverse_step(&s, &model, &x, 0, &mut rng).unwrap().bit_eq(&mu));

        s.override_sigma(vec![0.0; 3]).unwrap();
        for t in 0..3 {
            let mu = posterior_mean(&s, &model, &x, t).unwrap();
            assert!(reverse_step(&s, &model, &x, t, &mut rng).unwrap().bit_eq(&mu));
        }
        assert!(reverse_step(&s, &model, &x, 3, &mut rng).is_err());
    }

    #[test]
    fn reverse_step_variance_matches_sigma() {
        let s = toy_schedule();
        let model = zero_denoiser(1);
        let mut rng = Rng::new(5, 1);
        let n = 10_000;
        let x = Tensor::full(&[n, 1], 0.7);
        let out = reverse_step(&s, &model, &x, 2, &mut rng).unwrap();
        let mean = out.mean();
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = s.sigma(2).powi(2);
        assert!(((var - want) / want).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn sampling_edge_cases() {
        let s = toy_schedule();
        let model = zero_denoiser(2);
        let empty = sample_unconditional(&s, &model, 0, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
        let a = sample_unconditional(&s, &model, 5, &mut Rng::new(9, 0)).unwrap();
        let b = sample_unconditional(&s, &model, 5, &mut Rng::new(9, 0)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn score_hand_values() {
        let s = NoiseSchedule::from_betas(vec![0.25], SigmaMode::Posterior).unwrap();
        let embed = 4;
        let mlp = Mlp::from_parameters(
            vec![Tensor::zeros(&[2 + embed, 2])],
            vec![Tensor::vector(vec![1.0, -2.0])],
            Activation::Silu,
        )
        .unwrap();
        let d = Denoiser::from_mlp(mlp, 2, embed).unwrap();
        let score = score_from_denoiser(&s, &d, &Tensor::zeros(&[1, 2]), 0).unwrap();
        assert!((score.data()[0] + 2.0).abs() < 1e-12);
        assert!((score.data()[1] - 4.0).abs() < 1e-12);
        let zero = score_from_denoiser(&s, &zero_denoiser(2), &Tensor::zeros(&[1, 2]), 0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_of_perfect_and_zero_denoisers() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.1, SigmaMode::Posterior).unwrap();
        let x0 = Tensor::zeros(&[64, 3]);
        let oracle = ZeroDataOracle {
            schedule: &s,
            dim: 3,
        };
        let loss = ddpm_loss(&s, &oracle, &x0, &mut Rng::new(1, 0)).unwrap();
        assert!(loss < 1e-20, "{loss}");

        // E‖ε‖² = d for a model that predicts nothing.
        let x0 = Tensor::zeros(&[20_000, 3]);
        let loss = ddpm_loss(&s, &zero_denoiser(3), &x0, &mut Rng::new(2, 0)).unwrap();
        // sd of ‖ε‖² is √(2d); the mean over n rows has sd √(2d/n) ≈ 0.017.
        assert!((loss - 3.0).abs() < 4.0 * (6.0f64 / 20_000.0).sqrt(), "{loss}");

        let a = ddpm_loss(&s, &zero_denoiser(3), &x0, &mut Rng::new(4, 0)).unwrap();
        let b = ddpm_loss(&s, &zero_denoiser(3), &x0, &mut Rng::new(4, 0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(ddpm_loss(&s, &zero_denoiser(3), &Tensor::zeros(&[0, 3]), &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let s = toy_schedule();
        let mut rng = Rng::new(0, 0);
        let mut model = Denoiser::with_architecture(2, &[8], 4, &mut rng).unwrap();
        let before = model.clone();
        let data = rng.normal_tensor(&[16, 2]);
        let cfg = DiffTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let trace = train_denoiser(&s, &mut model, &data, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);
        assert!(train_denoiser(&s, &mut model, &Tensor::zeros(&[0, 2]), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let s = toy_schedule();
        let mut rng = Rng::new(0, 0);
        let mut model = Denoiser::with_architecture(1, &[8], 4, &mut rng).unwrap();
        let data = Tensor::full(&[8, 1], 1e300);
        let cfg = DiffTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(
            train_denoiser(&s, &mut model, &data, &cfg),
            Err(Error::Divergence { epoch: 0 })
        ));
    }
}
