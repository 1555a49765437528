//! Diffuse-then-guided-denoise purification, in ancestral and SDE form.
//!
//! Every sampler consumes a fixed list of standard-normal draws ("noise
//! plan"). `purify` draws the plan from an [`Rng`]; `differentiable_purify`
//! takes it from the caller so that the map `x_adv → x_0` is deterministic
//! and can be differentiated end to end.

mod sde;

pub use sde::{euler_maruyama_step, reverse_euler_maruyama, LinearSde, VpSde};

use serde::{Deserialize, Serialize};

use crate::diffusion::{add_step_noise, posterior_mean_var, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{
    argmax_rows, discrepancy_guidance_var, label_guidance_var, BoundClassifier, DistanceMeasure,
    GuidanceClassifier,
};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    LabelOnly,
    DiscrepancyOnly,
    #[default]
    Full,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [
        GuidanceMode::None,
        GuidanceMode::LabelOnly,
        GuidanceMode::DiscrepancyOnly,
        GuidanceMode::Full,
    ];

    pub fn uses_label(self) -> bool {
        matches!(self, GuidanceMode::LabelOnly | GuidanceMode::Full)
    }

    pub fn uses_discrepancy(self) -> bool {
        matches!(self, GuidanceMode::DiscrepancyOnly | GuidanceMode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::LabelOnly => "label_only",
            GuidanceMode::DiscrepancyOnly => "discrepancy_only",
            GuidanceMode::Full => "full",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown guidance mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    TrueLabel,
    #[default]
    Predicted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Ancestral,
    Sde,
}

/// `t*` for a `steps`-long schedule, scaled from 70 of 1000.
pub fn scaled_t_star(steps: usize) -> usize {
    ((70.0 * steps as f64 / 1000.0).round() as usize).clamp(1, steps.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifyConfig {
    pub t_star: usize,
    pub s: f64,
    pub distance: DistanceMeasure,
    pub guidance_mode: GuidanceMode,
    pub label_source: LabelSource,
    pub sampler: Sampler,
    pub sde_substeps: usize,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            t_star: scaled_t_star(200),
            s: 1.0,
            distance: DistanceMeasure::KlSoftmax,
            guidance_mode: GuidanceMode::Full,
            label_source: LabelSource::Predicted,
            sampler: Sampler::Ancestral,
            sde_substeps: 4 * scaled_t_star(200),
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_star == 0 || self.t_star > schedule.steps() {
            return Err(Error::OutOfRange {
                what: "t_star",
                index: self.t_star,
                limit: schedule.steps() + 1,
            });
        }
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {}", self.s)));
        }
        if self.sampler == Sampler::Sde && self.sde_substeps < self.t_star {
            return Err(Error::invalid(format!(
                "sde_substeps ({}) must be at least t_star ({})",
                self.sde_substeps, self.t_star
            )));
        }
        Ok(())
    }

    /// Number of standard-normal tensors one purification consumes.
    pub fn noise_len(&self) -> usize {
        match self.sampler {
            Sampler::Ancestral => self.t_star,
            Sampler::Sde => self.sde_substeps,
        }
    }

    fn guided(&self) -> bool {
        self.s != 0.0 && self.guidance_mode != GuidanceMode::None
    }
}

/// Mean-shift magnitudes of one reverse step, averaged over rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub label_shift: f64,
    pub discrepancy_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifyTrace {
    pub steps: Vec<StepRecord>,
    pub output: Tensor,
}

pub fn diffuse_with_noise(
    schedule: &NoiseSchedule,
    x_adv: &Tensor,
    t_star: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    check_t_star(schedule, t_star)?;
    crate::diffusion::q_sample(schedule, x_adv, t_star - 1, eps)
}

/// `√ᾱ_{t*}·x_adv + √(1 − ᾱ_{t*})·ε` with fresh `ε`.
pub fn diffuse_to_tstar(
    schedule: &NoiseSchedule,
    x_adv: &Tensor,
    t_star: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_t_star(schedule, t_star)?;
    let eps = rng.normal_tensor(x_adv.shape());
    diffuse_with_noise(schedule, x_adv, t_star, &eps)
}

fn check_t_star(schedule: &NoiseSchedule, t_star: usize) -> Result<()> {
    if t_star == 0 || t_star > schedule.steps() {
        return Err(Error::OutOfRange {
            what: "t_star",
            index: t_star,
            limit: schedule.steps() + 1,
        });
    }
    Ok(())
}

/// Guidance inputs fixed for a whole purification.
struct Guide<'a> {
    clf: &'a BoundClassifier,
    labels: Option<&'a [usize]>,
    adv_logits: Option<Var>,
    s: f64,
    mode: GuidanceMode,
    distance: DistanceMeasure,
}

impl<'a> Guide<'a> {
    fn new(
        clf: &'a BoundClassifier,
        labels: Option<&'a [usize]>,
        adv_logits: Option<Var>,
        config: &PurifyConfig,
    ) -> Self {
        Self {
            clf,
            labels,
            adv_logits,
            s: config.s,
            mode: config.guidance_mode,
            distance: config.distance,
        }
    }

    fn active(&self) -> bool {
        self.s != 0.0 && self.mode != GuidanceMode::None
    }
}

fn mean_row_norm(t: &Tensor, scale: f64) -> f64 {
    let n = t.rows().max(1);
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        * scale.abs()
        / n as f64
}

/// `c·(g − ∇D)` at `x` on the classifier's time axis `tc`; `None` when no
/// term is active.
fn guidance_shift(
    g: &mut Graph,
    guide: &Guide<'_>,
    x: Var,
    tc: f64,
    c: f64,
    record: &mut StepRecord,
) -> Result<Option<Var>> {
    let mut shift = None;
    if guide.mode.uses_label() {
        let y = guide
            .labels
            .ok_or_else(|| Error::invalid("label guidance needs labels"))?;
        let a = label_guidance_var(g, guide.clf, x, y, tc)?;
        record.label_shift = mean_row_norm(g.value(a), c);
        shift = Some(g.scale(a, c)?);
    }
    if guide.mode.uses_discrepancy() {
        let adv = guide
            .adv_logits
            .ok_or_else(|| Error::invalid("discrepancy guidance needs x_adv"))?;
        let d = discrepancy_guidance_var(g, guide.clf, adv, x, tc, guide.distance)?;
        record.discrepancy_shift = mean_row_norm(g.value(d), c);
        let b = g.scale(d, -c)?;
        shift = Some(match shift {
            Some(a) => g.add(a, b)?,
            None => b,
        });
    }
    Ok(shift)
}

/// One guided ancestral step recorded on `g`:
/// `μ + s·σ_t²·(g − ∇D) + σ_t·z`, with no noise at `t = 0`.
fn ancestral_step_var(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    guide: Option<&Guide<'_>>,
    x_t: Var,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<(Var, StepRecord)> {
    let mu = posterior_mean_var(g, schedule, model, x_t, t)?;
    let mut record = StepRecord {
        t,
        label_shift: 0.0,
        discrepancy_shift: 0.0,
    };
    let mean = match guide {
        Some(gd) if gd.active() => {
            let c = gd.s * schedule.sigma(t).powi(2);
            let shift = if c != 0.0 {
                guidance_shift(g, gd, x_t, t as f64, c, &mut record)?
            } else {
                None
            };
            match shift {
                Some(shift) => g.add(mu, shift)?,
                None => mu,
            }
        }
        _ => mu,
    };
    let out = add_step_noise(g, schedule, mean, t, noise)?;
    Ok((out, record))
}

/// Score `s_θ + s·(g − ∇D)` for the SDE sampler at continuous time `tau`.
fn sde_score(
    g: &mut Graph,
    sde: &VpSde,
    model: &dyn NoisePredictor,
    guide: Option<&Guide<'_>>,
    x: Var,
    tau: f64,
    record: &mut StepRecord,
) -> Result<Var> {
    let n = g.shape(x)[0];
    let tc = sde.discrete_time(tau);
    let eps = model.predict_noise(g, x, &vec![tc; n])?;
    let score = g.scale(eps, -1.0 / (1.0 - sde.alpha_bar(tau)).sqrt())?;
    Ok(match guide {
        Some(gd) if gd.active() => match guidance_shift(g, gd, x, tc, gd.s, record)? {
            Some(shift) => g.add(score, shift)?,
            None => score,
        },
        _ => score,
    })
}

/// One entry of a reverse-sampler plan.
#[derive(Clone, Copy, Debug)]
enum Step {
    Ancestral { t: usize },
    Sde { tau: f64, h: f64 },
}

/// The reverse plan from `t_star` and whether each step consumes noise.
fn plan(schedule: &NoiseSchedule, sampler: Sampler, t_star: usize, substeps: usize) -> Vec<(Step, bool)> {
    match sampler {
        Sampler::Ancestral => (0..t_star)
            .rev()
            .map(|t| (Step::Ancestral { t }, t > 0))
            .collect(),
        Sampler::Sde => {
            let tau0 = t_star as f64 / schedule.steps() as f64;
            let h = tau0 / substeps as f64;
            (0..substeps)
                .map(|k| {
                    (
                        Step::Sde {
                            tau: tau0 - k as f64 * h,
                            h,
                        },
                        k + 1 < substeps,
                    )
                })
                .collect()
        }
    }
}

fn run_step(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    guide: Option<&Guide<'_>>,
    x: Var,
    step: Step,
    noise: Option<&Tensor>,
) -> Result<(Var, StepRecord)> {
    match step {
        Step::Ancestral { t } => ancestral_step_var(g, schedule, model, guide, x, t, noise),
        Step::Sde { tau, h } => {
            let sde = VpSde::from_schedule(schedule);
            let mut record = StepRecord {
                t: sde.discrete_time(tau).round() as usize,
                label_shift: 0.0,
                discrepancy_shift: 0.0,
            };
            let out = euler_maruyama_step(
                g,
                &sde,
                |g, x, tau| sde_score(g, &sde, model, guide, x, tau, &mut record),
                x,
                tau,
                h,
                noise,
            )?;
            Ok((out, record))
        }
    }
}

/// Labels for label guidance, or `None` when the mode does not need them.
fn resolve_labels(
    clf: &GuidanceClassifier,
    adv_logits: &Tensor,
    y_hint: Option<&[usize]>,
    config: &PurifyConfig,
) -> Result<Option<Vec<usize>>> {
    if !config.guided() || !config.guidance_mode.uses_label() {
        return Ok(None);
    }
    match config.label_source {
        LabelSource::Predicted => Ok(Some(argmax_rows(adv_logits))),
        LabelSource::TrueLabel => {
            let y = y_hint
                .ok_or_else(|| Error::invalid("label_source = true_label requires y_hint"))?;
            if y.len() != adv_logits.rows() {
                return Err(Error::shape("purify", "one label per row required"));
            }
            clf.check_labels(y)?;
            Ok(Some(y.to_vec()))
        }
    }
}

/// Runs `steps` with a fresh graph per step. In the values it produces this
/// is identical to running them on one graph.
#[allow(clippy::too_many_arguments)]
fn run_stepwise(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: Option<&GuidanceClassifier>,
    adv_logits: Option<&Tensor>,
    labels: Option<&[usize]>,
    config: &PurifyConfig,
    x_start: Tensor,
    steps: &[(Step, bool)],
    step_noise: &[Tensor],
) -> Result<(Tensor, Vec<StepRecord>)> {
    let mut x = x_start;
    let mut records = Vec::with_capacity(steps.len());
    let mut k = 0;
    for &(step, noisy) in steps {
        let mut g = Graph::new();
        let bound = clf.map(|c| c.bind(&mut g, false)).transpose()?;
        let adv = adv_logits.map(|a| g.constant(a.clone())).transpose()?;
        let guide = bound.as_ref().map(|b| Guide::new(b, labels, adv, config));
        let xv = g.constant(x)?;
        let z = if noisy {
            k += 1;
            Some(&step_noise[k - 1])
        } else {
            None
        };
        let (next, rec) = run_step(&mut g, schedule, model, guide.as_ref(), xv, step, z)?;
        records.push(rec);
        x = g.value(next).clone();
    }
    Ok((x, records))
}

/// Guided ancestral step with caller-supplied noise.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step_with_noise(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &GuidanceClassifier,
    x_t: &Tensor,
    t: usize,
    y: Option<&[usize]>,
    x_adv: &Tensor,
    config: &PurifyConfig,
    noise: Option<&Tensor>,
) -> Result<(Tensor, StepRecord)> {
    schedule.check_t(t)?;
    if x_adv.shape() != x_t.shape() {
        return Err(Error::shape("guided_reverse_step", "x_adv and x_t differ in shape"));
    }
    if let Some(y) = y {
        clf.check_labels(y)?;
    }
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let adv = if config.guidance_mode.uses_discrepancy() {
        Some(g.constant(clf.logits(x_adv)?)?)
    } else {
        None
    };
    let guide = Guide::new(&bound, y, adv, config);
    let x = g.constant(x_t.clone())?;
    let (out, rec) = ancestral_step_var(&mut g, schedule, model, Some(&guide), x, t, noise)?;
    Ok((g.value(out).clone(), rec))
}

#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &GuidanceClassifier,
    x_t: &Tensor,
    t: usize,
    y: Option<&[usize]>,
    x_adv: &Tensor,
    config: &PurifyConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let noise = crate::diffusion::draw_step_noise(x_t.shape(), t, rng);
    let (out, _) = guided_reverse_step_with_noise(
        schedule,
        model,
        clf,
        x_t,
        t,
        y,
        x_adv,
        config,
        noise.as_ref(),
    )?;
    Ok(out)
}

/// Draws the noise plan for one purification of a `shape` batch.
pub fn draw_noise_plan(shape: &[usize], config: &PurifyConfig, rng: &mut Rng) -> Vec<Tensor> {
    (0..config.noise_len()).map(|_| rng.normal_tensor(shape)).collect()
}

fn check_plan(shape: &[usize], config: &PurifyConfig, noise: &[Tensor]) -> Result<()> {
    if noise.len() != config.noise_len() {
        return Err(Error::invalid(format!(
            "noise plan has {} entries, expected {}",
            noise.len(),
            config.noise_len()
        )));
    }
    if noise.iter().any(|z| z.shape() != shape) {
        return Err(Error::shape("purify", "noise plan entries must match the input shape"));
    }
    Ok(())
}

/// Purification with an explicit noise plan: `noise[0]` diffuses `x_adv`
/// to `t*`; the rest feed the reverse sampler in order.
#[allow(clippy::too_many_arguments)]
pub fn purify_with_noise(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &GuidanceClassifier,
    x_adv: &Tensor,
    y_hint: Option<&[usize]>,
    config: &PurifyConfig,
    noise: &[Tensor],
) -> Result<(Tensor, PurifyTrace)> {
    config.validate(schedule)?;
    check_plan(x_adv.shape(), config, noise)?;
    let adv_logits = clf.logits(x_adv)?;
    let labels = resolve_labels(clf, &adv_logits, y_hint, config)?;
    let x_start = diffuse_with_noise(schedule, x_adv, config.t_star, &noise[0])?;
    let steps = plan(schedule, config.sampler, config.t_star, config.sde_substeps);
    let (out, records) = run_stepwise(
        schedule,
        model,
        Some(clf),
        Some(&adv_logits),
        labels.as_deref(),
        config,
        x_start,
        &steps,
        &noise[1..],
    )?;
    Ok((
        out.clone(),
        PurifyTrace {
            steps: records,
            output: out,
        },
    ))
}

/// Diffuses `x_adv` to `t*` and runs the guided reverse process down to 0.
pub fn purify(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &GuidanceClassifier,
    x_adv: &Tensor,
    y_hint: Option<&[usize]>,
    config: &PurifyConfig,
    rng: &mut Rng,
) -> Result<(Tensor, PurifyTrace)> {
    config.validate(schedule)?;
    let noise = draw_noise_plan(x_adv.shape(), config, rng);
    purify_with_noise(schedule, model, clf, x_adv, y_hint, config, &noise)
}

/// Euler–Maruyama integration of the guided reverse VP-SDE from `x_start`
/// at `τ = t*/T` down to 0, with `config.sde_substeps` uniform substeps.
/// Both networks receive fractional times.
#[allow(clippy::too_many_arguments)]
pub fn sde_guided_reverse(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &GuidanceClassifier,
    x_start: &Tensor,
    t_star: usize,
    y: Option<&[usize]>,
    x_adv: &Tensor,
    config: &PurifyConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let config = PurifyConfig {
        t_star,
        sampler: Sampler::Sde,
        ..config.clone()
    };
    config.validate(schedule)?;
    if x_adv.shape() != x_start.shape() {
        return Err(Error::shape("sde_guided_reverse", "x_adv and x_start differ in shape"));
    }
    let adv_logits = clf.logits(x_adv)?;
    let labels = match y {
        Some(y) => {
            clf.check_labels(y)?;
            Some(y.to_vec())
        }
        None => resolve_labels(clf, &adv_logits, None, &config)?,
    };
    let noise: Vec<Tensor> = (1..config.sde_substeps)
        .map(|_| rng.normal_tensor(x_start.shape()))
        .collect();
    let steps = plan(schedule, Sampler::Sde, t_star, config.sde_substeps);
    let (out, _) = run_stepwise(
        schedule,
        model,
        Some(clf),
        Some(&adv_logits),
        labels.as_deref(),
        &config,
        x_start.clone(),
        &steps,
        &noise,
    )?;
    Ok(out)
}

/// Unguided reverse VP-SDE from `x ~ N(0, I)` at `τ = 1` down to 0.
pub fn sde_sample_unconditional(
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    n: usize,
    substeps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if substeps < schedule.steps() {
        return Err(Error::invalid("substeps must be at least the schedule length"));
    }
    let d = model.data_dim();
    let x0 = rng.normal_tensor(&[n, d]);
    if n == 0 {
        return Ok(x0);
    }
    let noise: Vec<Tensor> = (1..substeps).map(|_| rng.normal_tensor(&[n, d])).collect();
    let config = PurifyConfig {
        t_star: schedule.steps(),
        sampler: Sampler::Sde,
        sde_substeps: substeps,
        guidance_mode: GuidanceMode::None,
        ..Default::default()
    };
    let steps = plan(schedule, Sampler::Sde, schedule.steps(), substeps);
    let (out, _) = run_stepwise(schedule, model, None, None, None, &config, x0, &steps, &noise)?;
    Ok(out)
}

/// Purification recorded on `g` so that gradients flow from the output back
/// to `x_adv` through every step, including the guidance terms. `noise` is
/// the full plan (see [`purify_with_noise`]); the predicted label, when
/// used, is read from the current value of `x_adv`.
#[allow(clippy::too_many_arguments)]
pub fn differentiable_purify(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    clf: &BoundClassifier,
    x_adv: Var,
    y_hint: Option<&[usize]>,
    config: &PurifyConfig,
    noise: &[Tensor],
) -> Result<Var> {
    config.validate(schedule)?;
    let shape = g.shape(x_adv).to_vec();
    check_plan(&shape, config, noise)?;
    let adv_logits = clf.forward_at(g, x_adv, 0.0)?;
    let labels = if config.guided() && config.guidance_mode.uses_label() {
        match config.label_source {
            LabelSource::Predicted => Some(argmax_rows(g.value(adv_logits))),
            LabelSource::TrueLabel => {
                let y = y_hint
                    .ok_or_else(|| Error::invalid("label_source = true_label requires y_hint"))?;
                crate::guidance::check_labels(y, clf.class_count())?;
                Some(y.to_vec())
            }
        }
    } else {
        None
    };
    let a = schedule.alpha_bar(config.t_star - 1);
    let scaled = g.scale(x_adv, a.sqrt())?;
    let eps = g.constant(noise[0].scale((1.0 - a).sqrt()))?;
    let mut x = g.add(scaled, eps)?;
    let guide = Guide::new(clf, labels.as_deref(), Some(adv_logits), config);
    let steps = plan(schedule, config.sampler, config.t_star, config.sde_substeps);
    let mut k = 1;
    for (step, noisy) in steps {
        let z = if noisy {
            k += 1;
            Some(&noise[k - 1])
        } else {
            None
        };
        x = run_step(g, schedule, model, Some(&guide), x, step, z)?.0;
    }
    Ok(x)
}
