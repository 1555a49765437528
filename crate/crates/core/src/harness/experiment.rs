use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, AttackTarget, PurifiedClassifier};
use crate::diffusion::{train_denoiser, DiffTrainConfig, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{train_guidance, GuidanceClassifier, RobustTrainConfig};
use crate::harness::checkpoint::{
    load_classifier, load_denoiser, save_classifier, save_denoiser, ScheduleSpec,
};
use crate::harness::eval::{
    craft_adversarial, evaluate_with, EvalOptions, EvalReport, DEFAULT_EVAL_BATCH,
    DEFAULT_EVAL_SAMPLES,
};
use crate::harness::{generate_dataset, Dataset, DatasetSpec, Split};
use crate::tensor::optim::OptimizerKind;
use crate::purifier::{GuidanceMode, PurifyConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x696e_6974;

/// Plain cross-entropy training of the evaluated classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    fn as_robust(&self) -> RobustTrainConfig {
        RobustTrainConfig {
            lambda: 0.0,
            epsilon: 0.0,
            noise_augment: false,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: self.seed,
            ..RobustTrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub train_diffusion: bool,
    pub train_guidance: bool,
    pub attack: bool,
    pub evaluate: bool,
    pub report: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Stages {
    pub fn all(on: bool) -> Self {
        Self {
            train_diffusion: on,
            train_guidance: on,
            attack: on,
            evaluate: on,
            report: on,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub experiment_id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub diffusion: DiffTrainConfig,
    #[serde(default)]
    pub classifier: ClassifierTrainConfig,
    #[serde(default)]
    pub guidance: RobustTrainConfig,
    #[serde(default = "yes")]
    pub guidance_noise_conditioning: bool,
    /// `λ` values for the trade-off sweep; empty disables it.
    #[serde(default)]
    pub lambda_sweep: Vec<f64>,
    #[serde(default)]
    pub purify: PurifyConfig,
    #[serde(default = "all_modes")]
    pub guidance_modes: Vec<GuidanceMode>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub stages: Stages,
}

fn default_id() -> String {
    "experiment".into()
}

fn yes() -> bool {
    true
}

fn all_modes() -> Vec<GuidanceMode> {
    GuidanceMode::ALL.to_vec()
}

fn default_eval_samples() -> usize {
    DEFAULT_EVAL_SAMPLES
}

fn default_eval_batch() -> usize {
    DEFAULT_EVAL_BATCH
}

impl ExperimentConfig {
    /// A config with every default filled in and the given essentials.
    pub fn new(dataset: DatasetSpec, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            experiment_id: default_id(),
            seed,
            output_dir: output_dir.into(),
            dataset,
            schedule: ScheduleSpec::default(),
            diffusion: DiffTrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            guidance: RobustTrainConfig::default(),
            guidance_noise_conditioning: true,
            lambda_sweep: Vec::new(),
            purify: PurifyConfig::default(),
            guidance_modes: all_modes(),
            attacks: Vec::new(),
            eval_samples: DEFAULT_EVAL_SAMPLES,
            eval_batch: DEFAULT_EVAL_BATCH,
            stages: Stages::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copy with attack defaults materialized.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        c.attacks = c.attacks.into_iter().map(AttackSpec::materialized).collect();
        if c.guidance.inner_step_size.is_none() {
            c.guidance.inner_step_size = Some(c.guidance.epsilon / 4.0);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let schedule = self.schedule.build()?;
        self.purify.validate(&schedule)?;
        self.diffusion.validate()?;
        self.guidance.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        let mut names: Vec<String> = self.attacks.iter().map(|a| a.label()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("attack names must be unique"));
        }
        if self.eval_batch == 0 {
            return Err(Error::invalid("eval_batch must be ≥ 1"));
        }
        if self.lambda_sweep.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lambda_sweep values must be ≥ 0"));
        }
        Ok(())
    }
}

/// Standard and robust accuracy of one guidance classifier of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEval {
    /// The evaluated classifier without purification.
    pub undefended: Option<EvalReport>,
    /// Purification in each guidance mode, keyed by mode name.
    pub modes: BTreeMap<String, EvalReport>,
    pub lambda_sweep: Vec<LambdaPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub dataset: String,
    pub seed: u64,
    pub stages_run: Vec<String>,
    pub eval: Option<ExperimentEval>,
}

/// Output locations below `output_dir`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.checkpoints().join("denoiser.json")
    }
    pub fn classifier(&self) -> PathBuf {
        self.checkpoints().join("classifier.json")
    }
    pub fn guidance(&self) -> PathBuf {
        self.checkpoints().join("guidance.json")
    }
    pub fn guidance_lambda(&self, lambda: f64) -> PathBuf {
        self.checkpoints().join(format!("guidance_lambda_{lambda}.json"))
    }
    pub fn attack(&self, name: &str) -> PathBuf {
        self.root.join("attacks").join(format!("{name}.json"))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn lambda_plot(&self) -> PathBuf {
        self.root.join("plots").join("lambda_sweep.csv")
    }
    pub fn modes_plot(&self) -> PathBuf {
        self.root.join("plots").join("guidance_modes.csv")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// The models an experiment trains, once loaded or trained.
#[derive(Clone, Debug)]
pub struct Models {
    pub denoiser: Denoiser,
    pub classifier: GuidanceClassifier,
    pub guidance: GuidanceClassifier,
}

/// A configured experiment with its data and on-disk layout. Each stage is
/// a method; [`Experiment::run`] chains the enabled ones.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub data: Dataset,
    pub schedule: NoiseSchedule,
    timings: BTreeMap<String, f64>,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(name))
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let config = config.materialized();
        stage("config", || config.validate())?;
        let data = stage("dataset", || generate_dataset(&config.dataset))?;
        let schedule = config.schedule.build()?;
        Ok(Self {
            layout: Layout {
                root: config.output_dir.clone(),
            },
            config,
            data,
            schedule,
            timings: BTreeMap::new(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(stage("config", || ExperimentConfig::load(path))?)
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = stage(name, || f(self))?;
        *self.timings.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        Ok(out)
    }

    pub fn timings(&self) -> &BTreeMap<String, f64> {
        &self.timings
    }

    /// Held-out examples used for evaluation.
    pub fn eval_split(&self) -> Split {
        self.data.test.head(self.config.eval_samples)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            seed: self.config.seed,
            batch_size: self.config.eval_batch,
        }
    }

    fn init_rng(&self, which: u64) -> Rng {
        Rng::new(self.config.seed, INIT_STREAM ^ which)
    }

    /// Loads the denoiser checkpoint, training and saving it first when absent.
    pub fn train_diffusion(&mut self) -> Result<Denoiser> {
        self.timed("train-diffusion", |ex| {
            let path = ex.layout.denoiser();
            if path.exists() {
                let (model, spec) = load_denoiser(&path)?;
                if spec != ex.config.schedule {
                    return Err(Error::invalid(format!(
                        "{} was trained with a different schedule",
                        path.display()
                    )));
                }
                return Ok(model);
            }
            let mut rng = ex.init_rng(1);
            let mut model = Denoiser::new(ex.config.dataset.input_dim(), &mut rng)?;
            train_denoiser(&ex.schedule, &mut model, &ex.data.train.x, &ex.config.diffusion)?;
            std::fs::create_dir_all(ex.layout.checkpoints())?;
            save_denoiser(&path, &model, ex.config.schedule, ex.config.seed)?;
            Ok(model)
        })
    }

    fn load_or_train_classifier(
        &self,
        path: &Path,
        noise_conditioning: bool,
        config: &RobustTrainConfig,
        which: u64,
    ) -> Result<GuidanceClassifier> {
        if path.exists() {
            return load_classifier(path);
        }
        let spec = &self.config.dataset;
        let mut rng = self.init_rng(which);
        let mut clf =
            GuidanceClassifier::new(spec.input_dim(), spec.class_count, noise_conditioning, &mut rng)?;
        clf.set_distance(self.config.purify.distance);
        let schedule = config.noise_augment.then_some(&self.schedule);
        train_guidance(&mut clf, &self.data.train.x, &self.data.train.y, schedule, config)?;
        std::fs::create_dir_all(self.layout.checkpoints())?;
        save_classifier(path, &clf, self.config.seed)?;
        Ok(clf)
    }

    fn guidance_config(&self, lambda: f64) -> RobustTrainConfig {
        RobustTrainConfig {
            lambda,
            noise_augment: self.config.guidance.noise_augment && self.config.guidance_noise_conditioning,
            ..self.config.guidance.clone()
        }
    }

    /// The evaluated classifier and the guidance classifier.
    pub fn train_guidance(&mut self) -> Result<(GuidanceClassifier, GuidanceClassifier)> {
        self.timed("train-guidance", |ex| {
            let clf = ex.load_or_train_classifier(
                &ex.layout.classifier(),
                false,
                &ex.config.classifier.as_robust(),
                2,
            )?;
            let guide = ex.load_or_train_classifier(
                &ex.layout.guidance(),
                ex.config.guidance_noise_conditioning,
                &ex.guidance_config(ex.config.guidance.lambda),
                3,
            )?;
            Ok((clf, guide))
        })
    }

    /// One guidance classifier per swept `λ`.
    pub fn train_sweep(&mut self) -> Result<Vec<(f64, GuidanceClassifier)>> {
        self.timed("train-guidance", |ex| {
            ex.config
                .lambda_sweep
                .iter()
                .map(|&l| {
                    let path = ex.layout.guidance_lambda(l);
                    // Same config and stream as the main guidance model, so reuse it.
                    if l == ex.config.guidance.lambda && !path.exists() && ex.layout.guidance().exists() {
                        std::fs::copy(ex.layout.guidance(), &path)?;
                    }
                    let clf = ex.load_or_train_classifier(
                        &path,
                        ex.config.guidance_noise_conditioning,
                        &ex.guidance_config(l),
                        3,
                    )?;
                    Ok((l, clf))
                })
                .collect()
        })
    }

    fn require_models(&self) -> Result<Models> {
        let missing = |p: &Path| Error::invalid(format!("missing checkpoint {}", p.display()));
        let (denoiser, _) = load_denoiser(&self.layout.denoiser())
            .map_err(|e| if self.layout.denoiser().exists() { e } else { missing(&self.layout.denoiser()) })?;
        let load = |p: PathBuf| load_classifier(&p).map_err(|e| if p.exists() { e } else { missing(&p) });
        Ok(Models {
            denoiser,
            classifier: load(self.layout.classifier())?,
            guidance: load(self.layout.guidance())?,
        })
    }

    /// Models from checkpoints, training whichever stages are enabled.
    pub fn models(&mut self) -> Result<Models> {
        if self.config.stages.train_diffusion {
            self.train_diffusion()?;
        }
        if self.config.stages.train_guidance {
            self.train_guidance()?;
        }
        stage("load", || self.require_models())
    }

    /// Classifier-only adversarial examples on the evaluation split, crafted
    /// against the evaluated classifier and saved per attack.
    pub fn attack(&mut self, clf: &GuidanceClassifier) -> Result<Vec<Option<Tensor>>> {
        self.timed("attack", |ex| {
            let split = ex.eval_split();
            let opts = ex.eval_options();
            let mut out = Vec::with_capacity(ex.config.attacks.len());
            for (a, spec) in ex.config.attacks.iter().enumerate() {
                if spec.target != AttackTarget::ClassifierOnly {
                    out.push(None);
                    continue;
                }
                let adv = craft_adversarial(clf, &split, spec, a, &opts)?;
                write_json(&ex.layout.attack(&spec.label()), &adv)?;
                out.push(Some(adv));
            }
            Ok(out)
        })
    }

    fn saved_attacks(&self) -> Result<Vec<Option<Tensor>>> {
        self.config
            .attacks
            .iter()
            .map(|spec| {
                let p = self.layout.attack(&spec.label());
                if spec.target == AttackTarget::ClassifierOnly && p.exists() {
                    read_json(&p).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    fn purify_config(&self, mode: GuidanceMode) -> PurifyConfig {
        PurifyConfig {
            guidance_mode: mode,
            ..self.config.purify.clone()
        }
    }

    /// Undefended and per-mode reports. Classifier-only attacks are shared
    /// across modes; end-to-end attacks are re-run against each mode.
    pub fn evaluate(&mut self, models: &Models, shared: &[Option<Tensor>]) -> Result<ExperimentEval> {
        self.timed("evaluate", |ex| {
            let split = ex.eval_split();
            let opts = ex.eval_options();
            let attacks = &ex.config.attacks;
            let undefended = evaluate_with(&models.classifier, None, &split, attacks, shared, &opts)?;
            let mut modes = BTreeMap::new();
            for &mode in &ex.config.guidance_modes {
                let cfg = ex.purify_config(mode);
                let defence = PurifiedClassifier {
                    schedule: &ex.schedule,
                    denoiser: &models.denoiser,
                    guide: &models.guidance,
                    classifier: &models.classifier,
                    config: &cfg,
                };
                let r = evaluate_with(&models.classifier, Some(defence), &split, attacks, shared, &opts)?;
                modes.insert(mode.name().to_string(), r);
            }
            Ok(ExperimentEval {
                undefended: Some(undefended),
                modes,
                lambda_sweep: Vec::new(),
            })
        })
    }

    /// Standard and classifier-only robust accuracy of each swept guidance
    /// classifier, attacked directly.
    pub fn evaluate_sweep(&mut self, sweep: &[(f64, GuidanceClassifier)]) -> Result<Vec<LambdaPoint>> {
        self.timed("evaluate", |ex| {
            let split = ex.eval_split();
            let opts = ex.eval_options();
            let attacks: Vec<AttackSpec> = ex
                .config
                .attacks
                .iter()
                .filter(|a| a.target == AttackTarget::ClassifierOnly)
                .cloned()
                .collect();
            sweep
                .iter()
                .map(|(l, clf)| {
                    Ok(LambdaPoint {
                        lambda: *l,
                        report: evaluate_with(clf, None, &split, &attacks, &[], &opts)?,
                    })
                })
                .collect()
        })
    }

    /// Writes report.json, metrics.csv and the plot-data CSVs.
    pub fn report(&mut self, report: &ExperimentReport) -> Result<()> {
        self.timed("report", |ex| {
            write_json(&ex.layout.report(), report)?;
            if let Some(eval) = &report.eval {
                crate::harness::report::write_metrics(&ex.layout.metrics(), &ex.config, eval)?;
                crate::harness::report::write_lambda_plot(&ex.layout.lambda_plot(), eval)?;
                crate::harness::report::write_modes_plot(&ex.layout.modes_plot(), eval)?;
            }
            Ok(())
        })
    }

    /// Runs every enabled stage in order and writes the outputs.
    pub fn run(&mut self) -> Result<ExperimentReport> {
        std::fs::create_dir_all(&self.layout.root)?;
        write_json(&self.layout.config(), &self.config)?;
        let stages = self.config.stages;
        let mut run = Vec::new();
        let mut eval = None;
        let needs_models = stages.attack || stages.evaluate;
        if stages.train_diffusion {
            self.train_diffusion()?;
            run.push("train-diffusion".to_string());
        }
        if stages.train_guidance {
            self.train_guidance()?;
            run.push("train-guidance".to_string());
        }
        let sweep = if stages.train_guidance && !self.config.lambda_sweep.is_empty() {
            self.train_sweep()?
        } else {
            Vec::new()
        };
        if needs_models {
            let models = stage("load", || self.require_models())?;
            let shared = if stages.attack {
                run.push("attack".to_string());
                self.attack(&models.classifier)?
            } else {
                stage("attack", || self.saved_attacks())?
            };
            if stages.evaluate {
                let mut e = self.evaluate(&models, &shared)?;
                let sweep = if sweep.is_empty() && !self.config.lambda_sweep.is_empty() {
                    stage("load", || {
                        self.config
                            .lambda_sweep
                            .iter()
                            .map(|&l| Ok((l, load_classifier(&self.layout.guidance_lambda(l))?)))
                            .collect::<Result<Vec<_>>>()
                    })?
                } else {
                    sweep
                };
                e.lambda_sweep = self.evaluate_sweep(&sweep)?;
                write_json(&self.layout.eval(), &e)?;
                run.push("evaluate".to_string());
                eval = Some(e);
            }
        }
        if stages.report && eval.is_none() && self.layout.eval().exists() {
            eval = Some(stage("report", || read_json(&self.layout.eval()))?);
        }
        let mut report = ExperimentReport {
            experiment_id: self.config.experiment_id.clone(),
            dataset: self.config.dataset.kind.name().to_string(),
            seed: self.config.seed,
            stages_run: run,
            eval,
        };
        if stages.report {
            report.stages_run.push("report".to_string());
            self.report(&report)?;
        } else {
            write_json(&self.layout.report(), &report)?;
        }
        write_json(&self.layout.timings(), &self.timings)?;
        Ok(report)
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentReport> {
    Experiment::new(config)?.run()
}

pub fn run_experiment_path(path: &Path) -> Result<ExperimentReport> {
    Experiment::from_path(path)?.run()
}
