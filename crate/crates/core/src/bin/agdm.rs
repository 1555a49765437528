use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use agdm::harness::{
    write_lambda_plot, Experiment, ExperimentConfig, ExperimentEval, Stages,
};
use agdm::purifier::{purify, GuidanceMode};
use agdm::{Rng, Tensor};

#[derive(Parser)]
#[command(name = "agdm", version, about = "Guided diffusion purification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage enabled in the config.
    Run(Common),
    /// Train (or load) the denoiser.
    TrainDiffusion(Common),
    /// Train (or load) the evaluated and guidance classifiers.
    TrainGuidance(Common),
    /// Craft classifier-only adversarial examples from existing checkpoints.
    Attack(Common),
    /// Purify a JSON tensor of inputs.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the per-step trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Attack and evaluate from existing checkpoints, then write the report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Rewrite the metrics and plot CSVs from a saved evaluation.
    Report(Common),
    /// Train and score guidance classifiers over a list of λ.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values (default: the config's `lambda_sweep`).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    t_star: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    guidance_mode: Option<GuidanceMode>,
    /// Override any config key, e.g. `--set guidance.lambda=1` (value parsed as JSON).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("`{key}`: `{part}` is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl Common {
    fn load(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        let mut v: Value = serde_json::from_str(&text).context("parsing config")?;
        let mut set = |k: &str, x: Value| set_path(&mut v, k, x);
        if let Some(p) = &self.output_dir {
            set("output_dir", Value::from(p.to_string_lossy().into_owned()))?;
        }
        if let Some(n) = self.eval_samples {
            set("eval_samples", n.into())?;
        }
        if let Some(t) = self.t_star {
            set("purify.t_star", t.into())?;
        }
        if let Some(s) = self.s {
            set("purify.s", s.into())?;
        }
        if let Some(m) = self.guidance_mode {
            set("purify.guidance_mode", m.name().into())?;
        }
        if let Some(s) = seed {
            set("seed", s.into())?;
        }
        for o in &self.overrides {
            let Some((k, raw)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            let x = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
            set(k, x)?;
        }
        Ok(serde_json::from_value(v).context("invalid config")?)
    }

    fn experiment(&self, seed: Option<u64>, stages: Option<Stages>) -> Result<Experiment> {
        let mut config = self.load(seed)?;
        if let Some(s) = stages {
            config.stages = s;
        }
        Ok(Experiment::new(config)?)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn only(f: impl FnOnce(&mut Stages)) -> Stages {
    let mut s = Stages::all(false);
    f(&mut s);
    s
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(c) => print_json(&c.experiment(None, None)?.run()?),
        Command::TrainDiffusion(c) => {
            let mut ex = c.experiment(None, None)?;
            ex.train_diffusion()?;
            println!("{}", ex.layout.denoiser().display());
            Ok(())
        }
        Command::TrainGuidance(c) => {
            let mut ex = c.experiment(None, None)?;
            ex.train_guidance()?;
            println!("{}", ex.layout.classifier().display());
            println!("{}", ex.layout.guidance().display());
            Ok(())
        }
        Command::Attack(c) => {
            let mut ex = c.experiment(None, Some(only(|s| s.attack = true)))?;
            let models = ex.models()?;
            ex.attack(&models.classifier)?;
            for a in &ex.config.attacks {
                let p = ex.layout.attack(&a.label());
                if p.exists() {
                    println!("{}", p.display());
                }
            }
            Ok(())
        }
        Command::Purify { common, input, output, trace } => {
            let mut ex = common.experiment(None, Some(Stages::all(false)))?;
            let models = ex.models()?;
            let x: Tensor = serde_json::from_str(
                &std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?,
            )
            .context("input is not a tensor")?;
            let mut rng = Rng::new(ex.config.seed, 0x7075_7269_6679);
            let (out, tr) = purify(
                &ex.schedule,
                &models.denoiser,
                &models.guidance,
                &x,
                None,
                &ex.config.purify,
                &mut rng,
            )?;
            std::fs::write(&output, serde_json::to_string(&out)?)?;
            if let Some(p) = trace {
                std::fs::write(p, serde_json::to_string_pretty(&tr)?)?;
            }
            Ok(())
        }
        Command::Evaluate { common, seed } => {
            let stages = only(|s| {
                s.attack = true;
                s.evaluate = true;
                s.report = true;
            });
            print_json(&common.experiment(Some(seed), Some(stages))?.run()?)
        }
        Command::Report(c) => {
            let mut ex = c.experiment(None, Some(only(|s| s.report = true)))?;
            if !ex.layout.eval().exists() {
                bail!("no saved evaluation at {}", ex.layout.eval().display());
            }
            print_json(&ex.run()?)
        }
        Command::Sweep { common, lambdas } => {
            let mut config = common.load(None)?;
            if !lambdas.is_empty() {
                config.lambda_sweep = lambdas;
            }
            if config.lambda_sweep.is_empty() {
                bail!("no λ values given");
            }
            let mut ex = Experiment::new(config)?;
            let sweep = ex.train_sweep()?;
            let eval = ExperimentEval {
                lambda_sweep: ex.evaluate_sweep(&sweep)?,
                ..Default::default()
            };
            write_lambda_plot(&ex.layout.lambda_plot(), &eval)?;
            print_json(&eval.lambda_sweep)
        }
    }
}
