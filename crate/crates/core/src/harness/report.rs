use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::eval::{AttackOutcome, EvalReport};
use crate::harness::experiment::{ExperimentConfig, ExperimentEval};

/// Label of the row block scoring the classifier without purification.
pub const UNDEFENDED: &str = "undefended";
/// Label of the rows scoring the swept guidance classifiers directly.
pub const GUIDANCE_CLASSIFIER: &str = "guidance_classifier";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub dataset: String,
    pub guidance_mode: String,
    pub lambda: Option<f64>,
    pub s: Option<f64>,
    pub t_star: Option<usize>,
    pub attack: String,
    pub norm: String,
    pub epsilon: Option<f64>,
    pub standard_acc: f64,
    pub robust_acc: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Left empty so the table is reproducible; see timings.json.
    pub wall_clock_s: Option<f64>,
}

fn rows_for(
    config: &ExperimentConfig,
    mode: &str,
    lambda: Option<f64>,
    purified: bool,
    report: &EvalReport,
) -> Vec<MetricsRow> {
    let base = |o: Option<&AttackOutcome>| MetricsRow {
        experiment_id: config.experiment_id.clone(),
        dataset: config.dataset.kind.name().to_string(),
        guidance_mode: mode.to_string(),
        lambda,
        s: purified.then_some(config.purify.s),
        t_star: purified.then_some(config.purify.t_star),
        attack: o.map_or("none".into(), |o| o.attack.clone()),
        norm: o.map_or(String::new(), |o| o.norm.clone()),
        epsilon: o.map(|o| o.epsilon),
        standard_acc: report.standard_accuracy,
        robust_acc: o.map(|o| o.robust_accuracy),
        n_samples: report.n_samples,
        seed: config.seed,
        wall_clock_s: None,
    };
    if report.attacks.is_empty() {
        return vec![base(None)];
    }
    report.attacks.iter().map(|o| base(Some(o))).collect()
}

/// Every metrics row: undefended, per guidance mode, then the `λ` sweep.
pub fn metrics_rows(config: &ExperimentConfig, eval: &ExperimentEval) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    if let Some(u) = &eval.undefended {
        rows.extend(rows_for(config, UNDEFENDED, None, false, u));
    }
    for (mode, r) in &eval.modes {
        rows.extend(rows_for(config, mode, Some(config.guidance.lambda), true, r));
    }
    for p in &eval.lambda_sweep {
        rows.extend(rows_for(config, GUIDANCE_CLASSIFIER, Some(p.lambda), false, &p.report));
    }
    rows
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_COLUMNS: [&str; 14] = [
    "experiment_id",
    "dataset",
    "guidance_mode",
    "lambda",
    "s",
    "t_star",
    "attack",
    "norm",
    "epsilon",
    "standard_acc",
    "robust_acc",
    "n_samples",
    "seed",
    "wall_clock_s",
];

pub fn write_metrics(path: &Path, config: &ExperimentConfig, eval: &ExperimentEval) -> Result<()> {
    write_rows(path, &metrics_rows(config, eval), &METRICS_COLUMNS)
}

#[derive(Serialize)]
struct LambdaRow<'a> {
    lambda: f64,
    attack: &'a str,
    epsilon: Option<f64>,
    standard_acc: f64,
    robust_acc: Option<f64>,
    n_samples: usize,
}

/// One row per swept `λ` (per attack when there are several).
pub fn write_lambda_plot(path: &Path, eval: &ExperimentEval) -> Result<()> {
    let mut rows = Vec::new();
    for p in &eval.lambda_sweep {
        let r = &p.report;
        if r.attacks.is_empty() {
            rows.push(LambdaRow {
                lambda: p.lambda,
                attack: "none",
                epsilon: None,
                standard_acc: r.standard_accuracy,
                robust_acc: None,
                n_samples: r.n_samples,
            });
        }
        for o in &r.attacks {
            rows.push(LambdaRow {
                lambda: p.lambda,
                attack: &o.attack,
                epsilon: Some(o.epsilon),
                standard_acc: r.standard_accuracy,
                robust_acc: Some(o.robust_accuracy),
                n_samples: r.n_samples,
            });
        }
    }
    write_rows(
        path,
        &rows,
        &["lambda", "attack", "epsilon", "standard_acc", "robust_acc", "n_samples"],
    )
}

#[derive(Serialize)]
struct ModeRow<'a> {
    guidance_mode: &'a str,
    attack: &'a str,
    sharing: &'a str,
    standard_acc: f64,
    robust_acc: f64,
    n_samples: usize,
}

/// Bars per guidance mode and attack, with the undefended classifier first.
pub fn write_modes_plot(path: &Path, eval: &ExperimentEval) -> Result<()> {
    let mut rows = Vec::new();
    let blocks = eval
        .undefended
        .iter()
        .map(|r| (UNDEFENDED, r))
        .chain(eval.modes.iter().map(|(m, r)| (m.as_str(), r)));
    for (mode, r) in blocks {
        for o in &r.attacks {
            rows.push(ModeRow {
                guidance_mode: mode,
                attack: &o.attack,
                sharing: match o.sharing {
                    crate::harness::eval::AttackSharing::Shared => "shared",
                    crate::harness::eval::AttackSharing::Adaptive => "adaptive",
                },
                standard_acc: r.standard_accuracy,
                robust_acc: o.robust_accuracy,
                n_samples: r.n_samples,
            });
        }
    }
    write_rows(
        path,
        &rows,
        &["guidance_mode", "attack", "sharing", "standard_acc", "robust_acc", "n_samples"],
    )
}
