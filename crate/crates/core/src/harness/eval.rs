use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    pgd_with_rng, AttackSpec, AttackTarget, ClassifierPipeline, Pipeline, PurifiedClassifier,
};
use crate::error::{Error, Result};
use crate::guidance::{argmax_rows, GuidanceClassifier};
use crate::harness::Split;
use crate::rng::Rng;
use crate::tensor::Tensor;

const CLEAN_STREAM: u64 = 1;
const ATTACK_STREAM: u64 = 2;
const PURIFY_STREAM: u64 = 3;

/// Default number of test examples evaluated.
pub const DEFAULT_EVAL_SAMPLES: usize = 512;
pub const DEFAULT_EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    /// Rows processed together; each chunk has its own random streams.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: DEFAULT_EVAL_BATCH,
        }
    }
}

impl EvalOptions {
    fn rng(&self, kind: u64, slot: usize, chunk: usize) -> Rng {
        Rng::new(self.seed, (kind << 48) ^ ((slot as u64) << 24) ^ chunk as u64)
    }

    fn chunks(&self, n: usize) -> Result<impl Iterator<Item = (usize, Vec<usize>)>> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        let b = self.batch_size;
        Ok((0..n.div_ceil(b)).map(move |c| (c, (c * b..((c + 1) * b).min(n)).collect())))
    }
}

/// How adversarial examples relate to the defence being scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSharing {
    /// Crafted once against the bare classifier and reused for every defence.
    Shared,
    /// Re-run against each defence through its full pipeline.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub target: AttackTarget,
    pub norm: String,
    pub epsilon: f64,
    pub sharing: AttackSharing,
    pub correct: usize,
    pub n_samples: usize,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub standard_correct: usize,
    pub standard_accuracy: f64,
    pub robust_accuracy: BTreeMap<String, f64>,
    pub attacks: Vec<AttackOutcome>,
}

fn fraction(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

fn correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

fn check_split(clf: &GuidanceClassifier, test: &Split) -> Result<()> {
    if test.x.rows() != test.y.len() || (test.len() > 0 && test.x.cols() != clf.input_dim()) {
        return Err(Error::shape(
            "evaluate",
            format!("test split {:?} does not fit a {}-input classifier", test.x.shape(), clf.input_dim()),
        ));
    }
    clf.check_labels(&test.y)
}

/// Classifier-only adversarial examples for the whole split, crafted
/// against the bare classifier in chunks.
pub fn craft_adversarial(
    clf: &GuidanceClassifier,
    test: &Split,
    spec: &AttackSpec,
    slot: usize,
    opts: &EvalOptions,
) -> Result<Tensor> {
    if spec.target != AttackTarget::ClassifierOnly {
        return Err(Error::invalid("only classifier-only attacks can be crafted up front"));
    }
    check_split(clf, test)?;
    let mut rows = Vec::with_capacity(test.len());
    for (c, idx) in opts.chunks(test.len())? {
        let part = test.select(&idx);
        let mut rng = opts.rng(ATTACK_STREAM ^ spec.seed.rotate_left(8), slot, c);
        let r = pgd_with_rng(&ClassifierPipeline(clf), &part.x, &part.y, spec, &mut rng)?;
        rows.extend((0..part.len()).map(|i| r.adversarial.row(i).to_vec()));
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, clf.input_dim()]));
    }
    Tensor::from_rows(&rows)
}

/// A defence scored by [`evaluate`]: purification under `config` with the
/// given models, or nothing.
pub type Defence<'a> = Option<PurifiedClassifier<'a>>;

fn predict_chunked(
    clf: &GuidanceClassifier,
    defence: &Defence<'_>,
    x: &Tensor,
    y: &[usize],
    kind: u64,
    slot: usize,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let mut pred = Vec::with_capacity(y.len());
    for (c, idx) in opts.chunks(y.len())? {
        let px = x.select_rows(&idx);
        let py: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        match defence {
            None => pred.extend(argmax_rows(&clf.logits(&px)?)),
            Some(p) => {
                let mut rng = opts.rng(kind, slot, c);
                pred.extend(p.predict(&px, &py, &mut rng)?);
            }
        }
    }
    Ok(pred)
}

/// Standard and robust accuracy of `clf` behind an optional purifier.
///
/// Classifier-only attacks are crafted against the bare classifier (or taken
/// from `shared`, by attack index) and then passed through the defence;
/// end-to-end attacks differentiate through the whole defence.
pub fn evaluate_with(
    clf: &GuidanceClassifier,
    defence: Defence<'_>,
    test: &Split,
    attacks: &[AttackSpec],
    shared: &[Option<Tensor>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_split(clf, test)?;
    let n = test.len();
    let clean = predict_chunked(clf, &defence, &test.x, &test.y, CLEAN_STREAM, 0, opts)?;
    let standard_correct = correct(&clean, &test.y);
    let mut outcomes = Vec::with_capacity(attacks.len());
    for (a, spec) in attacks.iter().enumerate() {
        spec.validate()?;
        let (k, sharing) = match spec.target {
            AttackTarget::ClassifierOnly => {
                let adv = match shared.get(a).and_then(|s| s.as_ref()) {
                    Some(t) if t.shape() != test.x.shape() => {
                        return Err(Error::shape(
                            "evaluate",
                            "shared adversarial set does not match the split",
                        ))
                    }
                    Some(t) => t.clone(),
                    None => craft_adversarial(clf, test, spec, a, opts)?,
                };
                let pred = predict_chunked(clf, &defence, &adv, &test.y, PURIFY_STREAM, a, opts)?;
                (correct(&pred, &test.y), AttackSharing::Shared)
            }
            AttackTarget::EndToEnd => {
                // Success is judged by the attack's own fresh-noise draw.
                let mut fooled = 0;
                for (c, idx) in opts.chunks(n)? {
                    let part = test.select(&idx);
                    let mut rng = opts.rng(ATTACK_STREAM ^ spec.seed.rotate_left(8), a, c);
                    let r = match &defence {
                        None => {
                            pgd_with_rng(&ClassifierPipeline(clf), &part.x, &part.y, spec, &mut rng)?
                        }
                        Some(p) => pgd_with_rng(p, &part.x, &part.y, spec, &mut rng)?,
                    };
                    fooled += r.success.iter().filter(|&&s| s).count();
                }
                (n - fooled, AttackSharing::Adaptive)
            }
        };
        outcomes.push(AttackOutcome {
            attack: spec.label(),
            target: spec.target,
            norm: spec.norm.name().to_string(),
            epsilon: spec.epsilon,
            sharing,
            correct: k,
            n_samples: n,
            robust_accuracy: fraction(k, n),
        });
    }
    let mut robust = BTreeMap::new();
    for o in &outcomes {
        if robust.insert(o.attack.clone(), o.robust_accuracy).is_some() {
            return Err(Error::invalid(format!("duplicate attack name `{}`", o.attack)));
        }
    }
    Ok(EvalReport {
        n_samples: n,
        standard_correct,
        standard_accuracy: fraction(standard_correct, n),
        robust_accuracy: robust,
        attacks: outcomes,
    })
}

/// [`evaluate_with`] crafting every classifier-only attack itself.
pub fn evaluate(
    clf: &GuidanceClassifier,
    defence: Defence<'_>,
    test: &Split,
    attacks: &[AttackSpec],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(clf, defence, test, attacks, &[], opts)
}
