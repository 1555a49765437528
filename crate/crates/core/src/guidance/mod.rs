//! Guidance classifier `f_φ`, its two input-gradient fields, and robust
//! (accuracy + discrepancy) training.

mod classifier;
mod train;

pub use classifier::{
    argmax_rows, BoundClassifier, DistanceMeasure, GuidanceClassifier, CLASSIFIER_EMBED_DIM,
    CLASSIFIER_HIDDEN,
};
pub(crate) use classifier::check_labels;
pub use train::{
    inner_max_perturbation, train_at_baseline, train_guidance, trades_loss, RobustTrainConfig,
    TradesDiagnostics,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `∇_{x_t} log softmax_y(f(x_t, t))` per row, recorded so that it can be
/// differentiated again.
pub fn label_guidance_var(
    g: &mut Graph,
    clf: &BoundClassifier,
    x_t: Var,
    y: &[usize],
    t: f64,
) -> Result<Var> {
    check_labels(y, clf.class_count())?;
    let logits = clf.forward_at(g, x_t, t)?;
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, y)?;
    let total = g.sum(picked)?;
    Ok(g.gradients(total, &[x_t])?[0])
}

/// `∇_{x_t} D(f(x_adv), f(x_t, t))` per row. `adv_logits` are the logits of
/// `x_adv`; they enter as given and are not the differentiation variable.
pub fn discrepancy_guidance_var(
    g: &mut Graph,
    clf: &BoundClassifier,
    adv_logits: Var,
    x_t: Var,
    t: f64,
    distance: DistanceMeasure,
) -> Result<Var> {
    let q = clf.forward_at(g, x_t, t)?;
    let rows = distance.rows(g, adv_logits, q)?;
    let total = g.sum(rows)?;
    Ok(g.gradients(total, &[x_t])?[0])
}

pub fn label_guidance_grad(
    clf: &GuidanceClassifier,
    x_t: &Tensor,
    y: &[usize],
    t: usize,
) -> Result<Tensor> {
    clf.check_labels(y)?;
    if y.len() != x_t.rows() {
        return Err(Error::shape("label_guidance", "one label per row required"));
    }
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let x = g.constant(x_t.clone())?;
    let grad = label_guidance_var(&mut g, &bound, x, y, t as f64)?;
    Ok(g.value(grad).clone())
}

/// The logits of `x_adv` are taken at time 0.
pub fn discrepancy_guidance_grad(
    clf: &GuidanceClassifier,
    x_adv: &Tensor,
    x_t: &Tensor,
    t: usize,
    distance: DistanceMeasure,
) -> Result<Tensor> {
    if x_adv.shape() != x_t.shape() {
        return Err(Error::shape(
            "discrepancy_guidance",
            format!("x_adv {:?} vs x_t {:?}", x_adv.shape(), x_t.shape()),
        ));
    }
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let adv = g.constant(clf.logits(x_adv)?)?;
    let x = g.constant(x_t.clone())?;
    let grad = discrepancy_guidance_var(&mut g, &bound, adv, x, t as f64, distance)?;
    Ok(g.value(grad).clone())
}
