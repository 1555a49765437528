use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-row `KL(softmax(p) ‖ softmax(q))` as an `[n]` vector.
pub(crate) fn kl_rows(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
    if g.shape(p_logits) != g.shape(q_logits) {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", g.shape(p_logits), g.shape(q_logits)),
        ));
    }
    let p = g.softmax(p_logits)?;
    let log_p = g.log_softmax(p_logits)?;
    let log_q = g.log_softmax(q_logits)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    g.row_sum(terms)
}

/// `KL(softmax(p) ‖ softmax(q))` averaged over rows; the last axis holds classes.
pub fn kl_divergence(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
    let rows = kl_rows(g, p_logits, q_logits)?;
    g.mean(rows)
}

/// Per-row `-log softmax(logits)[label]` as an `[n]` vector.
pub(crate) fn nll_rows(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    g.scale(picked, -1.0)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = nll_rows(g, logits, labels)?;
    g.mean(rows)
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let s = g.softmax(x)?;
    Ok(g.value(s).clone())
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, input: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = input.clone();
    let mut out = vec![0.0; input.len()];
    for (k, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl_value(p: &[f64], q: &[f64]) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, p.len()], p.to_vec()).unwrap()).unwrap();
        let q = g.constant(Tensor::new(vec![1, q.len()], q.to_vec()).unwrap()).unwrap();
        let kl = kl_divergence(&mut g, p, q).unwrap();
        g.value(kl).item()
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        assert_eq!(kl_value(&[0.3, -1.2, 4.0], &[0.3, -1.2, 4.0]), 0.0);
    }

    #[test]
    fn kl_two_class_closed_form() {
        let got = kl_value(&[0.5f64.ln(), 0.5f64.ln()], &[0.9f64.ln(), 0.1f64.ln()]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let q = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(kl_divergence(&mut g, p, q).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        let ce = cross_entropy(&mut g, x, &[0, 1, 2, 4]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_vanishes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap()).unwrap();
        let ce = cross_entropy(&mut g, x, &[0]).unwrap();
        assert!(g.value(ce).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_hand_table() {
        let rows = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let labels = [1usize, 0];
        let mut want = 0.0;
        for (r, &y) in rows.iter().zip(&labels) {
            let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
            want += -(r[y].exp() / z).ln();
        }
        want /= 2.0;
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap())
            .unwrap();
        let ce = cross_entropy(&mut g, x, &labels).unwrap();
        assert!((g.value(ce).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(cross_entropy(&mut g, x, &[3]).is_err());
    }

    #[test]
    fn finite_difference_square_and_sine() {
        let x = Tensor::vector(vec![3.0]);
        let d = finite_difference_gradient(|t| Ok(t.data()[0].powi(2)), &x, 1e-4).unwrap();
        assert!((d.data()[0] - 6.0).abs() < 1e-6);
        let z = Tensor::vector(vec![0.0]);
        let d = finite_difference_gradient(|t| Ok(t.data()[0].sin()), &z, 1e-4).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
