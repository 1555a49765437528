//! Reverse-mode gradients on the tape, checked against central differences,
//! and a Hessian-vector product from differentiating a recorded gradient.

use agdm::tensor::{finite_difference_gradient, relative_error};
use agdm::{Graph, Result, Rng, Tensor};

/// `f(x) = Σ log_softmax(silu(x·W))[:, 0]`.
fn forward(g: &mut Graph, x: agdm::Var, w: &Tensor) -> Result<agdm::Var> {
    let w = g.constant(w.clone())?;
    let h = g.matmul(x, w)?;
    let h = g.silu(h)?;
    let lp = g.log_softmax(h)?;
    let picked = g.pick(lp, &[0, 0])?;
    g.sum(picked)
}

fn main() -> Result<()> {
    let mut rng = Rng::new(7, 0);
    let x0 = rng.normal_tensor(&[2, 3]);
    let w = rng.normal_tensor(&[3, 4]);

    let mut g = Graph::new();
    let x = g.variable(x0.clone())?;
    let f = forward(&mut g, x, &w)?;
    let grad = g.gradients(f, &[x])?[0];
    println!("f(x) = {:.6}", g.value(f).item());
    println!("∇f   = {:?}", g.value(grad).data());

    let fd = finite_difference_gradient(
        |v| {
            let mut g = Graph::new();
            let x = g.constant(v.clone())?;
            let f = forward(&mut g, x, &w)?;
            Ok(g.value(f).item())
        },
        &x0,
        1e-5,
    )?;
    println!("relative error vs central differences: {:.2e}", relative_error(g.value(grad).data(), fd.data()));

    // H·v as the gradient of ⟨∇f, v⟩.
    let v = g.constant(Tensor::full(&[2, 3], 1.0))?;
    let dot = g.mul(grad, v)?;
    let dot = g.sum(dot)?;
    let hv = g.gradients(dot, &[x])?[0];
    println!("H·1  = {:?}", g.value(hv).data());
    Ok(())
}
