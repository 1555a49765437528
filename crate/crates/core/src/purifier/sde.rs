use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// SDE `dx = a(τ)·x dτ + G(τ) dw` on `τ ∈ [0, 1]` with linear drift.
pub trait LinearSde {
    fn drift_coefficient(&self, tau: f64) -> f64;
    fn diffusion(&self, tau: f64) -> f64;
}

/// Variance-preserving SDE matching a linear discrete schedule:
/// `β(τ) = T·(β_start + τ·(β_end − β_start))`, `a = −β/2`, `G = √β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VpSde {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl VpSde {
    pub fn from_schedule(schedule: &NoiseSchedule) -> Self {
        Self {
            steps: schedule.steps(),
            beta_start: schedule.beta_start(),
            beta_end: schedule.beta_end(),
        }
    }

    pub fn beta(&self, tau: f64) -> f64 {
        self.steps as f64 * (self.beta_start + tau * (self.beta_end - self.beta_start))
    }

    /// `exp(−∫₀^τ β)`.
    pub fn alpha_bar(&self, tau: f64) -> f64 {
        let t = self.steps as f64;
        (-t * (self.beta_start * tau + 0.5 * (self.beta_end - self.beta_start) * tau * tau)).exp()
    }

    /// Fractional discrete index that `τ` corresponds to.
    pub fn discrete_time(&self, tau: f64) -> f64 {
        (tau * self.steps as f64 - 1.0).max(0.0)
    }
}

impl LinearSde for VpSde {
    fn drift_coefficient(&self, tau: f64) -> f64 {
        -0.5 * self.beta(tau)
    }

    fn diffusion(&self, tau: f64) -> f64 {
        self.beta(tau).sqrt()
    }
}

/// One reverse-time Euler–Maruyama step of size `h` from `tau`:
/// `x − (a·x − G²·S(x, τ))·h + G·√h·z`. Passing no `noise` drops the last term.
pub fn euler_maruyama_step<F>(
    g: &mut Graph,
    sde: &dyn LinearSde,
    score: F,
    x: Var,
    tau: f64,
    h: f64,
    noise: Option<&Tensor>,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, f64) -> Result<Var>,
{
    let a = sde.drift_coefficient(tau);
    let gv = sde.diffusion(tau);
    let mut next = g.scale(x, 1.0 - a * h)?;
    if gv != 0.0 {
        let s = score(g, x, tau)?;
        let s = g.scale(s, gv * gv * h)?;
        next = g.add(next, s)?;
        if let Some(z) = noise {
            if z.shape() != g.shape(x) {
                return Err(Error::shape("sde", "noise does not match the state"));
            }
            let z = g.constant(z.scale(gv * h.sqrt()))?;
            next = g.add(next, z)?;
        }
    }
    Ok(next)
}

/// Reverse-time Euler–Maruyama from `tau_start` down to 0 in `substeps`
/// uniform steps, with no noise on the last one. `noise` holds the
/// `substeps − 1` standard-normal draws in step order.
pub fn reverse_euler_maruyama<F>(
    g: &mut Graph,
    sde: &dyn LinearSde,
    mut score: F,
    x: Var,
    tau_start: f64,
    substeps: usize,
    noise: &[Tensor],
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, f64) -> Result<Var>,
{
    if substeps == 0 {
        return Err(Error::invalid("at least one substep is required"));
    }
    if noise.len() != substeps - 1 {
        return Err(Error::invalid(format!(
            "{} noise draws for {substeps} substeps",
            noise.len()
        )));
    }
    let h = tau_start / substeps as f64;
    let mut x = x;
    for k in 0..substeps {
        let tau = tau_start - k as f64 * h;
        x = euler_maruyama_step(g, sde, &mut score, x, tau, h, noise.get(k))?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SigmaMode;

    struct Frozen;
    impl LinearSde for Frozen {
        fn drift_coefficient(&self, _: f64) -> f64 {
            0.0
        }
        fn diffusion(&self, _: f64) -> f64 {
            0.0
        }
    }

    struct Constant(f64, f64);
    impl LinearSde for Constant {
        fn drift_coefficient(&self, _: f64) -> f64 {
            self.0
        }
        fn diffusion(&self, _: f64) -> f64 {
            self.1
        }
    }

    #[test]
    fn frozen_dynamics_return_input() {
        let x0 = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.5, 0.0]).unwrap();
        let noise: Vec<Tensor> = (0..9).map(|_| Tensor::full(&[2, 2], 7.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(x0.clone()).unwrap();
        let out = reverse_euler_maruyama(
            &mut g,
            &Frozen,
            |g, x, _| g.scale(x, 100.0),
            x,
            0.8,
            10,
            &noise,
        )
        .unwrap();
        assert!(g.value(out).bit_eq(&x0));
    }

    #[test]
    fn single_substep_is_one_euler_step() {
        let (a, gv, tau) = (-0.3, 0.7, 0.5);
        let x0 = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x0.clone()).unwrap();
        // S(x, τ) = −x·τ
        let out = reverse_euler_maruyama(
            &mut g,
            &Constant(a, gv),
            |g, x, t| g.scale(x, -t),
            x,
            tau,
            1,
            &[],
        )
        .unwrap();
        let h = tau;
        for (k, &v) in x0.data().iter().enumerate() {
            let want = v - (a * v - gv * gv * (-v * tau)) * h;
            assert!((g.value(out).data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_count_is_checked() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1])).unwrap();
        let r = reverse_euler_maruyama(&mut g, &Frozen, |_, x, _| Ok(x), x, 1.0, 3, &[]);
        assert!(r.is_err());
        assert!(reverse_euler_maruyama(&mut g, &Frozen, |_, x, _| Ok(x), x, 1.0, 0, &[]).is_err());
    }

    #[test]
    fn vp_matches_discrete_schedule() {
        let s = NoiseSchedule::linear(200, 5e-4, 0.1, SigmaMode::Posterior).unwrap();
        let sde = VpSde::from_schedule(&s);
        for t in [0usize, 13, 49, 99] {
            let tau = (t + 1) as f64 / 200.0;
            let rel = (sde.alpha_bar(tau) - s.alpha_bar(t)).abs() / s.alpha_bar(t);
            assert!(rel < 0.05, "t={t}: {} vs {}", sde.alpha_bar(tau), s.alpha_bar(t));
        }
        assert_eq!(sde.alpha_bar(0.0), 1.0);
    }
}
