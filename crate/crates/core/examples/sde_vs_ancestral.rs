//! Compare first and second moments of reverse VP-SDE samples with ancestral
//! samples from the same denoiser.
//!
//! `cargo run --release --example sde_vs_ancestral -- [epochs]`

use agdm::diffusion::{sample_unconditional, train_denoiser, DiffTrainConfig, Denoiser};
use agdm::harness::{generate_dataset, DatasetSpec, ScheduleSpec};
use agdm::purifier::sde_sample_unconditional;
use agdm::{Result, Rng, Tensor};

fn moments(x: &Tensor) -> ([f64; 2], [f64; 2]) {
    let n = x.rows() as f64;
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    for i in 0..x.rows() {
        for k in 0..2 {
            m[k] += x.row(i)[k] / n;
        }
    }
    for i in 0..x.rows() {
        for k in 0..2 {
            v[k] += (x.row(i)[k] - m[k]).powi(2) / n;
        }
    }
    (m, v)
}

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let mut spec = DatasetSpec::mixture(4000, 0);
    spec.noise = 0.1;
    let data = generate_dataset(&spec)?;
    let schedule = ScheduleSpec::default().build()?;
    let mut model = Denoiser::new(2, &mut Rng::new(0, 1))?;
    train_denoiser(&schedule, &mut model, &data.train.x, &DiffTrainConfig { epochs, ..Default::default() })?;

    let n = 2000;
    let anc = sample_unconditional(&schedule, &model, n, &mut Rng::new(1, 0))?;
    let sde = sde_sample_unconditional(&schedule, &model, n, 4 * schedule.steps(), &mut Rng::new(2, 0))?;
    let (ma, va) = moments(&anc);
    let (ms, vs) = moments(&sde);
    println!("ancestral mean {ma:.4?} var {va:.4?}");
    println!("sde       mean {ms:.4?} var {vs:.4?}");
    for k in 0..2 {
        println!("axis {k}: variance ratio {:.3}", vs[k] / va[k]);
    }
    Ok(())
}
