//! Train a DDPM on an 8-mode 2-D Gaussian mixture and check mode coverage
//! of ancestral samples.
//!
//! `cargo run --release --example ddpm_mixture -- [epochs]`

use agdm::diffusion::{sample_unconditional, train_denoiser, DiffTrainConfig, Denoiser};
use agdm::harness::{generate_dataset, DatasetSpec, ScheduleSpec};
use agdm::{Result, Rng};

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let mut spec = DatasetSpec::mixture(8000, 0);
    spec.noise = 0.1;
    let data = generate_dataset(&spec)?;
    let schedule = ScheduleSpec::default().build()?;

    let mut rng = Rng::new(0, 1);
    let mut model = Denoiser::new(2, &mut rng)?;
    let config = DiffTrainConfig { epochs, ..Default::default() };
    let trace = train_denoiser(&schedule, &mut model, &data.train.x, &config)?;
    println!("trained {epochs} epochs, final loss {:.4}", trace.last().unwrap());

    let samples = sample_unconditional(&schedule, &model, 2000, &mut Rng::new(0, 2))?;
    let centres = spec.mixture_centres();
    let mut counts = vec![0usize; centres.len()];
    let mut near = 0;
    for i in 0..samples.rows() {
        let p = samples.row(i);
        let (k, d) = centres
            .iter()
            .map(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        counts[k] += 1;
        if d <= 3.0 * spec.noise {
            near += 1;
        }
    }
    println!("samples per mode: {counts:?}");
    println!("within 3σ of a mode: {:.1}%", 100.0 * near as f64 / samples.rows() as f64);
    Ok(())
}
