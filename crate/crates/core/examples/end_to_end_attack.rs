//! PGD with expectation over transformation through the whole purifier,
//! with and without guidance.
//!
//! `cargo run --release --example end_to_end_attack -- [samples]`

use agdm::attacks::{pgd_eot_attack, AttackSpec, PurifiedClassifier};
use agdm::diffusion::{train_denoiser, DiffTrainConfig, Denoiser};
use agdm::guidance::{train_guidance, GuidanceClassifier, RobustTrainConfig};
use agdm::harness::{generate_dataset, DatasetSpec, ScheduleSpec};
use agdm::purifier::{GuidanceMode, PurifyConfig};
use agdm::{Result, Rng};

fn main() -> Result<()> {
    let n = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(32);
    let mut spec = DatasetSpec::mixture(4000, 0);
    spec.noise = 0.05;
    let data = generate_dataset(&spec)?;
    let schedule = ScheduleSpec::default().build()?;

    let mut denoiser = Denoiser::new(2, &mut Rng::new(0, 1))?;
    train_denoiser(&schedule, &mut denoiser, &data.train.x, &DiffTrainConfig { epochs: 60, ..Default::default() })?;
    let mut clf = GuidanceClassifier::new(2, 8, false, &mut Rng::new(0, 2))?;
    let plain = RobustTrainConfig { lambda: 0.0, epsilon: 0.0, noise_augment: false, ..Default::default() };
    train_guidance(&mut clf, &data.train.x, &data.train.y, None, &plain)?;
    let mut guide = GuidanceClassifier::new(2, 8, true, &mut Rng::new(0, 3))?;
    let robust = RobustTrainConfig {
        epsilon: 0.35,
        epochs: 10,
        augment_max_t: Some(30),
        robust_noisy: false,
        ..Default::default()
    };
    train_guidance(&mut guide, &data.train.x, &data.train.y, Some(&schedule), &robust)?;

    let test = data.test.head(n);
    let attack = AttackSpec::end_to_end(0.35);
    println!("{} steps, {} EOT samples, step {:.4}", attack.steps(), attack.eot_samples(), attack.step_size());
    for mode in [GuidanceMode::None, GuidanceMode::Full] {
        let config = PurifyConfig { guidance_mode: mode, ..Default::default() };
        let pipeline = PurifiedClassifier {
            schedule: &schedule,
            denoiser: &denoiser,
            guide: &guide,
            classifier: &clf,
            config: &config,
        };
        let r = pgd_eot_attack(&pipeline, &test.x, &test.y, &attack)?;
        println!(
            "{:>5}: robust {:.3}, EOT loss {:.3} -> {:.3}",
            mode.name(),
            1.0 - r.success_rate(),
            r.losses[0],
            r.losses.last().unwrap()
        );
    }
    Ok(())
}
