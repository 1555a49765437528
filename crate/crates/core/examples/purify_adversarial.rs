//! Craft PGD examples against a standard classifier, then purify them with
//! each guidance mode and classify the result.
//!
//! `cargo run --release --example purify_adversarial`

use agdm::attacks::{accuracy, pgd_attack, AttackSpec};
use agdm::diffusion::{train_denoiser, DiffTrainConfig, Denoiser};
use agdm::guidance::{train_guidance, GuidanceClassifier, RobustTrainConfig};
use agdm::harness::{generate_dataset, DatasetSpec, ScheduleSpec};
use agdm::purifier::{purify, GuidanceMode, PurifyConfig};
use agdm::{Result, Rng};

fn main() -> Result<()> {
    let mut spec = DatasetSpec::mixture(4000, 0);
    spec.noise = 0.05;
    let data = generate_dataset(&spec)?;
    let schedule = ScheduleSpec::default().build()?;
    let (dim, classes) = (spec.input_dim(), spec.class_count);

    let mut denoiser = Denoiser::new(dim, &mut Rng::new(0, 1))?;
    let diff = DiffTrainConfig { epochs: 80, ..Default::default() };
    train_denoiser(&schedule, &mut denoiser, &data.train.x, &diff)?;

    let mut clf = GuidanceClassifier::new(dim, classes, false, &mut Rng::new(0, 2))?;
    let plain = RobustTrainConfig { lambda: 0.0, epsilon: 0.0, noise_augment: false, ..Default::default() };
    train_guidance(&mut clf, &data.train.x, &data.train.y, None, &plain)?;

    let eps = 0.35;
    let mut guide = GuidanceClassifier::new(dim, classes, true, &mut Rng::new(0, 3))?;
    let robust = RobustTrainConfig {
        epsilon: 0.35,
        epochs: 10,
        augment_max_t: Some(30),
        robust_noisy: false,
        ..Default::default()
    };
    train_guidance(&mut guide, &data.train.x, &data.train.y, Some(&schedule), &robust)?;

    let test = data.test.head(256);
    let adv = pgd_attack(&clf, &test.x, &test.y, &AttackSpec::classifier_only(eps))?;
    println!("undefended: standard {:.3}, robust {:.3}", accuracy(&clf.predict(&test.x)?, &test.y), 1.0 - adv.success_rate());
    for mode in GuidanceMode::ALL {
        let config = PurifyConfig { guidance_mode: mode, ..Default::default() };
        let mut rng = Rng::new(1, 0);
        let (clean, _) = purify(&schedule, &denoiser, &guide, &test.x, None, &config, &mut rng)?;
        let (cleaned, _) = purify(&schedule, &denoiser, &guide, &adv.adversarial, None, &config, &mut rng)?;
        println!(
            "{:>16}: standard {:.3}, robust {:.3}",
            mode.name(),
            accuracy(&clf.predict(&clean)?, &test.y),
            accuracy(&clf.predict(&cleaned)?, &test.y)
        );
    }
    Ok(())
}
