//! Train guidance classifiers with the robust objective at several λ and
//! report the accuracy/robustness trade-off under classifier-only PGD.
//!
//! `cargo run --release --example robust_guidance -- [epochs]`

use agdm::attacks::{accuracy, pgd_attack, AttackSpec};
use agdm::guidance::{train_guidance, GuidanceClassifier, RobustTrainConfig};
use agdm::harness::{generate_dataset, DatasetSpec, ScheduleSpec};
use agdm::{Result, Rng};

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut spec = DatasetSpec::mixture(4000, 0);
    spec.noise = 0.1;
    let data = generate_dataset(&spec)?;
    let schedule = ScheduleSpec::default().build()?;
    let test = data.test.head(256);
    let eps = 0.25;

    println!("lambda  standard  robust(eps={eps})");
    for lambda in [0.0, 1.0, 6.0] {
        let mut clf = GuidanceClassifier::new(2, spec.class_count, true, &mut Rng::new(0, 3))?;
        let config = RobustTrainConfig {
            lambda,
            epsilon: eps,
            epochs,
            augment_max_t: Some(30),
            robust_noisy: false,
            ..Default::default()
        };
        train_guidance(&mut clf, &data.train.x, &data.train.y, Some(&schedule), &config)?;
        let clean = accuracy(&clf.predict(&test.x)?, &test.y);
        let adv = pgd_attack(&clf, &test.x, &test.y, &AttackSpec::classifier_only(eps))?;
        println!("{lambda:>6}  {clean:>8.3}  {:>8.3}", 1.0 - adv.success_rate());
    }
    Ok(())
}
