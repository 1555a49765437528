use proptest::prelude::*;

use agdm::attacks::{pgd_attack, project_ball, AttackSpec, Norm};
use agdm::diffusion::{q_sample, Denoiser, NoiseSchedule, SigmaMode};
use agdm::guidance::{trades_loss, GuidanceClassifier, RobustTrainConfig};
use agdm::harness::{generate_dataset, Checkpoint, DatasetKind, DatasetSpec, ScheduleSpec};
use agdm::purifier::{
    draw_noise_plan, guided_reverse_step_with_noise, purify_with_noise, GuidanceMode, PurifyConfig,
};
use agdm::tensor::{kl_divergence, softmax_rows};
use agdm::{Graph, Rng, Tensor};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    Rng::new(seed, 0).normal_tensor(&[rows, cols]).scale(scale)
}

fn norm() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::LInf), Just(Norm::L2)]
}

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (2usize..300, 1e-5f64..1e-2, 1e-2f64..0.5, any::<bool>()).prop_map(|(t, b0, b1, post)| {
        let mode = if post { SigmaMode::Posterior } else { SigmaMode::Beta };
        NoiseSchedule::linear(t, b0, b1, mode).unwrap()
    })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn projection_lands_in_the_ball_and_is_idempotent(
        rows in 1usize..5, cols in 1usize..9, seed: u64, scale in 0.01f64..5.0,
        eps in 0.0f64..2.0, n in norm(),
    ) {
        let d = tensor(rows, cols, seed, scale);
        let p = project_ball(&d, eps, n);
        for i in 0..rows {
            prop_assert!(n.measure(p.row(i)) <= eps * (1.0 + 1e-12) + 1e-15);
        }
        let q = project_ball(&p, eps, n);
        prop_assert!(q.max_abs_diff(&p) <= 1e-15 * (1.0 + eps));
        // Points already inside stay put.
        let inside = project_ball(&d.scale(0.0), eps, n);
        prop_assert!(inside.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..10, seed: u64, scale in 0.1f64..50.0) {
        let s = softmax_rows(&tensor(rows, cols, seed, scale)).unwrap();
        for i in 0..rows {
            let r = s.row(i);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(rows in 1usize..5, cols in 2usize..8, a: u64, b: u64) {
        let p = tensor(rows, cols, a, 2.0);
        let q = tensor(rows, cols, b, 2.0);
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(p).unwrap(), g.constant(q).unwrap());
        let kl = kl_divergence(&mut g, pv, qv).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-15);
        let same = kl_divergence(&mut g, pv, pv).unwrap();
        prop_assert!(g.value(same).item().abs() < 1e-15);
    }

    #[test]
    fn schedule_products_are_monotone(s in schedule()) {
        let ab = s.alpha_bars();
        prop_assert!(ab[0] < 1.0 && ab[0] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        for t in 0..s.steps() {
            prop_assert!(s.sigma(t) >= 0.0);
            prop_assert!(s.sigma(t).powi(2) <= s.beta(t) * (1.0 + 1e-12));
        }
        if s.sigma_mode() == SigmaMode::Posterior {
            prop_assert_eq!(s.sigma(0), 0.0);
        }
    }

    #[test]
    fn q_sample_is_affine_in_data_and_noise(s in schedule(), seed: u64, frac in 0.0f64..1.0) {
        let t = ((s.steps() - 1) as f64 * frac) as usize;
        let x = tensor(3, 2, seed, 1.0);
        let e = tensor(3, 2, seed ^ 1, 1.0);
        let xt = q_sample(&s, &x, t, &e).unwrap();
        let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for k in 0..6 {
            let want = a * x.data()[k] + b * e.data()[k];
            prop_assert!((xt.data()[k] - want).abs() <= 1e-14 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct(seed: u64, stream: u64) {
        let a: Vec<u64> = { let mut r = Rng::new(seed, stream); (0..4).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = Rng::new(seed, stream); (0..4).map(|_| r.next_u64()).collect() };
        let c: Vec<u64> = { let mut r = Rng::new(seed, stream ^ 1); (0..4).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn tensor_json_round_trip_is_bit_exact(rows in 1usize..4, cols in 1usize..6, seed: u64, e in -300i32..300) {
        let t = tensor(rows, cols, seed, 10f64.powi(e));
        let back: Tensor = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&t));
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed: u64, dim in 1usize..5, classes in 2usize..5, noise: bool) {
        let mut rng = Rng::new(seed, 0);
        let clf = GuidanceClassifier::with_architecture(dim, classes, &[7, 5], noise, 4, &mut rng).unwrap();
        let c = Checkpoint::from_classifier(&clf, seed);
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap().to_classifier().unwrap();
        for (a, b) in clf.mlp().parameters().iter().zip(back.mlp().parameters()) {
            prop_assert!(a.bit_eq(b));
        }
        let den = Denoiser::with_architecture(dim, &[6], 4, &mut rng).unwrap();
        let c = Checkpoint::from_denoiser(&den, ScheduleSpec::default(), seed);
        let (back, spec) = Checkpoint::from_json(&c.to_json().unwrap()).unwrap().to_denoiser().unwrap();
        prop_assert_eq!(spec, ScheduleSpec::default());
        for (a, b) in den.mlp().parameters().iter().zip(back.mlp().parameters()) {
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn datasets_are_deterministic_balanced_and_disjoint(
        kind in prop_oneof![
            Just(DatasetKind::GaussianMixtureK),
            Just(DatasetKind::TwoMoons),
            Just(DatasetKind::TinyBars8x8),
        ],
        size in 40usize..300, seed: u64, classes in 2usize..5,
    ) {
        let spec = match kind {
            DatasetKind::GaussianMixtureK => {
                let mut s = DatasetSpec::mixture(size, seed);
                s.class_count = classes;
                s
            }
            DatasetKind::TwoMoons => DatasetSpec::two_moons(size, 0.1, seed),
            DatasetKind::TinyBars8x8 => DatasetSpec::bars(size, classes, seed),
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.train.len() + a.test.len(), size);
        let c = spec.class_count;
        let mut counts = vec![0usize; c];
        for &y in a.train.y.iter().chain(&a.test.y) {
            counts[y] += 1;
        }
        let mean = size as f64 / c as f64;
        prop_assert!(counts.iter().all(|&k| (k as f64 - mean).abs() <= 0.05 * mean + 1.0));
        // No test row also appears in train.
        for i in 0..a.test.len() {
            prop_assert!((0..a.train.len()).all(|j| a.train.x.row(j) != a.test.x.row(i)));
        }
    }

    #[test]
    fn robust_objective_dominates_cross_entropy(seed: u64, lambda in 0.0f64..10.0, eps in 0.0f64..0.5) {
        let mut rng = Rng::new(seed, 1);
        let clf = GuidanceClassifier::with_architecture(2, 3, &[8], false, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[6, 2]);
        let y = [0, 1, 2, 0, 1, 2];
        let cfg = RobustTrainConfig { lambda, epsilon: eps, noise_augment: false, ..Default::default() };
        let (loss, d) = trades_loss(&clf, &x, &y, &[0.0; 6], &cfg, &mut rng).unwrap();
        prop_assert!(d.discrepancy >= -1e-15);
        prop_assert!(loss >= d.cross_entropy - 1e-12);
        prop_assert!((loss - d.cross_entropy - lambda * d.discrepancy).abs() < 1e-12);
    }

    #[test]
    fn pgd_stays_in_the_ball(seed: u64, eps in 0.0f64..1.0, n in norm()) {
        let mut rng = Rng::new(seed, 2);
        let clf = GuidanceClassifier::with_architecture(3, 3, &[6], false, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[5, 3]);
        let mut spec = AttackSpec::classifier_only(eps);
        spec.norm = n;
        spec.steps = Some(5);
        let r = pgd_attack(&clf, &x, &[0, 1, 2, 0, 1], &spec).unwrap();
        let d = r.adversarial.sub(&x).unwrap();
        for i in 0..5 {
            prop_assert!(n.measure(d.row(i)) <= eps * (1.0 + 1e-12) + 1e-15);
        }
        prop_assert_eq!(r.losses.len(), 6);
    }

    #[test]
    fn guidance_shift_is_linear_in_scale(seed: u64, s in 0.0f64..5.0, t in 1usize..20) {
        let mut rng = Rng::new(seed, 3);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2, SigmaMode::Posterior).unwrap();
        let den = Denoiser::with_architecture(2, &[6], 4, &mut rng).unwrap();
        let clf = GuidanceClassifier::with_architecture(2, 3, &[6], true, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[3, 2]);
        let xa = rng.normal_tensor(&[3, 2]);
        let z = Tensor::zeros(&[3, 2]);
        let step = |s: f64, mode| {
            let cfg = PurifyConfig { s, guidance_mode: mode, t_star: 5, ..Default::default() };
            guided_reverse_step_with_noise(&sched, &den, &clf, &x, t, Some(&[0, 1, 2]), &xa, &cfg, Some(&z)).unwrap().0
        };
        let base = step(0.0, GuidanceMode::Full);
        let one = step(1.0, GuidanceMode::Full).sub(&base).unwrap();
        let at_s = step(s, GuidanceMode::Full).sub(&base).unwrap();
        prop_assert!(at_s.max_abs_diff(&one.scale(s)) <= 1e-12 * (1.0 + one.norm_l2() * s));
    }

    #[test]
    fn purification_trace_counts_down(seed: u64, t_star in 1usize..12, mode_ix in 0usize..4) {
        let mut rng = Rng::new(seed, 4);
        let sched = NoiseSchedule::linear(12, 1e-3, 0.2, SigmaMode::Posterior).unwrap();
        let den = Denoiser::with_architecture(2, &[6], 4, &mut rng).unwrap();
        let clf = GuidanceClassifier::with_architecture(2, 3, &[6], true, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 2]);
        let cfg = PurifyConfig { t_star, guidance_mode: GuidanceMode::ALL[mode_ix], ..Default::default() };
        let noise = draw_noise_plan(x.shape(), &cfg, &mut rng);
        let (out, trace) = purify_with_noise(&sched, &den, &clf, &x, None, &cfg, &noise).unwrap();
        let ts: Vec<usize> = trace.steps.iter().map(|r| r.t).collect();
        prop_assert_eq!(ts, (0..t_star).rev().collect::<Vec<_>>());
        prop_assert!(out.bit_eq(&trace.output));
    }
}
