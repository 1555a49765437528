use agdm::attacks::AttackSpec;
use agdm::guidance::GuidanceClassifier;
use agdm::harness::*;
use agdm::purifier::GuidanceMode;
use agdm::tensor::nn::{Activation, Mlp};
use agdm::{Error, Tensor};

fn linear(w: Tensor, b: Tensor) -> GuidanceClassifier {
    let d = w.shape()[0];
    let mlp = Mlp::from_parameters(vec![w], vec![b], Activation::Silu).unwrap();
    GuidanceClassifier::from_mlp(mlp, d, false, 0).unwrap()
}

fn ring(classes: usize) -> (DatasetSpec, Dataset) {
    let mut spec = DatasetSpec::mixture(400, 5);
    spec.class_count = classes;
    spec.noise = 0.0;
    let d = generate_dataset(&spec).unwrap();
    (spec, d)
}

/// Logits `x · c_k` pick the nearest centre on the unit circle.
fn nearest_centre(spec: &DatasetSpec) -> GuidanceClassifier {
    let c = spec.mixture_centres();
    let k = c.len();
    let mut w = vec![0.0; 2 * k];
    for (j, p) in c.iter().enumerate() {
        w[j] = p[0];
        w[k + j] = p[1];
    }
    linear(Tensor::new(vec![2, k], w).unwrap(), Tensor::zeros(&[k]))
}

#[test]
fn perfect_and_constant_classifiers() {
    let (spec, d) = ring(4);
    let opts = EvalOptions { seed: 1, batch_size: 7 };
    let attacks = [AttackSpec::classifier_only(0.05)];
    let r = evaluate(&nearest_centre(&spec), None, &d.test, &attacks, &opts).unwrap();
    assert_eq!(r.standard_accuracy, 1.0);
    assert_eq!(r.n_samples, d.test.len());
    assert_eq!(r.attacks[0].robust_accuracy, 1.0);

    let b = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
    let constant = linear(Tensor::zeros(&[2, 4]), b);
    let r = evaluate(&constant, None, &d.test, &attacks, &opts).unwrap();
    assert_eq!(r.standard_accuracy, 0.25);
    assert_eq!(r.attacks[0].robust_accuracy, 0.25);
}

#[test]
fn accuracies_are_counts_over_samples() {
    let (spec, d) = ring(4);
    let clf = nearest_centre(&spec);
    let opts = EvalOptions { seed: 3, batch_size: 16 };
    let mut small = AttackSpec::classifier_only(0.4);
    small.name = "small".into();
    let attacks = [AttackSpec::classifier_only(0.9), small];
    let r = evaluate(&clf, None, &d.test, &attacks, &opts).unwrap();
    assert_eq!(r.standard_accuracy, r.standard_correct as f64 / r.n_samples as f64);
    for o in &r.attacks {
        assert_eq!(o.robust_accuracy, o.correct as f64 / o.n_samples as f64);
        assert_eq!(r.robust_accuracy[&o.attack], o.robust_accuracy);
    }
    assert!(r.attacks[0].robust_accuracy <= r.attacks[1].robust_accuracy);
}

#[test]
fn duplicate_attack_names_are_rejected() {
    let (spec, d) = ring(4);
    let attacks = [AttackSpec::classifier_only(0.1), AttackSpec::classifier_only(0.2)];
    let r = evaluate(&nearest_centre(&spec), None, &d.test, &attacks, &EvalOptions::default());
    assert!(r.is_err());
}

#[test]
fn evaluation_is_reproducible_for_a_seed() {
    let (spec, d) = ring(4);
    let clf = nearest_centre(&spec);
    let mut a = AttackSpec::classifier_only(0.6);
    a.random_start = true;
    let run = |seed| {
        evaluate(&clf, None, &d.test, &[a.clone()], &EvalOptions { seed, batch_size: 32 }).unwrap()
    };
    assert_eq!(run(4), run(4));
}

fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut spec = DatasetSpec::mixture(240, 2);
    spec.class_count = 4;
    spec.noise = 0.1;
    let mut c = ExperimentConfig::new(spec, dir, 11);
    c.experiment_id = "tiny".into();
    c.schedule.steps = 20;
    c.purify.t_star = 3;
    c.diffusion.epochs = 2;
    c.classifier.epochs = 3;
    c.guidance.epochs = 1;
    c.guidance.epsilon = 0.2;
    c.guidance.inner_steps = 2;
    c.guidance_modes = vec![GuidanceMode::None, GuidanceMode::Full];
    let mut e2e = AttackSpec::end_to_end(0.2);
    e2e.steps = Some(2);
    e2e.eot_samples = Some(2);
    c.attacks = vec![AttackSpec::classifier_only(0.2), e2e];
    c.eval_samples = 12;
    c.eval_batch = 5;
    c
}

#[test]
fn disabled_stages_produce_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.stages = Stages::all(false);
    let r = run_experiment(c).unwrap();
    assert!(r.stages_run.is_empty());
    assert!(r.eval.is_none());
    assert!(dir.path().join("report.json").exists());
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn experiment_writes_outputs_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = tiny_config(a.path());
    c.lambda_sweep = vec![0.0, 1.0, 6.0];
    let r = run_experiment(c.clone()).unwrap();
    assert_eq!(
        r.stages_run,
        ["train-diffusion", "train-guidance", "attack", "evaluate", "report"]
    );
    let eval = r.eval.unwrap();
    assert_eq!(eval.lambda_sweep.len(), 3);
    assert_eq!(eval.modes.len(), 2);

    let layout = Layout { root: a.path().into() };
    let plot = std::fs::read_to_string(layout.lambda_plot()).unwrap();
    assert_eq!(plot.lines().count(), 1 + 3);
    let metrics = std::fs::read_to_string(layout.metrics()).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    // 2 attacks × (undefended + 2 modes) + 1 classifier-only attack × 3 λ.
    assert_eq!(metrics.lines().count(), 1 + 6 + 3);
    assert!(layout.timings().exists());
    assert!(layout.attack("pgd40").exists());

    // Same config in a fresh directory.
    c.output_dir = b.path().into();
    run_experiment(c.clone()).unwrap();
    let again = std::fs::read(Layout { root: b.path().into() }.metrics()).unwrap();
    assert_eq!(again, metrics.as_bytes());

    // Rerun in place reuses the checkpoints unchanged.
    let ckpt = std::fs::read(layout.denoiser()).unwrap();
    let mut c2 = c.clone();
    c2.output_dir = a.path().into();
    run_experiment(c2).unwrap();
    assert_eq!(std::fs::read(layout.denoiser()).unwrap(), ckpt);
    assert_eq!(std::fs::read(layout.metrics()).unwrap(), metrics.as_bytes());
}

#[test]
fn evaluate_without_checkpoints_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.stages = Stages { evaluate: true, ..Stages::all(false) };
    match run_experiment(c) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_checkpoint_is_reported_by_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let layout = Layout { root: dir.path().into() };
    std::fs::create_dir_all(layout.checkpoints()).unwrap();
    std::fs::write(layout.denoiser(), "{ not json").unwrap();
    match run_experiment(c) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train-diffusion"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_configs_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.purify.t_star = 50;
    assert!(matches!(run_experiment(c), Err(Error::Stage { ref stage, .. }) if stage == "config"));
    let text = r#"{"seed": 1, "output_dir": "x", "dataset": {"kind": "two_moons", "size": 10}, "bogus": 1}"#;
    assert!(ExperimentConfig::from_json(text).is_err());
    let mut c = tiny_config(dir.path());
    c.attacks.push(AttackSpec::classifier_only(0.1));
    assert!(run_experiment(c).is_err());
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["toy_benchmark", "quick"] {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("examples/configs")
            .join(format!("{name}.json"));
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.experiment_id, name);
        c.materialized().validate().unwrap();
    }
}
