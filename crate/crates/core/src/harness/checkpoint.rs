use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoisePredictor, NoiseSchedule, SigmaMode};
use crate::error::{Error, Result};
use crate::guidance::{DistanceMeasure, GuidanceClassifier};
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Parameters of a linear `β` schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleSpec {
    /// 200 steps with the 1000-step linear range rescaled to keep `ᾱ_T`
    /// comparable.
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            sigma_mode: SigmaMode::Posterior,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Denoiser,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub class_count: usize,
    pub noise_conditioning: bool,
    pub distance_measure: DistanceMeasure,
}

/// On-disk form shared by every model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub module: ModuleKind,
    pub seed: u64,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub shapes: Vec<Vec<usize>>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierMeta>,
}

fn header(
    module: ModuleKind,
    mlp: &Mlp,
    input_dim: usize,
    embed_dim: usize,
    seed: u64,
) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        module,
        seed,
        input_dim,
        embed_dim,
        activation: mlp.activation(),
        shapes: mlp.parameters().iter().map(|t| t.shape().to_vec()).collect(),
        weights: mlp.weights().to_vec(),
        biases: mlp.biases().to_vec(),
        schedule: None,
        classifier: None,
    }
}

impl Checkpoint {
    pub fn from_denoiser(model: &Denoiser, schedule: ScheduleSpec, seed: u64) -> Self {
        Checkpoint {
            schedule: Some(schedule),
            ..header(ModuleKind::Denoiser, model.mlp(), model.data_dim(), model.embed_dim(), seed)
        }
    }

    pub fn from_classifier(clf: &GuidanceClassifier, seed: u64) -> Self {
        Checkpoint {
            classifier: Some(ClassifierMeta {
                class_count: clf.class_count(),
                noise_conditioning: clf.noise_conditioning(),
                distance_measure: clf.distance(),
            }),
            ..header(ModuleKind::Classifier, clf.mlp(), clf.input_dim(), clf.embed_dim(), seed)
        }
    }

    fn mlp(&self) -> Result<Mlp> {
        let actual: Vec<Vec<usize>> = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.shape().to_vec(), b.shape().to_vec()])
            .collect();
        if actual != self.shapes || self.weights.len() != self.biases.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("recorded shapes {:?} do not match parameters {actual:?}", self.shapes),
            ));
        }
        Mlp::from_parameters(self.weights.clone(), self.biases.clone(), self.activation)
    }

    fn expect(&self, module: ModuleKind) -> Result<()> {
        if self.module != module {
            return Err(Error::invalid(format!(
                "checkpoint holds a {:?}, not a {module:?}",
                self.module
            )));
        }
        Ok(())
    }

    pub fn to_denoiser(&self) -> Result<(Denoiser, ScheduleSpec)> {
        self.expect(ModuleKind::Denoiser)?;
        let schedule = self
            .schedule
            .ok_or_else(|| Error::CorruptCheckpoint("denoiser checkpoint without schedule".into()))?;
        let model = Denoiser::from_mlp(self.mlp()?, self.input_dim, self.embed_dim)?;
        Ok((model, schedule))
    }

    pub fn to_classifier(&self) -> Result<GuidanceClassifier> {
        self.expect(ModuleKind::Classifier)?;
        let meta = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::CorruptCheckpoint("classifier checkpoint without metadata".into()))?;
        let mut clf = GuidanceClassifier::from_mlp(
            self.mlp()?,
            self.input_dim,
            meta.noise_conditioning,
            self.embed_dim,
        )?;
        if clf.class_count() != meta.class_count {
            return Err(Error::shape(
                "checkpoint",
                format!("{} output logits for {} classes", clf.class_count(), meta.class_count),
            ));
        }
        clf.set_distance(meta.distance_measure);
        Ok(clf)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and version-checks a checkpoint; nothing is built on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text)
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: v.format_version,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn save_denoiser(path: &Path, model: &Denoiser, schedule: ScheduleSpec, seed: u64) -> Result<()> {
    Checkpoint::from_denoiser(model, schedule, seed).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, ScheduleSpec)> {
    Checkpoint::load(path)?.to_denoiser()
}

pub fn save_classifier(path: &Path, clf: &GuidanceClassifier, seed: u64) -> Result<()> {
    Checkpoint::from_classifier(clf, seed).save(path)
}

pub fn load_classifier(path: &Path) -> Result<GuidanceClassifier> {
    Checkpoint::load(path)?.to_classifier()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bits(ts: Vec<&Tensor>) -> Vec<u64> {
        ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(1, 2);
        let den = Denoiser::with_architecture(3, &[7, 5], 4, &mut rng).unwrap();
        let p = dir.path().join("d.json");
        save_denoiser(&p, &den, ScheduleSpec::default(), 9).unwrap();
        let (back, sch) = load_denoiser(&p).unwrap();
        assert_eq!(bits(back.mlp().parameters()), bits(den.mlp().parameters()));
        assert_eq!(back, den);
        assert_eq!(sch, ScheduleSpec::default());

        let mut clf = GuidanceClassifier::with_architecture(3, 4, &[6], true, 8, &mut rng).unwrap();
        clf.set_distance(DistanceMeasure::L2Logits);
        let p = dir.path().join("c.json");
        save_classifier(&p, &clf, 3).unwrap();
        let back = load_classifier(&p).unwrap();
        assert_eq!(back, clf);
        assert_eq!(bits(back.mlp().parameters()), bits(clf.mlp().parameters()));
    }

    #[test]
    fn awkward_floats_survive() {
        let w = Tensor::new(
            vec![1, 3],
            vec![f64::MIN_POSITIVE, -0.0, 0.1 + 0.2],
        )
        .unwrap();
        let mlp = Mlp::from_parameters(vec![w], vec![Tensor::vector(vec![1e-300, 5e-324, -7.0])], Activation::Silu)
            .unwrap();
        let clf = GuidanceClassifier::from_mlp(mlp, 1, false, 0).unwrap();
        let ck = Checkpoint::from_classifier(&clf, 0);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().to_classifier().unwrap();
        assert_eq!(bits(back.mlp().parameters()), bits(clf.mlp().parameters()));
    }

    #[test]
    fn version_shape_and_corruption_errors() {
        let mut rng = Rng::new(0, 0);
        let clf = GuidanceClassifier::with_architecture(2, 2, &[3], false, 0, &mut rng).unwrap();
        let ck = Checkpoint::from_classifier(&clf, 0);
        let json = ck.to_json().unwrap();

        let bumped = json.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let cut = &json[..json.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_json(""), Err(Error::CorruptCheckpoint(_))));

        let mut bad = ck.clone();
        bad.shapes[0] = vec![9, 9];
        assert!(matches!(bad.to_classifier(), Err(Error::Shape { .. })));
        let mut bad = ck.clone();
        bad.input_dim = 5;
        assert!(matches!(bad.to_classifier(), Err(Error::Shape { .. })));
        let lying = json.replacen("\"shape\":[2,3]", "\"shape\":[2,4]", 1);
        assert!(matches!(Checkpoint::from_json(&lying), Err(Error::CorruptCheckpoint(_))));
        assert!(ck.to_denoiser().is_err());
    }
}
