use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 0x6461_7461;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `k` isotropic Gaussians on a circle, one class per mode.
    GaussianMixtureK,
    TwoMoons,
    /// 8×8 images of a horizontal or vertical bar; 3–4 classes add
    /// double-width bars.
    #[serde(rename = "tiny_bars_8x8")]
    TinyBars8x8,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixtureK => "gaussian_mixture_k",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::TinyBars8x8 => "tiny_bars_8x8",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mixture_k" => Ok(DatasetKind::GaussianMixtureK),
            "two_moons" => Ok(DatasetKind::TwoMoons),
            "tiny_bars_8x8" => Ok(DatasetKind::TinyBars8x8),
            other => Err(Error::invalid(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Total examples across both splits.
    pub size: usize,
    /// Fraction of `size` held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Per-coordinate Gaussian noise standard deviation.
    pub noise: f64,
    pub class_count: usize,
    /// Mixture radius, or the half range `r` of bar images in `[−r, r]`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_scale() -> f64 {
    1.0
}

impl DatasetSpec {
    /// 8 modes of σ = 0.05 on the unit circle.
    pub fn mixture(size: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianMixtureK,
            size,
            test_fraction: default_test_fraction(),
            noise: 0.05,
            class_count: 8,
            scale: 1.0,
            seed,
        }
    }

    pub fn two_moons(size: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            size,
            test_fraction: default_test_fraction(),
            noise,
            class_count: 2,
            scale: 1.0,
            seed,
        }
    }

    pub fn bars(size: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::TinyBars8x8,
            size,
            test_fraction: default_test_fraction(),
            noise: 0.1,
            class_count: classes,
            scale: 1.0,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianMixtureK | DatasetKind::TwoMoons => 2,
            DatasetKind::TinyBars8x8 => 64,
        }
    }

    /// Range the clean data is clipped to, where there is one.
    pub fn data_range(&self) -> Option<(f64, f64)> {
        match self.kind {
            DatasetKind::TinyBars8x8 => Some((-self.scale, self.scale)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes_ok = match self.kind {
            DatasetKind::GaussianMixtureK => self.class_count >= 2,
            DatasetKind::TwoMoons => self.class_count == 2,
            DatasetKind::TinyBars8x8 => (2..=4).contains(&self.class_count),
        };
        if !classes_ok {
            return Err(Error::invalid(format!(
                "{} cannot have {} classes",
                self.kind.name(),
                self.class_count
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::invalid("noise must be ≥ 0 and scale > 0"));
        }
        if self.size < 2 * self.class_count {
            return Err(Error::invalid("size must cover every class in both splits"));
        }
        Ok(())
    }

    /// Mode centres of the Gaussian mixture.
    pub fn mixture_centres(&self) -> Vec<[f64; 2]> {
        (0..self.class_count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / self.class_count as f64;
                [self.scale * a.cos(), self.scale * a.sin()]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The first `n` examples (all of them when `n` is larger).
    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

/// Deterministic train/test splits with class counts differing by at most
/// one. Every test example is a distinct draw from the train examples.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, DATA_STREAM);
    let c = spec.class_count;
    let labels: Vec<usize> = (0..spec.size).map(|i| i % c).collect();
    let mut rows = Vec::with_capacity(spec.size);
    for &y in &labels {
        rows.push(match spec.kind {
            DatasetKind::GaussianMixtureK => mixture_point(spec, y, &mut rng),
            DatasetKind::TwoMoons => moon_point(spec, y, &mut rng),
            DatasetKind::TinyBars8x8 => bar_image(spec, y, &mut rng),
        });
    }
    // Stratified split: the first `test_per_class` of each class go to test
    // after a shuffle.
    let order = rng.permutation(spec.size);
    let n_test = ((spec.size as f64) * spec.test_fraction).round() as usize;
    let mut per_class_quota = vec![n_test / c; c];
    for q in per_class_quota.iter_mut().take(n_test % c) {
        *q += 1;
    }
    let (mut test_idx, mut train_idx) = (Vec::new(), Vec::new());
    for i in order {
        let y = labels[i];
        if per_class_quota[y] > 0 {
            per_class_quota[y] -= 1;
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let make = |idx: &[usize]| -> Result<Split> {
        let data: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        Ok(Split {
            x: if data.is_empty() {
                Tensor::zeros(&[0, spec.input_dim()])
            } else {
                Tensor::from_rows(&data)?
            },
            y: idx.iter().map(|&i| labels[i]).collect(),
        })
    };
    Ok(Dataset {
        train: make(&train_idx)?,
        test: make(&test_idx)?,
    })
}

fn mixture_point(spec: &DatasetSpec, y: usize, rng: &mut Rng) -> Vec<f64> {
    let centre = spec.mixture_centres()[y];
    vec![
        centre[0] + spec.noise * rng.normal(),
        centre[1] + spec.noise * rng.normal(),
    ]
}

/// Upper arc `(cos θ, sin θ)` for class 0, lower arc `(1 − cos θ, ½ − sin θ)`
/// for class 1, `θ ∈ [0, π]`.
fn moon_point(spec: &DatasetSpec, y: usize, rng: &mut Rng) -> Vec<f64> {
    let theta = std::f64::consts::PI * rng.uniform();
    let (px, py) = if y == 0 {
        (theta.cos(), theta.sin())
    } else {
        (1.0 - theta.cos(), 0.5 - theta.sin())
    };
    vec![
        spec.scale * px + spec.noise * rng.normal(),
        spec.scale * py + spec.noise * rng.normal(),
    ]
}

/// Background `−r`, bar pixels `+r`, plus noise, clipped to `[−r, r]`.
fn bar_image(spec: &DatasetSpec, y: usize, rng: &mut Rng) -> Vec<f64> {
    let r = spec.scale;
    let vertical = y % 2 == 1;
    let width = if y >= 2 { 2 } else { 1 };
    let pos = rng.below(9 - width);
    let mut img = vec![-r; 64];
    for row in 0..8 {
        for col in 0..8 {
            let line = if vertical { col } else { row };
            if line >= pos && line < pos + width {
                img[row * 8 + col] = r;
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + spec.noise * rng.normal()).clamp(-r, r);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_balanced_and_reproducible() {
        let spec = DatasetSpec::mixture(4000, 3);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.train.x.bit_eq(&b.train.x));
        assert_eq!(a.train.len() + a.test.len(), 4000);
        assert_eq!(a.test.len(), 800);
        for split in [&a.train, &a.test] {
            let mut counts = vec![0usize; 8];
            for &y in &split.y {
                counts[y] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        let other = generate_dataset(&DatasetSpec::mixture(4000, 4)).unwrap();
        assert_ne!(other.train.x, a.train.x);
    }

    #[test]
    fn splits_are_disjoint() {
        let d = generate_dataset(&DatasetSpec::two_moons(300, 0.1, 1)).unwrap();
        for i in 0..d.test.len() {
            for j in 0..d.train.len() {
                assert_ne!(d.test.x.row(i), d.train.x.row(j));
            }
        }
    }

    #[test]
    fn noiseless_moons_lie_on_the_arcs() {
        let d = generate_dataset(&DatasetSpec::two_moons(500, 0.0, 9)).unwrap();
        for split in [&d.train, &d.test] {
            for (i, &y) in split.y.iter().enumerate() {
                let [px, py] = [split.x.row(i)[0], split.x.row(i)[1]];
                let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
                let radial = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                assert!((radial - 1.0).abs() < 1e-9);
                // Upper half-circle for class 0, lower for class 1.
                let side = if y == 0 { py - cy } else { cy - py };
                assert!(side >= -1e-12);
            }
        }
    }

    #[test]
    fn bars_have_the_declared_structure() {
        let mut spec = DatasetSpec::bars(400, 4, 2);
        spec.noise = 0.0;
        let d = generate_dataset(&spec).unwrap();
        for (i, &y) in d.train.y.iter().enumerate() {
            let img = d.train.x.row(i);
            let on = img.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(on, if y >= 2 { 16 } else { 8 });
            assert!(img.iter().all(|&v| v == 1.0 || v == -1.0));
        }
        let noisy = generate_dataset(&DatasetSpec::bars(100, 2, 2)).unwrap();
        assert!(noisy.train.x.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(spec.data_range(), Some((-1.0, 1.0)));
    }

    #[test]
    fn invalid_specs() {
        let mut s = DatasetSpec::two_moons(100, 0.1, 0);
        s.class_count = 3;
        assert!(generate_dataset(&s).is_err());
        assert!(generate_dataset(&DatasetSpec::bars(100, 5, 0)).is_err());
        assert!(generate_dataset(&DatasetSpec::mixture(10, 0)).is_err());
        assert!("moons".parse::<DatasetKind>().is_err());
        let json = r#"{"kind":"tiny_bars_8x8","size":50,"noise":0.1,"class_count":2,"seed":1}"#;
        let spec: DatasetSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.scale, 1.0);
    }
}
