use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Perturbation geometry. Balls are taken per row of a `[n, d]` batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[default]
    #[serde(rename = "l_inf")]
    LInf,
    #[serde(rename = "l2")]
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::LInf => "l_inf",
            Norm::L2 => "l2",
        }
    }

    /// Norm of one row.
    pub fn measure(self, row: &[f64]) -> f64 {
        match self {
            Norm::LInf => row.iter().fold(0.0, |m, v| m.max(v.abs())),
            Norm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l_inf" | "linf" | "inf" => Ok(Norm::LInf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::invalid(format!("unknown norm `{other}`"))),
        }
    }
}

fn row_width(t: &Tensor) -> usize {
    match t.shape() {
        [] => 1,
        [d] => *d,
        s => s[1..].iter().product(),
    }
}

/// Projects every row of `delta` onto the `epsilon` ball.
///
/// `l_inf` clamps elementwise; `l2` rescales rows whose norm exceeds `epsilon`.
pub fn project_ball(delta: &Tensor, epsilon: f64, norm: Norm) -> Tensor {
    let eps = epsilon.max(0.0);
    match norm {
        Norm::LInf => delta.map(|v| v.clamp(-eps, eps)),
        Norm::L2 => {
            let mut out = delta.clone();
            let w = row_width(delta);
            if w == 0 {
                return out;
            }
            for row in out.data_mut().chunks_mut(w) {
                let n = Norm::L2.measure(row);
                if n > eps {
                    let c = eps / n;
                    for v in row.iter_mut() {
                        *v *= c;
                    }
                }
            }
            out
        }
    }
}

/// Steepest-ascent direction for a unit step: `sign(g)` for `l_inf`, the
/// row-normalized gradient for `l2` (zero rows stay zero).
pub fn ascent_direction(grad: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::LInf => grad.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let mut out = grad.clone();
            let w = row_width(grad);
            if w == 0 {
                return out;
            }
            for row in out.data_mut().chunks_mut(w) {
                let n = Norm::L2.measure(row);
                if n > 0.0 {
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
            }
            out
        }
    }
}

/// Uniform draw from the `epsilon` ball, one per row.
pub fn random_in_ball(shape: &[usize], epsilon: f64, norm: Norm, rng: &mut Rng) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let w = row_width(&out);
    if w == 0 {
        return out;
    }
    match norm {
        Norm::LInf => {
            for v in out.data_mut() {
                *v = rng.uniform_range(-epsilon, epsilon);
            }
        }
        Norm::L2 => {
            for row in out.data_mut().chunks_mut(w) {
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                let n = Norm::L2.measure(row);
                let r = epsilon * rng.uniform().powf(1.0 / w as f64);
                if n > 0.0 {
                    for v in row.iter_mut() {
                        *v *= r / n;
                    }
                }
            }
        }
    }
    out
}

/// Largest per-row norm of `delta`.
pub fn max_row_norm(delta: &Tensor, norm: Norm) -> f64 {
    let w = row_width(delta);
    if w == 0 {
        return 0.0;
    }
    delta
        .data()
        .chunks(w)
        .map(|r| norm.measure(r))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let inside = Tensor::vector(vec![0.05, -0.02]);
        assert_eq!(project_ball(&inside, 0.1, Norm::LInf), inside);
        assert_eq!(project_ball(&inside, 0.1, Norm::L2), inside);

        let d = Tensor::vector(vec![0.5, -0.5]);
        assert_eq!(project_ball(&d, 0.1, Norm::LInf).data(), &[0.1, -0.1]);

        let d = Tensor::vector(vec![3.0, 4.0]);
        let p = project_ball(&d, 1.0, Norm::L2);
        assert!((p.data()[0] - 0.6).abs() < 1e-15 && (p.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_projection_is_per_row() {
        let d = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.1, 0.0]).unwrap();
        let p = project_ball(&d, 1.0, Norm::L2);
        assert_eq!(p.row(1), &[0.1, 0.0]);
        assert!((Norm::L2.measure(p.row(0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn directions() {
        let g = Tensor::new(vec![2, 2], vec![0.3, -2.0, 0.0, 0.0]).unwrap();
        assert_eq!(ascent_direction(&g, Norm::LInf).data(), &[1.0, -1.0, 0.0, 0.0]);
        let d = ascent_direction(&g, Norm::L2);
        assert!((Norm::L2.measure(d.row(0)) - 1.0).abs() < 1e-15);
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn random_start_stays_inside() {
        let mut rng = Rng::new(1, 0);
        for norm in [Norm::LInf, Norm::L2] {
            let d = random_in_ball(&[50, 7], 0.3, norm, &mut rng);
            assert!(max_row_norm(&d, norm) <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("l_inf".parse::<Norm>().unwrap(), Norm::LInf);
        assert_eq!("l2".parse::<Norm>().unwrap(), Norm::L2);
        assert!("l1".parse::<Norm>().is_err());
    }
}
