use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Pixels at or above this intensity on the clean image count as foreground stroke.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    Clean,
    /// Background pixels become `(1 − w)·v + w·texture`; strokes are left alone.
    /// `color` expands to three channels with an independent texture per channel.
    BackgroundBlend {
        weight: f64,
        #[serde(default)]
        color: bool,
    },
    Invert,
    Brightness {
        factor: f64,
    },
    Noise {
        sigma: f64,
    },
}

impl DomainKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::BackgroundBlend { .. } => "background_blend",
            Self::Invert => "invert",
            Self::Brightness { .. } => "brightness",
            Self::Noise { .. } => "noise",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Domain(what));
        match *self {
            Self::BackgroundBlend { weight, .. } if !(0.0..=1.0).contains(&weight) => {
                bad(format!("blend weight {weight} outside [0, 1]"))
            }
            Self::Brightness { factor } if !(factor > 0.0 && factor <= 1.0) => {
                bad(format!("brightness factor {factor} outside (0, 1]"))
            }
            Self::Noise { sigma } if !(0.0..=0.5).contains(&sigma) => {
                bad(format!("noise sigma {sigma} outside [0, 0.5]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(flatten)]
    pub kind: DomainKind,
    #[serde(default)]
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Smooth value noise in `[0, 1]`: two octaves of bilinearly interpolated random grids.
fn value_noise(h: usize, w: usize, rng: &mut impl Rng, out: &mut [f64]) {
    out.fill(0.0);
    let mut total_weight = 0.0;
    for (cells, weight) in [(3usize, 1.0), (6usize, 0.5)] {
        let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.random::<f64>())
            .collect();
        for y in 0..h {
            let gy = y as f64 / (h - 1).max(1) as f64 * cells as f64;
            let y0 = (gy.floor() as usize).min(cells - 1);
            let fy = gy - y0 as f64;
            let sy = fy * fy * (3.0 - 2.0 * fy);
            for x in 0..w {
                let gx = x as f64 / (w - 1).max(1) as f64 * cells as f64;
                let x0 = (gx.floor() as usize).min(cells - 1);
                let fx = gx - x0 as f64;
                let sx = fx * fx * (3.0 - 2.0 * fx);
                let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
                let bottom = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
                out[y * w + x] += weight * (top * (1.0 - sy) + bottom * sy);
            }
        }
        total_weight += weight;
    }
    out.iter_mut().for_each(|v| *v /= total_weight);
}

/// Applies a domain shift to every image. Labels are untouched and outputs stay in `[0, 1]`.
pub fn apply_domain(ds: &Dataset, spec: &DomainSpec) -> Result<Dataset> {
    spec.kind.validate()?;
    let shape = ds.images.shape();
    if shape.len() != 4 {
        return Err(Error::Domain(format!(
            "domain transforms expect [n, c, h, w] images, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut images = match spec.kind {
        DomainKind::Clean => ds.images.clone(),
        DomainKind::Invert => ds.images.map(|v| 1.0 - v),
        DomainKind::Brightness { factor } => ds.images.map(|v| v * factor),
        DomainKind::Noise { sigma } => {
            let mut rng = stream(spec.seed, Stream::Texture);
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
            let mut out = ds.images.clone();
            if sigma > 0.0 {
                for v in out.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            out
        }
        DomainKind::BackgroundBlend { weight, color } => {
            let out_c = if color { 3 } else { c };
            if color && c != 1 && c != 3 {
                return Err(Error::Domain(format!("color blend needs 1 or 3 channels, got {c}")));
            }
            let mut rng = stream(spec.seed, Stream::Texture);
            let mut texture = vec![0.0; plane];
            let mut data = vec![0.0; n * out_c * plane];
            let src = ds.images.data();
            for i in 0..n {
                for oc in 0..out_c {
                    value_noise(h, w, &mut rng, &mut texture);
                    let ic = if c == out_c { oc } else { 0 };
                    let from = &src[(i * c + ic) * plane..(i * c + ic + 1) * plane];
                    let to = &mut data[(i * out_c + oc) * plane..(i * out_c + oc + 1) * plane];
                    for p in 0..plane {
                        let v = from[p];
                        to[p] = if v >= FOREGROUND_THRESHOLD {
                            v
                        } else {
                            (1.0 - weight) * v + weight * texture[p]
                        };
                    }
                }
            }
            Tensor::new(vec![n, out_c, h, w], data)?
        }
    };
    images.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Dataset::new(
        images,
        ds.labels.clone(),
        ds.class_count,
        spec.kind.name(),
        spec.seed,
    )
}
