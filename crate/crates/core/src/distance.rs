//! Transformation costs between environments and between individual samples.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, MIN_VARIANCE};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Empirical diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

impl GaussianEstimate {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::Domain(format!(
                "mean has {} entries but variance has {}",
                mean.len(),
                variance.len()
            )));
        }
        let variance = variance.into_iter().map(|v| v.max(MIN_VARIANCE)).collect();
        Ok(Self { mean, variance, count: 1 })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceConfig {
    pub alpha: f64,
    pub feature_weight: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            feature_weight: 1.0,
        }
    }
}

impl DistanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("feature_weight", self.feature_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sample mean and biased per-coordinate variance (floored at [`MIN_VARIANCE`]).
pub fn estimate_class_gaussian(latents: &[Vec<f64>]) -> Result<GaussianEstimate> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Domain("cannot estimate a Gaussian from zero samples".into()))?;
    let d = first.len();
    if let Some(bad) = latents.iter().find(|z| z.len() != d) {
        return Err(Error::Domain(format!("latent of length {} among length {d}", bad.len())));
    }
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        mean.iter_mut().zip(z).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; d];
    for z in latents {
        for i in 0..d {
            variance[i] += (z[i] - mean[i]).powi(2);
        }
    }
    variance.iter_mut().for_each(|v| *v = (*v / n).max(MIN_VARIANCE));
    Ok(GaussianEstimate {
        mean,
        variance,
        count: latents.len(),
    })
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `Σ (μ′ − μ)² + Σ (√σ′² − √σ²)²`.
pub fn gaussian_w2_squared(a: &GaussianEstimate, b: &GaussianEstimate) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "Gaussians of dimension {} and {} cannot be compared",
            a.dim(),
            b.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..a.dim() {
        total += (a.mean[i] - b.mean[i]).powi(2);
        total += (a.variance[i].sqrt() - b.variance[i].sqrt()).powi(2);
    }
    Ok(total)
}

/// Sum over classes of the per-class squared distance. Entry `c` of each slice is
/// class `c`; `None` marks a class with no samples.
pub fn environment_distance(
    src: &[Option<GaussianEstimate>],
    other: &[Option<GaussianEstimate>],
) -> Result<f64> {
    let classes = src.len().max(other.len());
    let mut total = 0.0;
    for c in 0..classes {
        match (src.get(c).and_then(Option::as_ref), other.get(c).and_then(Option::as_ref)) {
            (Some(a), Some(b)) => total += gaussian_w2_squared(a, b)?,
            (None, None) => {}
            (None, _) => return Err(Error::Domain(format!("class {c} missing from the source environment"))),
            (_, None) => return Err(Error::Domain(format!("class {c} missing from the compared environment"))),
        }
    }
    Ok(total)
}

/// Per-class Gaussians of the latent codes of a labeled batch.
pub fn estimate_environment(latents: &Tensor, labels: &[usize], class_count: usize) -> Result<Vec<Option<GaussianEstimate>>> {
    if latents.rank() != 2 || latents.shape()[0] != labels.len() {
        return Err(Error::Domain(format!(
            "{} labels for latents of shape {:?}",
            labels.len(),
            latents.shape()
        )));
    }
    let d = latents.shape()[1];
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); class_count];
    for (row, &c) in latents.data().chunks(d).zip(labels) {
        groups
            .get_mut(c)
            .ok_or_else(|| Error::Domain(format!("label {c} out of range")))?
            .push(row.to_vec());
    }
    groups
        .iter()
        .map(|g| if g.is_empty() { Ok(None) } else { estimate_class_gaussian(g).map(Some) })
        .collect()
}

/// Per-sample cost `‖F(x) − F(x_src)‖² + w·‖φ(x) − φ(x_src)‖²` on a tape, as a `[batch]` var.
///
/// `x` and `x_src` are `[batch, c, h, w]`; gradients flow into whichever of
/// them (and of the bound parameters) are leaves.
pub fn sample_cost_on<'t>(
    x: Var<'t>,
    x_src: Var<'t>,
    flow: (&FlowModel, &Bound<'t>),
    clf: (&ClassifierModel, &Bound<'t>),
    cfg: &DistanceConfig,
) -> Result<Var<'t>> {
    if x.shape() != x_src.shape() {
        return Err(Error::Shape {
            op: "sample_cost",
            left: x.shape(),
            right: x_src.shape(),
        });
    }
    let batch = x.shape()[0];
    let dim = flow.0.dim();
    let (z, _) = flow.0.forward_on(flow.1, x.reshape(&[batch, dim])?)?;
    let (z_src, _) = flow.0.forward_on(flow.1, x_src.reshape(&[batch, dim])?)?;
    let latent = z.sub(z_src)?.square()?.sum_last()?;
    if cfg.feature_weight == 0.0 {
        return Ok(latent);
    }
    let f = clf.0.features_on(clf.1, x)?;
    let f_src = clf.0.features_on(clf.1, x_src)?;
    latent.add(f.sub(f_src)?.square()?.sum_last()?.scale(cfg.feature_weight)?)
}

/// Value-only cost for single samples shaped like the classifier input.
pub fn sample_cost(
    x: &Tensor,
    x_src: &Tensor,
    flow: &FlowModel,
    clf: &ClassifierModel,
    cfg: &DistanceConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut shape = vec![1];
    shape.extend_from_slice(clf.input_shape());
    let tape = Tape::new();
    let fb = flow.params().bind_frozen(&tape);
    let cb = clf.params().bind_frozen(&tape);
    let xv = tape.constant(x.clone().reshape(&shape)?);
    let sv = tape.constant(x_src.clone().reshape(&shape)?);
    sample_cost_on(xv, sv, (flow, &fb), (clf, &cb), cfg)?.item()
}
