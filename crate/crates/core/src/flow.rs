//! Invertible affine-coupling flow with class-conditional Gaussian priors.
//!
//! Each coupling layer keeps the masked coordinates `b ⊙ x` and applies an
//! affine map to the rest:
//!
//! ```text
//! y = b ⊙ x + (1 − b) ⊙ (x ⊙ exp(s) + t),   s = s_max · tanh(S(b ⊙ x)),  t = T(b ⊙ x)
//! ```
//!
//! The Jacobian is triangular, so `log |det J| = Σ (1 − b) ⊙ s`. Stacking
//! layers with alternating complementary masks gives a bijection whose log
//! determinant is the sum of the per-layer values. Classes enter only through
//! the prior: class `c` maps to `N(μ_c, diag σ²_c)` in latent space.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{glorot, Adam, Bound, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor for prior and estimated variances.
pub const MIN_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers (at least 2).
    pub layers: usize,
    /// Width of both hidden layers in the scale and translation networks.
    pub hidden: usize,
    /// Bound on |s| per coordinate.
    pub scale_clamp: f64,
    /// Distance of each class mean from the origin.
    pub prior_radius: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            scale_clamp: 2.0,
            prior_radius: 3.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("flow needs at least 2 layers, got {}", self.layers)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("flow hidden width must be positive".into()));
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(Error::Config(format!("scale clamp must be positive, got {}", self.scale_clamp)));
        }
        if !(self.prior_radius > 0.0 && self.prior_radius.is_finite()) {
            return Err(Error::Config(format!("prior radius must be positive, got {}", self.prior_radius)));
        }
        Ok(())
    }
}

/// Diagonal Gaussian prior for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl ClassPrior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::Shape {
                op: "ClassPrior::new",
                left: vec![mean.len()],
                right: vec![variance.len()],
            });
        }
        if variance.iter().any(|&v| !(v >= MIN_VARIANCE) || !v.is_finite())
            || mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Contract(format!(
                "prior variances must be finite and at least {MIN_VARIANCE}"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `−½ Σᵢ [ln 2π + ln σᵢ² + (zᵢ − μᵢ)² / σᵢ²]`.
pub fn gaussian_log_density(z: &[f64], prior: &ClassPrior) -> Result<f64> {
    if z.len() != prior.dim() {
        return Err(Error::Shape {
            op: "gaussian_log_density",
            left: vec![z.len()],
            right: vec![prior.dim()],
        });
    }
    let mut acc = 0.0;
    for i in 0..z.len() {
        let d = z[i] - prior.mean[i];
        acc += (2.0 * PI).ln() + prior.variance[i].ln() + d * d / prior.variance[i];
    }
    Ok(-0.5 * acc)
}

/// Two-hidden-layer tanh network `D → H → H → D`.
#[derive(Debug, Clone)]
struct Mlp {
    weights: [ParamId; 3],
    biases: [ParamId; 3],
}

impl Mlp {
    fn new(
        params: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let dims = [(dim, hidden), (hidden, hidden), (hidden, dim)];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            // Zero output layer: every coupling layer starts as the identity.
            let w = if i == 2 {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                glorot(&[fan_in, fan_out], fan_in, fan_out, rng)
            };
            weights.push(params.add(format!("{prefix}.w{i}"), w, true));
            biases.push(params.add(format!("{prefix}.b{i}"), Tensor::zeros(&[fan_out]), false));
        }
        Self {
            weights: [weights[0], weights[1], weights[2]],
            biases: [biases[0], biases[1], biases[2]],
        }
    }

    fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for i in 0..3 {
            h = h.matmul(bound[self.weights[i]])?.add_bias(bound[self.biases[i]])?;
            if i < 2 {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }
}

/// One affine coupling transform.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Tensor,
    scale_net: Mlp,
    translate_net: Mlp,
    scale_clamp: f64,
}

fn tile(row: &Tensor, batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * row.len());
    for _ in 0..batch {
        data.extend_from_slice(row.data());
    }
    Tensor::new(vec![batch, row.len()], data).expect("tiled shape")
}

impl CouplingLayer {
    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    fn masks(&self, batch: usize) -> (Tensor, Tensor) {
        let keep = tile(&self.mask, batch);
        let free = keep.map(|b| 1.0 - b);
        (keep, free)
    }

    /// Scale and shift for the free coordinates (zero on kept ones).
    fn scale_shift<'t>(
        &self,
        bound: &Bound<'t>,
        kept: Var<'t>,
        free: &Tensor,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let s = self
            .scale_net
            .forward(bound, kept)?
            .tanh()?
            .scale(self.scale_clamp)?
            .mask_mul(free)?;
        let t = self.translate_net.forward(bound, kept)?.mask_mul(free)?;
        Ok((s, t))
    }

    /// Forward map on a `[batch, dim]` input; returns `y` and the per-sample log-determinant `[batch]`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let batch = x.shape()[0];
        let (keep, free) = self.masks(batch);
        let kept = x.mask_mul(&keep)?;
        let (s, t) = self.scale_shift(bound, kept, &free)?;
        let y = kept.add(x.mul(s.exp()?)?.add(t)?.mask_mul(&free)?)?;
        Ok((y, s.sum_last()?))
    }

    pub fn inverse<'t>(&self, bound: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let batch = y.shape()[0];
        let (keep, free) = self.masks(batch);
        let kept = y.mask_mul(&keep)?;
        let (s, t) = self.scale_shift(bound, kept, &free)?;
        kept.add(y.sub(t)?.mul(s.scale(-1.0)?.exp()?)?.mask_mul(&free)?)
    }
}

/// Stack of coupling layers plus one Gaussian prior per class.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    input_shape: Vec<usize>,
    layers: Vec<CouplingLayer>,
    priors: Vec<ClassPrior>,
    params: ParamStore,
}

/// Alternating checkerboard masks: parity of `row + col` for image-shaped inputs,
/// of the flat index otherwise.
fn checkerboard(input_shape: &[usize], odd: bool) -> Tensor {
    let dim: usize = input_shape.iter().product();
    let width = if input_shape.len() >= 2 {
        input_shape[input_shape.len() - 1]
    } else {
        1
    };
    let height = if input_shape.len() >= 2 {
        input_shape[input_shape.len() - 2]
    } else {
        dim
    };
    Tensor::from_fn(&[dim], |i| {
        let parity = if input_shape.len() >= 2 {
            let within = i % (width * height);
            (within / width + within % width) % 2
        } else {
            i % 2
        };
        if (parity == 1) == odd {
            1.0
        } else {
            0.0
        }
    })
}

fn map_overflow(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NumericOverflow { layer },
        other => other,
    }
}

impl FlowModel {
    /// Builds an identity-initialized flow with fixed priors `μ_c = r·e_c`, `Σ_c = I`.
    pub fn new(input_shape: &[usize], class_count: usize, config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dim: usize = input_shape.iter().product();
        if dim < 2 {
            return Err(Error::Config(format!("flow input must have at least 2 values, got {input_shape:?}")));
        }
        if class_count == 0 || class_count > dim {
            return Err(Error::Config(format!(
                "class count {class_count} must be in 1..={dim} for basis-direction means"
            )));
        }
        let mut rng = stream(seed, Stream::FlowInit);
        let mut params = ParamStore::new();
        let layers = (0..config.layers)
            .map(|i| CouplingLayer {
                mask: checkerboard(input_shape, i % 2 == 1),
                scale_net: Mlp::new(&mut params, &format!("flow.layer{i}.s"), dim, config.hidden, &mut rng),
                translate_net: Mlp::new(&mut params, &format!("flow.layer{i}.t"), dim, config.hidden, &mut rng),
                scale_clamp: config.scale_clamp,
            })
            .collect();
        let priors = (0..class_count)
            .map(|c| {
                let mut mean = vec![0.0; dim];
                mean[c] = config.prior_radius;
                ClassPrior::new(mean, vec![1.0; dim])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            input_shape: input_shape.to_vec(),
            layers,
            priors,
            params,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.priors.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn priors(&self) -> &[ClassPrior] {
        &self.priors
    }

    pub fn prior(&self, class: usize) -> Result<&ClassPrior> {
        self.priors.get(class).ok_or_else(|| {
            Error::Domain(format!("unknown class {class} (flow has {} classes)", self.priors.len()))
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Flattens `[batch, ..input_shape]` (or a single unbatched sample) to `[batch, dim]`.
    pub fn flatten(&self, x: &Tensor) -> Result<Tensor> {
        let dim = self.dim();
        let s = x.shape();
        let batched = s.len() == self.input_shape.len() + 1 && s[1..] == self.input_shape[..];
        if batched {
            x.clone().reshape(&[s[0], dim])
        } else if s == self.input_shape.as_slice() {
            x.clone().reshape(&[1, dim])
        } else {
            Err(Error::Shape {
                op: "flow input",
                left: s.to_vec(),
                right: self.input_shape.clone(),
            })
        }
    }

    /// Forward pass on a `[batch, dim]` var; returns `z` and the per-sample total log-determinant.
    pub fn forward_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = x;
        let mut total: Option<Var<'t>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, log_det) = layer.forward(bound, h).map_err(map_overflow(i))?;
            h = y;
            total = Some(match total {
                Some(acc) => acc.add(log_det)?,
                None => log_det,
            });
        }
        Ok((h, total.expect("at least two layers")))
    }

    /// Per-sample `log p_Z(z, c)` for a `[batch, dim]` latent var.
    pub fn prior_log_density_on<'t>(&self, z: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let tape = z.tape();
        let dim = self.dim();
        let batch = labels.len();
        if z.shape() != [batch, dim] {
            return Err(Error::Shape {
                op: "prior_log_density",
                left: z.shape(),
                right: vec![batch, dim],
            });
        }
        let mut mean = Vec::with_capacity(batch * dim);
        let mut precision = Vec::with_capacity(batch * dim);
        let mut offset = Vec::with_capacity(batch);
        for &c in labels {
            let p = self.prior(c)?;
            mean.extend_from_slice(&p.mean);
            precision.extend(p.variance.iter().map(|v| 1.0 / v));
            let log_norm: f64 = p.variance.iter().map(|v| (2.0 * PI).ln() + v.ln()).sum();
            offset.push(-0.5 * log_norm);
        }
        let mean = tape.constant(Tensor::new(vec![batch, dim], mean)?);
        let precision = Tensor::new(vec![batch, dim], precision)?;
        let offset = tape.constant(Tensor::new(vec![batch], offset)?);
        z.sub(mean)?
            .square()?
            .mask_mul(&precision)?
            .sum_last()?
            .scale(-0.5)?
            .add(offset)
    }

    /// Per-sample `log p_X(x, c) = log p_Z(F(x), c) + log |det ∂F/∂x|` as a `[batch]` var.
    pub fn log_likelihood_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        let (z, log_det) = self.forward_on(bound, x)?;
        self.prior_log_density_on(z, labels)?.add(log_det)
    }

    /// Latent codes `[batch, dim]` and per-sample log-determinants.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let (z, log_det) = self.forward_on(&bound, tape.constant(self.flatten(x)?))?;
        Ok((z.value(), log_det.value().into_data()))
    }

    /// Maps latent codes `[batch, dim]` back to `[batch, ..input_shape]`.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let dim = self.dim();
        if z.rank() != 2 || z.shape()[1] != dim {
            return Err(Error::Shape {
                op: "flow inverse",
                left: z.shape().to_vec(),
                right: vec![dim],
            });
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let mut h = tape.constant(z.clone());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.inverse(&bound, h).map_err(map_overflow(i))?;
        }
        let mut shape = vec![z.shape()[0]];
        shape.extend_from_slice(&self.input_shape);
        h.value().reshape(&shape)
    }

    pub fn log_likelihood(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let flat = self.flatten(x)?;
        if flat.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "{} samples but {} labels",
                flat.shape()[0],
                labels.len()
            )));
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self
            .log_likelihood_on(&bound, tape.constant(flat), labels)?
            .value()
            .into_data())
    }

    /// Log-likelihoods of a whole dataset, evaluated in chunks.
    pub fn dataset_log_likelihood(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ds.len());
        for start in (0..ds.len()).step_by(256) {
            let end = (start + 256).min(ds.len());
            let idx: Vec<usize> = (start..end).collect();
            let (x, labels) = ds.batch(&idx)?;
            out.extend(self.log_likelihood(&x, &labels)?);
        }
        Ok(out)
    }

    /// One maximum-likelihood Adam step on a batch; returns the mean NLL before the update.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize], opt: &Adam) -> Result<f64> {
        let flat = self.flatten(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let ll = self.log_likelihood_on(&bound, tape.constant(flat), labels)?;
        let nll = ll.mean()?.scale(-1.0)?;
        let value = nll.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "flow nll" });
        }
        let grads = tape.backward(nll)?;
        self.params.accumulate(&grads, &bound)?;
        self.params.step(opt)?;
        Ok(value)
    }

    /// Flat key→tensor view for checkpoints (masks and priors included).
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (
                "flow.config".to_string(),
                Tensor::vector(vec![
                    self.config.layers as f64,
                    self.config.hidden as f64,
                    self.config.scale_clamp,
                    self.config.prior_radius,
                    self.priors.len() as f64,
                ]),
            ),
            (
                "flow.input_shape".to_string(),
                Tensor::vector(self.input_shape.iter().map(|&d| d as f64).collect()),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("flow.layer{i}.mask"), layer.mask.clone()));
        }
        for (c, p) in self.priors.iter().enumerate() {
            out.push((format!("flow.prior{c}.mean"), Tensor::vector(p.mean.clone())));
            out.push((format!("flow.prior{c}.variance"), Tensor::vector(p.variance.clone())));
        }
        out.extend(self.params.iter().map(|(_, name, t)| (name.to_string(), t.clone())));
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))
        };
        let cfg = get("flow.config")?.data().to_vec();
        if cfg.len() != 5 {
            return Err(Error::Checkpoint("malformed flow.config".into()));
        }
        let config = FlowConfig {
            layers: cfg[0] as usize,
            hidden: cfg[1] as usize,
            scale_clamp: cfg[2],
            prior_radius: cfg[3],
        };
        let input_shape: Vec<usize> = get("flow.input_shape")?.data().iter().map(|&d| d as usize).collect();
        let mut model = Self::new(&input_shape, cfg[4] as usize, config, 0)?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let mask = get(&format!("flow.layer{i}.mask"))?;
            if mask.shape() != layer.mask.shape() || mask.data().iter().any(|&b| b != 0.0 && b != 1.0) {
                return Err(Error::Checkpoint(format!("invalid mask for layer {i}")));
            }
            layer.mask = mask.clone();
        }
        for c in 0..model.priors.len() {
            model.priors[c] = ClassPrior::new(
                get(&format!("flow.prior{c}.mean"))?.data().to_vec(),
                get(&format!("flow.prior{c}.variance"))?.data().to_vec(),
            )?;
        }
        model.params.load_entries(entries)?;
        Ok(model)
    }
}

/// Maximum-likelihood training; returns the mean NLL of each epoch (measured
/// on the batches as they are visited, before each update).
pub fn fit_flow(
    model: &mut FlowModel,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let opt = Adam::new(learning_rate)?;
    if data.is_empty() {
        return Err(Error::Domain("cannot fit a flow on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if data.class_count > model.class_count() {
        return Err(Error::Domain(format!(
            "dataset has {} classes but the flow models {}",
            data.class_count,
            model.class_count()
        )));
    }
    let mut rng = stream(seed, Stream::FlowBatches);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let (x, labels) = data.batch(chunk)?;
            let nll = model.train_step(&x, &labels, &opt).map_err(|e| match e {
                Error::NonFinite { .. } | Error::NumericOverflow { .. } => {
                    Error::TrainingDiverged { epoch, batch }
                }
                other => other,
            })?;
            total += nll * chunk.len() as f64;
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_gaussians_2d;

    fn model(dim: usize, layers: usize, seed: u64) -> FlowModel {
        let cfg = FlowConfig {
            layers,
            hidden: 8,
            ..FlowConfig::default()
        };
        FlowModel::new(&[dim], 2, cfg, seed).unwrap()
    }

    /// Fills every parameter with small random values so no layer is the identity.
    pub(crate) fn randomize(m: &mut FlowModel, seed: u64, scale: f64) {
        use rand::Rng;
        let mut rng = stream(seed, Stream::Check);
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let shape = m.params.value(id).shape().to_vec();
            m.params
                .set(id, Tensor::from_fn(&shape, |_| rng.random_range(-scale..scale)))
                .unwrap();
        }
    }

    #[test]
    fn identity_at_initialization() {
        let m = model(4, 4, 0);
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1 - 0.5);
        let (z, ld) = m.forward(&x).unwrap();
        assert_eq!(z, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        assert_eq!(m.inverse(&z).unwrap(), x);
    }

    #[test]
    fn pure_translation_layer() {
        let mut m = model(4, 2, 0);
        // Translation net output bias of layer 0 is the constant shift t.
        let t = Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]);
        let id = m.params.find("flow.layer0.t.b2").unwrap();
        m.params.set(id, t.clone()).unwrap();
        let tape = Tape::new();
        let bound = m.params.bind_frozen(&tape);
        let x = Tensor::from_fn(&[1, 4], |i| i as f64);
        let (y, ld) = m.layers[0].forward(&bound, tape.constant(x.clone())).unwrap();
        let free = m.layers[0].mask.map(|b| 1.0 - b);
        let expected = Tensor::from_fn(&[1, 4], |i| x.data()[i] + free.data()[i] * t.data()[i]);
        assert_eq!(y.value(), expected);
        assert_eq!(ld.value().data(), &[0.0]);
        let back = m.layers[0].inverse(&bound, y).unwrap();
        assert_eq!(back.value(), x);
    }

    #[test]
    fn masks_alternate_and_are_binary() {
        let m = FlowModel::new(&[1, 4, 4], 3, FlowConfig::default(), 0).unwrap();
        for pair in m.layers.windows(2) {
            for (a, b) in pair[0].mask.data().iter().zip(pair[1].mask.data()) {
                assert!(*a == 0.0 || *a == 1.0);
                assert_eq!(a + b, 1.0);
            }
        }
        // Checkerboard: horizontal and vertical neighbours differ.
        let mask = m.layers[0].mask.data();
        assert_ne!(mask[0], mask[1]);
        assert_ne!(mask[0], mask[4]);
        assert_eq!(mask[0], mask[5]);
    }

    #[test]
    fn round_trip_random_model() {
        let mut m = model(6, 4, 1);
        randomize(&mut m, 3, 0.5);
        let x = Tensor::from_fn(&[100, 6], |i| ((i * 7919) % 1000) as f64 / 100.0 - 5.0);
        let (z, _) = m.forward(&x).unwrap();
        let back = m.inverse(&z).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn log_det_is_sum_of_layers() {
        let mut m = model(4, 3, 2);
        randomize(&mut m, 5, 0.4);
        let x = Tensor::from_fn(&[2, 4], |i| (i as f64).cos());
        let tape = Tape::new();
        let bound = m.params.bind_frozen(&tape);
        let mut h = tape.constant(x.clone());
        let mut per_layer = vec![0.0; 2];
        for layer in &m.layers {
            let (y, ld) = layer.forward(&bound, h).unwrap();
            for (acc, v) in per_layer.iter_mut().zip(ld.value().data()) {
                *acc += v;
            }
            h = y;
        }
        let (_, total) = m.forward(&x).unwrap();
        assert_eq!(total, per_layer);
    }

    #[test]
    fn standard_normal_likelihoods() {
        let cfg = FlowConfig {
            prior_radius: 3.0,
            ..FlowConfig::default()
        };
        let mut m = FlowModel::new(&[3], 1, cfg, 0).unwrap();
        m.priors[0] = ClassPrior::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let ll = m.log_likelihood(&Tensor::zeros(&[1, 3]), &[0]).unwrap()[0];
        assert!((ll + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);

        let mut m = FlowModel::new(&[2], 1, cfg, 0).unwrap();
        m.priors[0] = ClassPrior::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let ll = m.log_likelihood(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), &[0]).unwrap()[0];
        // Two coordinates: ln N(1; 0, 1) + ln N(0; 0, 1).
        let expected = (-0.5 * (2.0 * PI).ln() - 0.5) + (-0.5 * (2.0 * PI).ln());
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_by_hand() {
        let p = ClassPrior::new(vec![1.0], vec![4.0]).unwrap();
        let v = gaussian_log_density(&[3.0], &p).unwrap();
        let expected = -0.5 * ((2.0 * PI).ln() + 4f64.ln() + 1.0);
        assert!((v - expected).abs() < 1e-15);
        let p = ClassPrior::new(vec![0.5; 5], vec![1.0; 5]).unwrap();
        assert!((gaussian_log_density(&[0.5; 5], &p).unwrap() + 2.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!(ClassPrior::new(vec![0.0], vec![1e-7]).is_err());
    }

    #[test]
    fn gaussian_density_matches_scalar_loop() {
        use rand::Rng;
        let mut rng = stream(42, Stream::Check);
        let m = FlowModel::new(&[5], 3, FlowConfig::default(), 0).unwrap();
        for _ in 0..50 {
            let c = rng.random_range(0..3);
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let tape = Tape::new();
            let zv = tape.constant(Tensor::new(vec![1, 5], z.clone()).unwrap());
            let on_tape = m.prior_log_density_on(zv, &[c]).unwrap().value().data()[0];
            let mut naive = 0.0;
            for i in 0..5 {
                let mu = if i == c { 3.0 } else { 0.0 };
                naive += -0.5 * ((2.0 * PI).ln() + 0.0 + (z[i] - mu) * (z[i] - mu));
            }
            assert!((on_tape - naive).abs() < 1e-12);
            assert!((gaussian_log_density(&z, m.prior(c).unwrap()).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_class_is_domain_error() {
        let m = model(2, 2, 0);
        let err = m.log_likelihood(&Tensor::zeros(&[1, 2]), &[5]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut m = model(2, 4, 0);
        let before = m.to_entries();
        let data = two_gaussians_2d(20, 0).unwrap();
        let trace = fit_flow(&mut m, &data, 0, 1e-3, 8, 0).unwrap();
        assert!(trace.is_empty());
        assert_eq!(before, m.to_entries());
    }

    #[test]
    fn repeated_sample_nll_does_not_increase() {
        let mut m = model(2, 4, 0);
        let images = Tensor::from_fn(&[32, 2], |i| if i % 2 == 0 { -2.0 } else { 0.3 });
        let data = Dataset::new(images, vec![0; 32], 2, "repeat", 0).unwrap();
        let trace = fit_flow(&mut m, &data, 5, 1e-3, 8, 0).unwrap();
        assert_eq!(trace.len(), 5);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "{trace:?}");
        }
    }

    #[test]
    fn checkpoint_entries_round_trip() {
        let mut m = FlowModel::new(&[1, 4, 4], 3, FlowConfig { hidden: 5, ..FlowConfig::default() }, 0).unwrap();
        randomize(&mut m, 1, 0.3);
        let restored = FlowModel::from_entries(&m.to_entries()).unwrap();
        assert_eq!(restored.to_entries(), m.to_entries());
    }
}
