//! Small LeNet-style classifier: conv-pool-conv-pool-fc-fc-softmax.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{glorot, Adam, Bound, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Which activation the regularized distance compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    #[default]
    Penultimate,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub feature_layer: FeatureLayer,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 16,
            conv2_channels: 32,
            kernel: 5,
            hidden: 128,
            feature_layer: FeatureLayer::Penultimate,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("classifier kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ids {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    input_shape: [usize; 3],
    class_count: usize,
    params: ParamStore,
    ids: Ids,
}

/// Activations needed by callers: the penultimate layer and the logits.
pub struct Activations<'t> {
    pub penultimate: Var<'t>,
    pub logits: Var<'t>,
}

/// Accuracy with its confusion matrix (`confusion[truth][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub count: usize,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::Contract("prediction and label counts differ".into()));
        }
        let mut confusion = vec![vec![0; class_count]; class_count];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= class_count || l >= class_count {
                return Err(Error::Domain(format!("label {} out of range", p.max(l))));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..class_count).map(|c| confusion[c][c]).sum();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            count: labels.len(),
            confusion,
        })
    }
}

fn pooled(extent: usize) -> usize {
    (extent / 2) / 2
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

impl ClassifierModel {
    /// `input_shape` is `[channels, height, width]`. The output layer starts at zero.
    pub fn new(input_shape: &[usize], class_count: usize, config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let &[c, h, w] = input_shape else {
            return Err(Error::Config(format!(
                "classifier input must be [channels, height, width], got {input_shape:?}"
            )));
        };
        if class_count < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
        }
        if c == 0 || pooled(h) == 0 || pooled(w) == 0 {
            return Err(Error::Config(format!("input {input_shape:?} too small for two 2x2 pools")));
        }
        let mut rng = stream(seed, Stream::ClassifierInit);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let (c1, c2, hid) = (config.conv1_channels, config.conv2_channels, config.hidden);
        let flat = c2 * pooled(h) * pooled(w);
        let mut layer = |params: &mut ParamStore, name: &str, shape: &[usize], fan_in, fan_out, bias, zero: bool| {
            let weight = if zero {
                Tensor::zeros(shape)
            } else {
                glorot(shape, fan_in, fan_out, &mut rng)
            };
            (
                params.add(format!("clf.{name}.w"), weight, true),
                params.add(format!("clf.{name}.b"), Tensor::zeros(&[bias]), false),
            )
        };
        let ids = Ids {
            conv1: layer(&mut params, "conv1", &[c1, c, k, k], c * k * k, c1 * k * k, c1, false),
            conv2: layer(&mut params, "conv2", &[c2, c1, k, k], c1 * k * k, c2 * k * k, c2, false),
            fc1: layer(&mut params, "fc1", &[flat, hid], flat, hid, hid, false),
            fc2: layer(&mut params, "fc2", &[hid, class_count], hid, class_count, class_count, true),
        };
        Ok(Self {
            config,
            input_shape: [c, h, w],
            class_count,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                op: "classifier input",
                left: shape.to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    /// Full forward pass on a `[batch, c, h, w]` var.
    pub fn activations_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Activations<'t>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let ids = &self.ids;
        let h = x
            .conv2d(bound[ids.conv1.0], Some(bound[ids.conv1.1]), Padding::Same)?
            .relu()?
            .max_pool2()?
            .conv2d(bound[ids.conv2.0], Some(bound[ids.conv2.1]), Padding::Same)?
            .relu()?
            .max_pool2()?;
        let flat: usize = h.shape()[1..].iter().product();
        let penultimate = h
            .reshape(&[shape[0], flat])?
            .matmul(bound[ids.fc1.0])?
            .add_bias(bound[ids.fc1.1])?
            .relu()?;
        let logits = penultimate.matmul(bound[ids.fc2.0])?.add_bias(bound[ids.fc2.1])?;
        Ok(Activations { penultimate, logits })
    }

    pub fn logits_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.activations_on(bound, x)?.logits)
    }

    /// The configured feature map, `[batch, width]`.
    pub fn features_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.activations_on(bound, x)?;
        Ok(match self.config.feature_layer {
            FeatureLayer::Penultimate => a.penultimate,
            FeatureLayer::Logits => a.logits,
        })
    }

    fn one_hot(&self, labels: &[usize]) -> Result<Tensor> {
        let c = self.class_count;
        let mut t = Tensor::zeros(&[labels.len(), c]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Domain(format!("label {l} out of range for {c} classes")));
            }
            t.data_mut()[i * c + l] = 1.0;
        }
        Ok(t)
    }

    /// Per-sample cross-entropy `[batch]` from logits.
    pub fn cross_entropy_on<'t>(&self, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        if logits.shape() != [labels.len(), self.class_count] {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: logits.shape(),
                right: vec![labels.len(), self.class_count],
            });
        }
        logits.log_softmax()?.mask_mul(&self.one_hot(labels)?)?.sum_last()?.scale(-1.0)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss_on<'t>(&self, bound: &Bound<'t>, x: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        self.cross_entropy_on(self.logits_on(bound, x)?, labels)?.mean()
    }

    pub fn forward_logits(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.logits_on(&bound, tape.constant(images.clone()))?.value())
    }

    pub fn loss(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        self.loss_on(&bound, tape.constant(images.clone()), labels)?.item()
    }

    /// Features of a single `[c, h, w]` image (or a `[1, c, h, w]` batch).
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let x = image.clone().reshape(&shape).map_err(|_| Error::Shape {
            op: "classifier features",
            left: image.shape().to_vec(),
            right: self.input_shape.to_vec(),
        })?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.features_on(&bound, tape.constant(x))?.value().into_data())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(images)?;
        Ok(logits.data().chunks(self.class_count).map(argmax).collect())
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Evaluation> {
        if ds.is_empty() {
            return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
        }
        self.check_input(ds.images.shape())?;
        let mut predictions = Vec::with_capacity(ds.len());
        for start in (0..ds.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(ds.len());
            predictions.extend(self.predict(&ds.images.slice_rows(start, end)?)?);
        }
        Evaluation::from_predictions(&predictions, &ds.labels, self.class_count)
    }

    /// One Adam step on `mean CE + reg_rate·Σ‖w‖²`; returns the penalized loss before the update.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize], opt: &Adam, reg_rate: f64) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let loss = self.loss_on(&bound, tape.constant(images.clone()), labels)?;
        let value = loss.item()?;
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads, &bound)?;
        let penalty = self.params.apply_weight_decay(reg_rate);
        self.params.step(opt)?;
        Ok(value + penalty)
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = vec![
            (
                "clf.config".to_string(),
                Tensor::vector(vec![
                    c.conv1_channels as f64,
                    c.conv2_channels as f64,
                    c.kernel as f64,
                    c.hidden as f64,
                    match c.feature_layer {
                        FeatureLayer::Penultimate => 0.0,
                        FeatureLayer::Logits => 1.0,
                    },
                    self.class_count as f64,
                ]),
            ),
            (
                "clf.input_shape".to_string(),
                Tensor::vector(self.input_shape.iter().map(|&d| d as f64).collect()),
            ),
        ];
        out.extend(self.params.iter().map(|(_, name, t)| (name.to_string(), t.clone())));
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))
        };
        let cfg = get("clf.config")?;
        let shape: Vec<usize> = get("clf.input_shape")?.iter().map(|&d| d as usize).collect();
        if cfg.len() != 6 {
            return Err(Error::Checkpoint("malformed clf.config".into()));
        }
        let config = ClassifierConfig {
            conv1_channels: cfg[0] as usize,
            conv2_channels: cfg[1] as usize,
            kernel: cfg[2] as usize,
            hidden: cfg[3] as usize,
            feature_layer: if cfg[4] == 0.0 {
                FeatureLayer::Penultimate
            } else {
                FeatureLayer::Logits
            },
        };
        let mut model = Self::new(&shape, cfg[5] as usize, config, 0)?;
        model.params.load_entries(entries)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassifierModel {
        let cfg = ClassifierConfig {
            conv1_channels: 3,
            conv2_channels: 4,
            kernel: 3,
            hidden: 6,
            ..ClassifierConfig::default()
        };
        ClassifierModel::new(&[1, 8, 8], 3, cfg, 1).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = stream(seed, Stream::Check);
        Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random::<f64>())
    }

    #[test]
    fn zero_output_layer_gives_zero_logits_and_uniform_loss() {
        let m = ClassifierModel::new(&[1, 16, 16], 10, ClassifierConfig::default(), 0).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 7) as f64 / 7.0);
        let logits = m.forward_logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let loss = m.loss(&x, &[3, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut m = small();
        perturb(&mut m);
        let one = images(1, 2);
        let mut two = one.clone();
        two.append_rows(&one).unwrap();
        let a = m.forward_logits(&one).unwrap();
        let b = m.forward_logits(&two).unwrap();
        assert_eq!(&b.data()[..3], a.data());
        assert_eq!(&b.data()[3..], a.data());
    }

    pub(crate) fn perturb(m: &mut ClassifierModel) {
        let id = m.ids.fc2.0;
        let shape = m.params.value(id).shape().to_vec();
        m.params
            .set(id, Tensor::from_fn(&shape, |i| ((i * 37) % 11) as f64 / 11.0 - 0.5))
            .unwrap();
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let m = ClassifierModel::new(&[1, 16, 16], 10, ClassifierConfig::default(), 0).unwrap();
        let f = m.features(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f.iter().all(|&v| v == 0.0));
        let img = Tensor::from_fn(&[1, 16, 16], |i| (i % 5) as f64 / 5.0);
        assert_eq!(m.features(&img).unwrap(), m.features(&img).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = small();
        let err = m.forward_logits(&Tensor::zeros(&[2, 3, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "classifier input", .. }));
    }

    #[test]
    fn label_out_of_range() {
        let m = small();
        assert!(matches!(m.loss(&images(1, 0), &[3]), Err(Error::Domain(_))));
    }

    #[test]
    fn evaluation_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let always_zero = Evaluation::from_predictions(&[0; 100], &labels, 10).unwrap();
        assert_eq!(always_zero.accuracy, 0.1);
        let perfect = Evaluation::from_predictions(&labels, &labels, 10).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        let total: usize = always_zero.confusion.iter().flatten().sum();
        assert_eq!(total, 100);
        assert!(Evaluation::from_predictions(&[], &[], 10).is_err());
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let mut m = small();
        let x = images(6, 4);
        let labels = [0, 1, 2, 0, 1, 2];
        let opt = Adam::new(1e-2).unwrap();
        let first = m.train_step(&x, &labels, &opt, 0.0).unwrap();
        for _ in 0..30 {
            m.train_step(&x, &labels, &opt, 0.0).unwrap();
        }
        assert!(m.loss(&x, &labels).unwrap() < first);
    }

    #[test]
    fn checkpoint_entries_round_trip() {
        let mut m = small();
        perturb(&mut m);
        let back = ClassifierModel::from_entries(&m.to_entries()).unwrap();
        assert_eq!(back.to_entries(), m.to_entries());
    }
}
