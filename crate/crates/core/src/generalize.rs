//! Alternating training: minimize over the classifier and flow, then
//! synthesize hard examples by gradient ascent on `ℓ(x, c) − α·cost(x, x_src)`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierModel, FeatureLayer};
use crate::data::Dataset;
use crate::distance::{environment_distance, estimate_environment, DistanceConfig};
use crate::error::{Error, Result};
use crate::flow::{fit_flow, FlowConfig, FlowModel};
use crate::params::Adam;
use crate::rng::{stream, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Ascent step size.
    pub eta: f64,
    /// Minimization iterations between augmentation rounds.
    pub t_min: usize,
    /// Ascent steps per hard example.
    pub t_max: usize,
    /// Number of augmentation rounds.
    pub k_rounds: usize,
    /// Weight of the transformation cost in the ascent objective.
    pub alpha: f64,
    /// Weight of the classifier-feature term inside the cost.
    pub feature_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 weight-decay coefficient on classifier weights.
    pub reg_rate: f64,
    pub samples_per_round: usize,
    pub seed: u64,
    pub flow_learning_rate: f64,
    /// Maximum-likelihood epochs on the source set before the first round.
    pub flow_pretrain_epochs: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            t_min: 100,
            t_max: 15,
            k_rounds: 6,
            alpha: 1.0,
            feature_weight: 1.0,
            learning_rate: 1e-4,
            batch_size: 256,
            reg_rate: 5e-5,
            samples_per_round: 256,
            seed: 0,
            flow_learning_rate: 1e-4,
            flow_pretrain_epochs: 2,
        }
    }
}

impl AugmentationConfig {
    /// Smaller batches, shorter ascent steps for 16×16 glyphs.
    pub fn desk() -> Self {
        Self {
            eta: 0.05,
            batch_size: 64,
            samples_per_round: 64,
            ..Self::default()
        }
    }

    pub fn distance(&self) -> DistanceConfig {
        DistanceConfig {
            alpha: self.alpha,
            feature_weight: self.feature_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("training.{name} must be positive and finite, got {v}")))
            }
        };
        positive("eta", self.eta)?;
        positive("learning_rate", self.learning_rate)?;
        positive("flow_learning_rate", self.flow_learning_rate)?;
        self.distance().validate()?;
        if !(self.reg_rate >= 0.0 && self.reg_rate.is_finite()) {
            return Err(Error::Config(format!("training.reg_rate must be non-negative, got {}", self.reg_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if self.k_rounds > 0 && self.samples_per_round == 0 {
            return Err(Error::Config("training.samples_per_round must be at least 1 when k_rounds > 0".into()));
        }
        Ok(())
    }
}

/// A synthesized sample and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HardExample {
    /// `[c, h, w]`, every value in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub round: usize,
    /// Index of the seed sample in the training set at the time of the round.
    pub source_index: usize,
    pub final_objective: f64,
}

/// Result of a batched ascent.
#[derive(Debug, Clone)]
pub struct Ascent {
    /// `[batch, c, h, w]`.
    pub images: Tensor,
    /// Objective per sample before the first step.
    pub initial_objective: Vec<f64>,
    pub final_objective: Vec<f64>,
}

/// Per-sample objective `ℓ(x_i, c_i) − α·cost(x_i, x_src_i)` and its gradient with respect to `x`.
fn objective_and_gradient(
    x: &Tensor,
    labels: &[usize],
    src_latent: &Tensor,
    src_features: &Tensor,
    flow: &FlowModel,
    clf: &ClassifierModel,
    dist: &DistanceConfig,
) -> Result<(Vec<f64>, Tensor)> {
    let batch = labels.len();
    let tape = Tape::new();
    let fb = flow.params().bind_frozen(&tape);
    let cb = clf.params().bind_frozen(&tape);
    let xv = tape.leaf(x.clone());
    let acts = clf.activations_on(&cb, xv)?;
    let loss = clf.cross_entropy_on(acts.logits, labels)?;
    let (z, _) = flow.forward_on(&fb, xv.reshape(&[batch, flow.dim()])?)?;
    let mut cost = z.sub(tape.constant(src_latent.clone()))?.square()?.sum_last()?;
    if dist.feature_weight != 0.0 {
        let feats = match clf.config().feature_layer {
            FeatureLayer::Penultimate => acts.penultimate,
            FeatureLayer::Logits => acts.logits,
        };
        let term = feats.sub(tape.constant(src_features.clone()))?.square()?.sum_last()?;
        cost = cost.add(term.scale(dist.feature_weight)?)?;
    }
    let objective = loss.sub(cost.scale(dist.alpha)?)?;
    let values = objective.value().into_data();
    let grads = tape.backward(objective.sum()?)?;
    Ok((values, grads.get(xv)?.clone()))
}

/// Batched gradient ascent from `x_src` (`[batch, c, h, w]`).
///
/// Every sample keeps its own step size, starting at `eta`. A step proposes
/// `clip(x + η·∇)` into `[0, 1]`; if the objective does not improve the
/// proposal is discarded and that sample's step size is halved. The objective
/// is therefore non-decreasing along the trace.
pub fn inner_maximize(
    x_src: &Tensor,
    labels: &[usize],
    flow: &FlowModel,
    clf: &ClassifierModel,
    cfg: &AugmentationConfig,
) -> Result<Ascent> {
    clf.check_input(x_src.shape())?;
    let batch = labels.len();
    if x_src.shape()[0] != batch {
        return Err(Error::Contract(format!("{} seeds but {batch} labels", x_src.shape()[0])));
    }
    let dist = cfg.distance();
    let (src_latent, _) = flow.forward(x_src)?;
    let src_features = {
        let tape = Tape::new();
        let cb = clf.params().bind_frozen(&tape);
        clf.features_on(&cb, tape.constant(x_src.clone()))?.value()
    };
    let per = x_src.len() / batch;
    let diverged = |step: usize| {
        move |e: Error| match e {
            Error::NonFinite { .. } | Error::NumericOverflow { .. } => Error::AscentDiverged { step },
            other => other,
        }
    };
    let mut x = x_src.clone();
    let (mut obj, mut grad) =
        objective_and_gradient(&x, labels, &src_latent, &src_features, flow, clf, &dist).map_err(diverged(0))?;
    let initial = obj.clone();
    let mut eta = vec![cfg.eta; batch];
    for step in 1..=cfg.t_max {
        let mut trial = x.clone();
        for (i, (t, g)) in trial.data_mut().chunks_mut(per).zip(grad.data().chunks(per)).enumerate() {
            for (v, d) in t.iter_mut().zip(g) {
                *v = (*v + eta[i] * d).clamp(0.0, 1.0);
            }
        }
        let (t_obj, t_grad) = objective_and_gradient(&trial, labels, &src_latent, &src_features, flow, clf, &dist)
            .map_err(diverged(step))?;
        if t_obj.iter().any(|v| !v.is_finite()) || !t_grad.is_finite() {
            return Err(Error::AscentDiverged { step });
        }
        for i in 0..batch {
            if t_obj[i] > obj[i] {
                let range = i * per..(i + 1) * per;
                x.data_mut()[range.clone()].copy_from_slice(&trial.data()[range.clone()]);
                grad.data_mut()[range.clone()].copy_from_slice(&t_grad.data()[range]);
                obj[i] = t_obj[i];
            } else {
                eta[i] *= 0.5;
            }
        }
    }
    Ok(Ascent {
        images: x,
        initial_objective: initial,
        final_objective: obj,
    })
}

/// Mutable training state shared by the rounds.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub flow: FlowModel,
    pub clf: ClassifierModel,
    /// Source samples first, hard examples appended after them.
    pub dataset: Dataset,
    /// Number of original source samples at the front of `dataset`.
    pub source_len: usize,
    pub round: usize,
}

/// Draws `samples_per_round` seeds from the current training set (classes
/// cycled in order, samples uniform within a class), so earlier hard examples
/// can be perturbed again. Runs the ascent on them and appends the results.
pub fn augment_round(
    state: &mut TrainState,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<HardExample>> {
    let source = &state.dataset;
    let class_count = source.class_count;
    let by_class: Vec<Vec<usize>> = (0..class_count).map(|c| source.indices_of_class(c)).collect();
    if let Some(missing) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Domain(format!("class {missing} has no samples to perturb")));
    }
    let seeds: Vec<usize> = (0..cfg.samples_per_round)
        .map(|i| {
            let pool = &by_class[i % class_count];
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    let (x_src, labels) = source.batch(&seeds)?;
    let ascent = inner_maximize(&x_src, &labels, &state.flow, &state.clf, cfg)?;
    state.dataset.append(&ascent.images, &labels)?;
    let per = x_src.len() / seeds.len();
    let sample_shape = state.dataset.sample_shape().to_vec();
    let examples = (0..seeds.len())
        .map(|i| {
            let data = ascent.images.data()[i * per..(i + 1) * per].to_vec();
            Ok(HardExample {
                image: Tensor::new(sample_shape.clone(), data)?,
                label: labels[i],
                round: state.round,
                source_index: seeds[i],
                final_objective: ascent.final_objective[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(examples)
}

/// Per-class latent Gaussians of `images` under `flow`, compared across two sets.
pub fn latent_environment_distance(
    flow: &FlowModel,
    a: (&Tensor, &[usize]),
    b: (&Tensor, &[usize]),
    class_count: usize,
) -> Result<f64> {
    let (za, _) = flow.forward(a.0)?;
    let (zb, _) = flow.forward(b.0)?;
    let ea = estimate_environment(&za, a.1, class_count)?;
    let eb = estimate_environment(&zb, b.1, class_count)?;
    // Compare only classes present on both sides.
    let keep = |c: usize| ea[c].is_some() && eb[c].is_some();
    let ea: Vec<_> = (0..class_count).map(|c| if keep(c) { ea[c].clone() } else { None }).collect();
    let eb: Vec<_> = (0..class_count).map(|c| if keep(c) { eb[c].clone() } else { None }).collect();
    environment_distance(&ea, &eb)
}

/// Loss and distance traces of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean penalized classifier loss per block of `t_min` steps.
    pub clf_loss: Vec<f64>,
    /// Mean flow NLL per block (empty for the baseline).
    pub flow_nll: Vec<f64>,
    /// Per-epoch mean NLL of flow pretraining.
    pub flow_pretrain: Vec<f64>,
    /// Environment distance between source and each round's hard examples.
    pub distances: Vec<f64>,
    /// Dataset size after each round.
    pub dataset_sizes: Vec<usize>,
}

fn diverged(phase: &'static str, round: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. }
        | Error::NumericOverflow { .. }
        | Error::TrainingDiverged { .. }
        | Error::AscentDiverged { .. } => Error::Diverged { phase, round, step },
        other => other,
    }
}

/// Models and settings that both training modes share.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub classifier: ClassifierConfig,
}

fn new_classifier(data: &Dataset, models: &ModelConfig, cfg: &AugmentationConfig) -> Result<ClassifierModel> {
    ClassifierModel::new(data.sample_shape(), data.class_count, models.classifier, cfg.seed)
}

fn new_flow(data: &Dataset, models: &ModelConfig, cfg: &AugmentationConfig) -> Result<FlowModel> {
    FlowModel::new(data.sample_shape(), data.class_count, models.flow, cfg.seed)
}

fn check_data(data: &Dataset, cfg: &AugmentationConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    Ok(())
}

/// Runs `steps` minimization iterations; each draws one batch (without
/// replacement inside the batch) and updates the classifier, then the flow
/// on the same indices when one is given. Returns mean losses.
#[allow(clippy::too_many_arguments)]
fn minimize_block(
    clf: &mut ClassifierModel,
    mut flow: Option<&mut FlowModel>,
    data: &Dataset,
    cfg: &AugmentationConfig,
    steps: usize,
    round: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let clf_opt = Adam::new(cfg.learning_rate)?;
    let flow_opt = Adam::new(cfg.flow_learning_rate)?;
    let (mut clf_total, mut flow_total) = (0.0, 0.0);
    for step in 0..steps {
        let batch = cfg.batch_size.min(data.len());
        let idx = index::sample(rng, data.len(), batch).into_vec();
        let (x, labels) = data.batch(&idx)?;
        clf_total += clf
            .train_step(&x, &labels, &clf_opt, cfg.reg_rate)
            .map_err(diverged("classifier", round, step))?;
        if let Some(flow) = flow.as_deref_mut() {
            flow_total += flow
                .train_step(&x, &labels, &flow_opt)
                .map_err(diverged("flow", round, step))?;
        }
    }
    let n = steps.max(1) as f64;
    Ok((clf_total / n, flow_total / n))
}

/// Source-only training: `(k_rounds + 1)·t_min` classifier steps.
pub fn train_baseline(data: &Dataset, models: &ModelConfig, cfg: &AugmentationConfig) -> Result<(ClassifierModel, TrainingTrace)> {
    check_data(data, cfg)?;
    let mut clf = new_classifier(data, models, cfg)?;
    let mut rng = stream(cfg.seed, Stream::ClassifierBatches);
    let mut trace = TrainingTrace::default();
    for round in 0..=cfg.k_rounds {
        if cfg.t_min > 0 {
            let (loss, _) = minimize_block(&mut clf, None, data, cfg, cfg.t_min, round, &mut rng)?;
            trace.clf_loss.push(loss);
        }
    }
    Ok((clf, trace))
}

/// A flow trained on the source set with the same schedule the joint loop
/// uses (pretraining plus one update per minimization step), but never on
/// hard examples. Serves as the baseline's latent model.
pub fn fit_reference_flow(data: &Dataset, models: &ModelConfig, cfg: &AugmentationConfig) -> Result<(FlowModel, TrainingTrace)> {
    check_data(data, cfg)?;
    let mut flow = new_flow(data, models, cfg)?;
    let pretrain = fit_flow(&mut flow, data, cfg.flow_pretrain_epochs, cfg.flow_learning_rate, cfg.batch_size, cfg.seed)
        .map_err(diverged("flow_pretrain", 0, 0))?;
    let opt = Adam::new(cfg.flow_learning_rate)?;
    let mut rng = stream(cfg.seed, Stream::ClassifierBatches);
    let mut trace = TrainingTrace {
        flow_pretrain: pretrain,
        ..TrainingTrace::default()
    };
    for round in 0..=cfg.k_rounds {
        let mut total = 0.0;
        for step in 0..cfg.t_min {
            let idx = index::sample(&mut rng, data.len(), cfg.batch_size.min(data.len())).into_vec();
            let (x, labels) = data.batch(&idx)?;
            total += flow.train_step(&x, &labels, &opt).map_err(diverged("flow", round, step))?;
        }
        if cfg.t_min > 0 {
            trace.flow_nll.push(total / cfg.t_min as f64);
        }
    }
    Ok((flow, trace))
}

/// The joint loop: pretrain the flow, then `k_rounds` of (`t_min` joint
/// minimization steps, one augmentation round), then `t_min` final steps.
pub fn train_unvp(
    data: &Dataset,
    models: &ModelConfig,
    cfg: &AugmentationConfig,
) -> Result<(FlowModel, ClassifierModel, TrainingTrace)> {
    let (state, trace) = train_unvp_state(data, models, cfg)?;
    Ok((state.flow, state.clf, trace))
}

/// Like [`train_unvp`] but also returns the final state, including the augmented dataset.
pub fn train_unvp_state(
    data: &Dataset,
    models: &ModelConfig,
    cfg: &AugmentationConfig,
) -> Result<(TrainState, TrainingTrace)> {
    check_data(data, cfg)?;
    let clf = new_classifier(data, models, cfg)?;
    let mut flow = new_flow(data, models, cfg)?;
    let mut trace = TrainingTrace {
        flow_pretrain: fit_flow(&mut flow, data, cfg.flow_pretrain_epochs, cfg.flow_learning_rate, cfg.batch_size, cfg.seed)
            .map_err(diverged("flow_pretrain", 0, 0))?,
        ..TrainingTrace::default()
    };
    let mut state = TrainState {
        flow,
        clf,
        dataset: data.clone(),
        source_len: data.len(),
        round: 0,
    };
    let mut batches = stream(cfg.seed, Stream::ClassifierBatches);
    let mut seeds = stream(cfg.seed, Stream::Augment);
    for round in 0..=cfg.k_rounds {
        state.round = round;
        if cfg.t_min > 0 {
            let (clf_loss, nll) = minimize_block(
                &mut state.clf,
                Some(&mut state.flow),
                &state.dataset,
                cfg,
                cfg.t_min,
                round,
                &mut batches,
            )?;
            trace.clf_loss.push(clf_loss);
            trace.flow_nll.push(nll);
        }
        if round == cfg.k_rounds {
            break;
        }
        let examples = augment_round(&mut state, cfg, &mut seeds).map_err(|e| match e {
            Error::AscentDiverged { step } => Error::Diverged { phase: "ascent", round, step },
            other => other,
        })?;
        let hard = Tensor::new(
            {
                let mut s = vec![examples.len()];
                s.extend_from_slice(data.sample_shape());
                s
            },
            examples.iter().flat_map(|e| e.image.data().iter().copied()).collect(),
        )?;
        let hard_labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        trace.distances.push(latent_environment_distance(
            &state.flow,
            (&data.images, &data.labels),
            (&hard, &hard_labels),
            data.class_count,
        )?);
        trace.dataset_sizes.push(state.dataset.len());
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_glyphs;

    fn tiny_models() -> ModelConfig {
        ModelConfig {
            flow: FlowConfig {
                layers: 2,
                hidden: 8,
                ..FlowConfig::default()
            },
            classifier: ClassifierConfig {
                conv1_channels: 2,
                conv2_channels: 3,
                kernel: 3,
                hidden: 8,
                ..ClassifierConfig::default()
            },
        }
    }

    fn tiny_cfg() -> AugmentationConfig {
        AugmentationConfig {
            eta: 0.05,
            t_min: 3,
            t_max: 2,
            k_rounds: 2,
            batch_size: 8,
            samples_per_round: 4,
            flow_pretrain_epochs: 1,
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig { eta: 0.0, ..AugmentationConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("eta")));
        let bad = AugmentationConfig { samples_per_round: 0, ..AugmentationConfig::default() };
        assert!(bad.validate().is_err());
        let ok = AugmentationConfig { samples_per_round: 0, k_rounds: 0, ..AugmentationConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn round_bookkeeping() {
        let data = generate_glyphs(20, 4, 8, 0).unwrap();
        let cfg = tiny_cfg();
        let (state, trace) = train_unvp_state(&data, &tiny_models(), &cfg).unwrap();
        assert_eq!(trace.distances.len(), 2);
        assert_eq!(trace.dataset_sizes, vec![24, 28]);
        assert_eq!(trace.clf_loss.len(), 3);
        assert_eq!(state.dataset.len(), 28);
        assert!(state.dataset.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn absent_class_is_a_domain_error() {
        let data = generate_glyphs(20, 4, 8, 0).unwrap();
        let keep: Vec<usize> = data.indices_of_class(0).into_iter().chain(data.indices_of_class(1)).collect();
        let mut partial = data.subset(&keep).unwrap();
        partial.class_count = 4;
        let err = train_unvp(&partial, &tiny_models(), &tiny_cfg()).unwrap_err();
        assert!(matches!(err, Error::Domain(m) if m.contains("class 2")));
    }
}
