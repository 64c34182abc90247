//! Central finite-difference checks for every differentiable piece of the system.
//!
//! Each registered check builds a small random problem, computes the tape
//! gradient, and compares it against `(f(x + h) − f(x − h)) / 2h`. Non-scalar
//! outputs are projected onto fixed random weights first so that every output
//! entry contributes.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ClassifierConfig, ClassifierModel};
use crate::distance::{sample_cost_on, DistanceConfig};
use crate::error::Result;
use crate::flow::{FlowConfig, FlowModel};
use crate::params::{Bound, ParamStore};
use crate::rng::{stream, Stream};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Step for the Jacobian used in log-determinant checks.
pub const JACOBIAN_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
/// Denominator floor: components smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Name of a check whose analytic result is deliberately perturbed.
    pub corrupt: Option<String>,
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

pub type Graph<'a> = dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'a;
pub type ParamGraph<'a> = dyn for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>> + 'a;

/// Pins the higher-ranked signature that closure inference cannot find alone.
fn param_graph<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    f
}

fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    if out.shape().is_empty() {
        return Ok(out);
    }
    out.mask_mul(weights)?.sum()
}

fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Check);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Tape gradients and central differences of `graph` with respect to all `inputs`,
/// flattened in input order.
pub fn input_gradients(inputs: &[Tensor], graph: &Graph<'_>, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&vars)?;
    let weights = projection_weights(&out.shape(), seed);
    let loss = project(out, &weights)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend_from_slice(grads.get(*v)?.data());
    }
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        project(graph(&vars)?, &weights)?.item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for j in 0..inputs.len() {
        for k in 0..inputs[j].len() {
            let orig = inputs[j].data()[k];
            work[j].data_mut()[k] = orig + FD_STEP;
            let up = eval(&work)?;
            work[j].data_mut()[k] = orig - FD_STEP;
            let down = eval(&work)?;
            work[j].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok((analytic, numeric))
}

/// Tape gradients and central differences with respect to parameters in `store`,
/// on at most `max_coords` coordinates chosen at random.
pub fn param_gradients(
    store: &ParamStore,
    graph: &ParamGraph<'_>,
    max_coords: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = graph(&tape, &bound)?;
    let weights = projection_weights(&out.shape(), seed);
    let loss = project(out, &weights)?;
    let grads = tape.backward(loss)?;
    let ids: Vec<_> = store.ids().collect();
    let mut coords = Vec::new();
    for &id in &ids {
        for k in 0..store.value(id).len() {
            coords.push((id, k));
        }
    }
    let mut rng = stream(seed ^ 0x5eed, Stream::Check);
    while coords.len() > max_coords {
        let i = (rng.next_u64() % coords.len() as u64) as usize;
        coords.swap_remove(i);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind_frozen(&tape);
        project(graph(&tape, &bound)?, &weights)?.item()
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = store.clone();
    for (id, k) in coords {
        analytic.push(grads.get(bound[id])?.data()[k]);
        let orig = store.value(id).clone();
        let mut t = orig.clone();
        t.data_mut()[k] += FD_STEP;
        work.set(id, t.clone())?;
        let up = eval(&work)?;
        t.data_mut()[k] -= 2.0 * FD_STEP;
        work.set(id, t)?;
        let down = eval(&work)?;
        work.set(id, orig)?;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok((analytic, numeric))
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut work = x.to_vec();
    for j in 0..n {
        work[j] = x[j] + h;
        let up = f(&work)?;
        work[j] = x[j] - h;
        let down = f(&work)?;
        work[j] = x[j];
        cols.push(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect::<Vec<_>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    Ok((0..m).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

/// `ln |det A|` by LU decomposition with partial pivoting; `−∞` when singular.
pub fn log_abs_det(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        a.swap(col, pivot);
        total += a[col][col].abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    total
}

/// Overwrites every parameter with uniform values in `(−scale, scale)`.
pub fn randomize_params(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store
            .set(id, Tensor::from_fn(&shape, |_| rng.random_range(-scale..scale)))
            .expect("same shape");
    }
}

/// A flow with non-trivial random parameters, for checks and tests.
pub fn random_flow(dim: usize, layers: usize, seed: u64) -> Result<FlowModel> {
    let cfg = FlowConfig {
        layers,
        hidden: 8,
        ..FlowConfig::default()
    };
    let mut flow = FlowModel::new(&[dim], 2.min(dim), cfg, seed)?;
    let mut rng = stream(seed, Stream::Check);
    randomize_params(flow.params_mut(), 0.5, &mut rng);
    Ok(flow)
}

/// `|total_log_det − ln|det J_fd||` for one sample through `flow`.
pub fn log_det_error(flow: &FlowModel, x: &[f64]) -> Result<f64> {
    let (_, ld) = flow.forward(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
    let jac = fd_jacobian(
        |p| Ok(flow.forward(&Tensor::new(vec![1, p.len()], p.to_vec())?)?.0.into_data()),
        x,
        JACOBIAN_STEP,
    )?;
    Ok((ld[0] - log_abs_det(&jac)).abs())
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random shape with 4–16 elements.
fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    const SHAPES: [[usize; 2]; 6] = [[2, 2], [2, 3], [3, 3], [2, 5], [4, 4], [3, 4]];
    SHAPES[rng.random_range(0..SHAPES.len())].to_vec()
}

enum Kind {
    Inputs(Vec<Tensor>, Box<Graph<'static>>),
    Params(Box<dyn Fn() -> Result<(Vec<f64>, Vec<f64>)>>),
    LogDet(Box<dyn Fn() -> Result<f64>>),
}

struct Check {
    name: String,
    threshold: f64,
    kind: Kind,
}

fn unary(
    name: &str,
    lo: f64,
    hi: f64,
    f: fn(Var<'_>) -> Result<Var<'_>>,
    rng: &mut ChaCha8Rng,
) -> Check {
    let shape = small_shape(rng);
    Check {
        name: name.to_string(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(vec![random_tensor(&shape, lo, hi, rng)], Box::new(move |v| f(v[0]))),
    }
}

fn binary(name: &str, f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>, rng: &mut ChaCha8Rng) -> Check {
    let shape = small_shape(rng);
    let a = random_tensor(&shape, -2.0, 2.0, rng);
    let b = random_tensor(&shape, -2.0, 2.0, rng);
    Check {
        name: name.to_string(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(vec![a, b], Box::new(move |v| f(v[0], v[1]))),
    }
}

/// Applies op `code` to `h`, using `other` for binary ops.
fn composed_op<'t>(code: u8, h: Var<'t>, other: Var<'t>) -> Result<Var<'t>> {
    match code {
        0 => h.tanh(),
        1 => h.scale(0.3)?.exp(),
        2 => h.softmax(),
        3 => h.log_softmax(),
        4 => h.square(),
        5 => h.add(other),
        6 => h.sub(other),
        _ => h.mul(other),
    }
}

fn registry(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Stream::Check);
    let rng = &mut rng;
    let mut checks = vec![
        binary("add", |a, b| a.add(b), rng),
        binary("sub", |a, b| a.sub(b), rng),
        binary("mul", |a, b| a.mul(b), rng),
        unary("square", -2.0, 2.0, |a| a.square(), rng),
        unary("scale", -2.0, 2.0, |a| a.scale(-1.7), rng),
        unary("add_scalar", -2.0, 2.0, |a| a.add_scalar(0.4), rng),
        unary("relu", -2.0, 2.0, |a| a.relu(), rng),
        unary("tanh", -2.0, 2.0, |a| a.tanh(), rng),
        unary("exp", -2.0, 2.0, |a| a.exp(), rng),
        unary("log", 0.2, 3.0, |a| a.log(), rng),
        unary("softmax", -2.0, 2.0, |a| a.softmax(), rng),
        unary("log_softmax", -2.0, 2.0, |a| a.log_softmax(), rng),
        unary("sum", -2.0, 2.0, |a| a.sum(), rng),
        unary("mean", -2.0, 2.0, |a| a.mean(), rng),
        unary("sum_last", -2.0, 2.0, |a| a.sum_last(), rng),
        unary("reshape", -2.0, 2.0, |a| {
            let n: usize = a.shape().iter().product();
            a.reshape(&[n])
        }, rng),
    ];

    let shape = small_shape(rng);
    let mask = random_tensor(&shape, -1.0, 1.0, rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    checks.push(Check {
        name: "mask_mul".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(vec![random_tensor(&shape, -2.0, 2.0, rng)], Box::new(move |v| v[0].mask_mul(&mask))),
    });
    checks.push(Check {
        name: "add_bias".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(
            vec![random_tensor(&[3, 4], -2.0, 2.0, rng), random_tensor(&[4], -2.0, 2.0, rng)],
            Box::new(|v| v[0].add_bias(v[1])),
        ),
    });
    checks.push(Check {
        name: "matmul".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(
            vec![random_tensor(&[3, 4], -2.0, 2.0, rng), random_tensor(&[4, 2], -2.0, 2.0, rng)],
            Box::new(|v| v[0].matmul(v[1])),
        ),
    });
    checks.push(Check {
        name: "concat".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(
            vec![random_tensor(&[2, 3], -2.0, 2.0, rng), random_tensor(&[2, 2], -2.0, 2.0, rng)],
            Box::new(|v| Var::concat(&[v[0], v[1]], 1)),
        ),
    });
    for (name, padding) in [("conv2d_valid", Padding::Valid), ("conv2d_same", Padding::Same)] {
        checks.push(Check {
            name: name.into(),
            threshold: PRIMITIVE_TOLERANCE,
            kind: Kind::Inputs(
                vec![
                    random_tensor(&[2, 2, 4, 4], -1.0, 1.0, rng),
                    random_tensor(&[2, 2, 3, 3], -1.0, 1.0, rng),
                    random_tensor(&[2], -1.0, 1.0, rng),
                ],
                Box::new(move |v| v[0].conv2d(v[1], Some(v[2]), padding)),
            ),
        });
    }
    checks.push(Check {
        name: "max_pool2".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::Inputs(vec![random_tensor(&[1, 2, 4, 4], -2.0, 2.0, rng)], Box::new(|v| v[0].max_pool2())),
    });

    for i in 0..3 {
        let ops: Vec<u8> = (0..3).map(|_| rng.random_range(0..8)).collect();
        let shape = small_shape(rng);
        checks.push(Check {
            name: format!("composed_{i}"),
            threshold: PRIMITIVE_TOLERANCE,
            kind: Kind::Inputs(
                vec![random_tensor(&shape, -1.5, 1.5, rng), random_tensor(&shape, -1.5, 1.5, rng)],
                Box::new(move |v| ops.iter().try_fold(v[0], |h, &code| composed_op(code, h, v[1]))),
            ),
        });
    }

    // Coupling and flow log-determinants against a numerically assembled Jacobian.
    let layer_seed = rng.next_u64();
    let x4 = random_tensor(&[4], -2.0, 2.0, rng).into_data();
    checks.push(Check {
        name: "coupling_log_det".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::LogDet(Box::new(move || {
            let flow = random_flow(4, 2, layer_seed)?;
            // A single coupling layer: compare against the first layer alone.
            let single = |p: &[f64]| -> Result<(Vec<f64>, f64)> {
                let tape = Tape::new();
                let bound = flow.params().bind_frozen(&tape);
                let (y, ld) = flow.layers()[0].forward(&bound, tape.constant(Tensor::new(vec![1, 4], p.to_vec())?))?;
                Ok((y.value().into_data(), ld.value().data()[0]))
            };
            let jac = fd_jacobian(|p| Ok(single(p)?.0), &x4, JACOBIAN_STEP)?;
            Ok((single(&x4)?.1 - log_abs_det(&jac)).abs())
        })),
    });
    let flow_seed = rng.next_u64();
    let x5 = random_tensor(&[5], -2.0, 2.0, rng).into_data();
    checks.push(Check {
        name: "flow_log_det".into(),
        threshold: PRIMITIVE_TOLERANCE,
        kind: Kind::LogDet(Box::new(move || log_det_error(&random_flow(5, 4, flow_seed)?, &x5))),
    });

    let flow = random_flow(6, 4, rng.next_u64())?;
    let x6 = random_tensor(&[2, 6], -2.0, 2.0, rng);
    let f1 = flow.clone();
    checks.push(Check {
        name: "log_likelihood_x".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Inputs(
            vec![x6.clone()],
            Box::new(move |v| {
                let bound = f1.params().bind_frozen(v[0].tape());
                f1.log_likelihood_on(&bound, v[0], &[0, 1])
            }),
        ),
    });
    let check_seed = rng.next_u64();
    checks.push(Check {
        name: "log_likelihood_theta".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Params(Box::new(move || {
            let graph = param_graph(|tape, bound| flow.log_likelihood_on(bound, tape.constant(x6.clone()), &[1, 0]));
            param_gradients(flow.params(), &graph, 80, check_seed)
        })),
    });

    let clf_cfg = ClassifierConfig {
        conv1_channels: 2,
        conv2_channels: 3,
        kernel: 3,
        hidden: 5,
        ..ClassifierConfig::default()
    };
    let mut clf = ClassifierModel::new(&[1, 4, 4], 2, clf_cfg, rng.next_u64())?;
    randomize_params(clf.params_mut(), 0.6, rng);
    let mut cost_flow = FlowModel::new(&[1, 4, 4], 2, FlowConfig { hidden: 6, ..FlowConfig::default() }, 0)?;
    randomize_params(cost_flow.params_mut(), 0.3, rng);
    let images = random_tensor(&[2, 1, 4, 4], 0.05, 0.95, rng);
    let src = random_tensor(&[2, 1, 4, 4], 0.05, 0.95, rng);

    let (f2, c2, s2) = (cost_flow.clone(), clf.clone(), src.clone());
    checks.push(Check {
        name: "sample_cost_x".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Inputs(
            vec![images.clone()],
            Box::new(move |v| {
                let tape = v[0].tape();
                let fb = f2.params().bind_frozen(tape);
                let cb = c2.params().bind_frozen(tape);
                let cfg = DistanceConfig { alpha: 1.0, feature_weight: 0.7 };
                sample_cost_on(v[0], tape.constant(s2.clone()), (&f2, &fb), (&c2, &cb), &cfg)
            }),
        ),
    });
    let c3 = clf.clone();
    checks.push(Check {
        name: "classifier_features_x".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Inputs(
            vec![images.clone()],
            Box::new(move |v| {
                let bound = c3.params().bind_frozen(v[0].tape());
                c3.features_on(&bound, v[0])
            }),
        ),
    });
    let c4 = clf.clone();
    checks.push(Check {
        name: "classifier_loss_x".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Inputs(
            vec![images.clone()],
            Box::new(move |v| {
                let bound = c4.params().bind_frozen(v[0].tape());
                c4.loss_on(&bound, v[0], &[1, 0])
            }),
        ),
    });
    let check_seed = rng.next_u64();
    checks.push(Check {
        name: "classifier_loss_theta".into(),
        threshold: COMPOSED_TOLERANCE,
        kind: Kind::Params(Box::new(move || {
            let graph = param_graph(|tape, bound| clf.loss_on(bound, tape.constant(images.clone()), &[0, 1]));
            param_gradients(clf.params(), &graph, 80, check_seed)
        })),
    });
    Ok(checks)
}

/// Runs the full registry in a fixed order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    let checks = registry(opts.seed)?;
    let mut out = Vec::with_capacity(checks.len());
    for (i, check) in checks.into_iter().enumerate() {
        let corrupt = opts.corrupt.as_deref() == Some(check.name.as_str());
        let max_error = match check.kind {
            Kind::Inputs(inputs, graph) => {
                let (mut analytic, numeric) = input_gradients(&inputs, graph.as_ref(), opts.seed.wrapping_add(i as u64))?;
                if corrupt {
                    analytic.iter_mut().for_each(|g| *g = *g * 1.01 + 0.01);
                }
                relative_error(&analytic, &numeric)
            }
            Kind::Params(run) => {
                let (mut analytic, numeric) = run()?;
                if corrupt {
                    analytic.iter_mut().for_each(|g| *g = *g * 1.01 + 0.01);
                }
                relative_error(&analytic, &numeric)
            }
            Kind::LogDet(run) => run()? + if corrupt { 0.01 } else { 0.0 },
        };
        out.push(CheckOutcome {
            name: check.name,
            max_error,
            threshold: check.threshold,
        });
    }
    Ok(out)
}

/// Names of all registered checks, in run order.
pub fn check_names(seed: u64) -> Result<Vec<String>> {
    Ok(registry(seed)?.into_iter().map(|c| c.name).collect())
}
