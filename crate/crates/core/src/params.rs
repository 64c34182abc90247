//! Named trainable parameters with gradient accumulators and Adam state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

/// The parameters of a store recorded as leaves on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for the L2 weight penalty.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; each name must be present.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let value = entries
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
            self.set(ParamId(i), value)?;
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (no gradient flows into them).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients of a bound copy into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound<'_>) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "bound {} parameters but store holds {}",
                bound.vars.len(),
                self.params.len()
            )));
        }
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let g = grads.get(*var)?;
            p.grad
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Adds `rate · Σ‖w‖²` over decayed parameters to the gradients and returns the penalty.
    pub fn apply_weight_decay(&mut self, rate: f64) -> f64 {
        if rate == 0.0 {
            return 0.0;
        }
        let mut penalty = 0.0;
        for p in self.params.iter_mut().filter(|p| p.decay) {
            for (g, w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += 2.0 * rate * w;
                penalty += rate * w * w;
            }
        }
        penalty
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam update with bias correction, then clears the accumulators.
    pub fn step(&mut self, opt: &Adam) -> Result<()> {
        if !(opt.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                opt.learning_rate
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for p in &mut self.params {
            let (w, g) = (p.value.data_mut(), p.grad.data_mut());
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..w.len() {
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
                g[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: one Adam step at `learning_rate` with default moments.
pub fn optimizer_step(params: &mut ParamStore, learning_rate: f64) -> Result<()> {
    params.step(&Adam::new(learning_rate)?)
}

/// Uniform Glorot initialization for a weight with the given fan-in/out.
pub(crate) fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), true);
        s.params[0].grad = Tensor::scalar(grad);
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let (mut s, id) = one_param(1.0, 1.0);
        optimizer_step(&mut s, 1e-4).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction, so the move is lr / (1 + ε).
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((s.value(id).item().unwrap() - expected).abs() < 1e-15);
        assert_eq!(s.grad(id).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = one_param(0.75, 0.0);
        optimizer_step(&mut s, 1e-2).unwrap();
        assert_eq!(s.value(id).item().unwrap(), 0.75);
    }

    #[test]
    fn identical_stores_step_identically() {
        let (mut a, id) = one_param(0.3, -0.2);
        let (mut b, _) = one_param(0.3, -0.2);
        for _ in 0..3 {
            a.params[0].grad = Tensor::scalar(0.7);
            b.params[0].grad = Tensor::scalar(0.7);
            optimizer_step(&mut a, 1e-3).unwrap();
            optimizer_step(&mut b, 1e-3).unwrap();
        }
        assert_eq!(a.value(id).item().unwrap().to_bits(), b.value(id).item().unwrap().to_bits());
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let (mut s, _) = one_param(1.0, 1.0);
        assert!(matches!(optimizer_step(&mut s, 0.0), Err(Error::Config(_))));
        assert!(matches!(optimizer_step(&mut s, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn step_preserves_shapes_and_accumulates() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::ones(&[2, 3]), true);
        let b = s.add("b", Tensor::zeros(&[3]), false);
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let y = x.matmul(bound[w]).unwrap().add_bias(bound[b]).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        s.accumulate(&g, &bound).unwrap();
        assert_eq!(s.grad(b).data(), &[1.0, 1.0, 1.0]);
        let penalty = s.apply_weight_decay(0.5);
        assert!((penalty - 3.0).abs() < 1e-15);
        assert_eq!(s.grad(w).data()[0], 2.0);
        optimizer_step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(w).shape(), &[2, 3]);
        assert_eq!(s.value(b).shape(), &[3]);
    }
}
