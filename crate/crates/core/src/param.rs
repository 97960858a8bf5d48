//! Trainable parameters, their optimizer state, and batchnorm running
//! statistics.
//!
//! Parameters live in an arena and are referenced by index, so layer
//! descriptors stay `Copy` and the whole set can be bound onto a fresh tape
//! each step, serialized in a stable order, or updated in place by the
//! optimizer without any reference-counting ceremony.

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Id, Tape};
use crate::tensor::{Element, Shape, Tensor};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub adam_m: Tensor<E>,
    pub adam_v: Tensor<E>,
    pub step_count: u64,
}

impl<E: Element> Parameter<E> {
    fn new(name: String, value: Tensor<E>) -> Self {
        let shape = value.shape();
        Parameter {
            name,
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// Standard Adam update with bias correction. Increments each parameter's
/// step count and zeroes its gradient afterwards.
pub fn adam_step<E: Element>(
    params: &mut [Parameter<E>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    for p in params {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..p.value.len() {
            let g = p.grad.data()[i].as_f64();
            let m = beta1 * p.adam_m.data()[i].as_f64() + (1.0 - beta1) * g;
            let v = beta2 * p.adam_v.data()[i].as_f64() + (1.0 - beta2) * g * g;
            p.adam_m.data_mut()[i] = E::of_f64(m);
            p.adam_v.data_mut()[i] = E::of_f64(v);
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + epsilon);
            let w = p.value.data()[i].as_f64() - update;
            p.value.data_mut()[i] = E::of_f64(w);
            p.grad.data_mut()[i] = E::zero();
        }
    }
}

/// Node ids for one arena bound onto one tape, in arena order.
pub struct Binding {
    ids: Vec<Id>,
}

impl Binding {
    pub fn node(&self, p: ParamId) -> Id {
        self.ids[p.0]
    }
}

#[derive(Clone)]
pub struct ParamArena<E> {
    params: Vec<Parameter<E>>,
}

impl<E: Element> Default for ParamArena<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamArena<E> {
    pub fn new() -> Self {
        ParamArena { params: Vec::new() }
    }

    /// Registers a tensor under a unique name. The name keys the model file,
    /// so collisions are rejected outright.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!("parameter {:?} shape changed", p.name),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter value as a gradient-tracked tape node.
    pub fn bind(&self, tape: &mut Tape<E>) -> Binding {
        Binding { ids: self.params.iter().map(|p| tape.var(p.value.clone())).collect() }
    }

    /// Adds the tape's gradients into each parameter's accumulator.
    /// Parameters the loss never reached keep their current (zero) gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape<E>, binding: &Binding) {
        for (p, &id) in self.params.iter_mut().zip(&binding.ids) {
            if let Some(g) = tape.grad(id) {
                p.grad.add_assign_scaled(g, E::one());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            for v in p.grad.data_mut() {
                *v = E::zero();
            }
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = E::of_f64(max_norm / norm);
            for p in self.params.iter_mut() {
                for v in p.grad.data_mut() {
                    *v = *v * s;
                }
            }
        }
        norm
    }

    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, epsilon: f64) {
        adam_step(&mut self.params, lr, beta1, beta2, epsilon);
    }
}

/// Centered uniform init with the bound 1/sqrt(fan_in); the standard choice
/// for conv kernels where fan_in = kh·kw·Cin.
pub fn uniform_fan_in<E: Element>(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> Tensor<E> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = E::of_f64(rng.gen_range(-bound..bound));
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateId(pub(crate) usize);

/// Running statistics for one batchnorm layer. Updated outside the tape,
/// exponential moving average with the given momentum.
#[derive(Clone)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batches_seen: u64,
}

#[derive(Clone)]
pub struct StateArena {
    states: Vec<BnState>,
}

impl Default for StateArena {
    fn default() -> Self {
        Self::new()
    }
}

impl StateArena {
    pub fn new() -> Self {
        StateArena { states: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> Result<StateId> {
        let name = name.into();
        if self.states.iter().any(|s| s.name == name) {
            return Err(Error::config(format!("duplicate batchnorm state name {name:?}")));
        }
        self.states.push(BnState {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches_seen: 0,
        });
        Ok(StateId(self.states.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, id: StateId) -> &BnState {
        &self.states[id.0]
    }

    pub fn get_mut(&mut self, id: StateId) -> &mut BnState {
        &mut self.states[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BnState> {
        self.states.iter()
    }

    /// Folds one batch's statistics into the running average.
    pub fn update(&mut self, id: StateId, stats: &BatchStats, momentum: f64) {
        let s = &mut self.states[id.0];
        for (r, &b) in s.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in s.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        s.batches_seen += 1;
    }

    /// Statistics for eval-mode normalization. Running averages only exist
    /// after training has updated them at least once, so an untouched layer
    /// is an error rather than a silent identity transform.
    pub fn eval_stats(&self, id: StateId) -> Result<(&[f64], &[f64])> {
        let s = &self.states[id.0];
        if s.batches_seen == 0 {
            return Err(Error::eval(format!(
                "batchnorm {:?} has no recorded running statistics; train before eval",
                s.name
            )));
        }
        Ok((&s.mean, &s.var))
    }
}
