use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Option<Vec<f64>>,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            momentum: None,
        });
        Ok(id)
    }

    /// Glorot-uniform init: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(shape.to_vec(), bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), grad.to_vec())
                        .expect("gradient shape matches its parameter"),
                );
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Gives every parameter without a gradient an all-zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    /// Multiplies every populated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Replaces the value of every parameter with the matching one from `other`.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v <- momentum * v + grad; p <- p - lr * v`.
/// Gradients are cleared afterwards. Every parameter must have a gradient.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in &mut params.params {
        let grad = p.grad.take().expect("checked above");
        let v = p.momentum.get_or_insert_with(|| vec![0.0; grad.numel()]);
        for ((w, vi), g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(grad.data())
        {
            *vi = momentum * *vi + g;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// Adam state lives in the parameter's `momentum` buffer as `[m; v]` plus a shared step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in &mut params.params {
            let grad = p.grad.take().expect("checked above");
            let n = grad.numel();
            let state = p.momentum.get_or_insert_with(|| vec![0.0; 2 * n]);
            let (m, v) = state.split_at_mut(n);
            for (((w, mi), vi), g) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(grad.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Optimizer choice as it appears in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr } => lr,
        }
    }

    pub fn build(&self) -> Optimizer {
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => Optimizer::Sgd { lr, momentum },
            OptimizerConfig::Adam { lr } => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Sgd { lr, momentum } => sgd_step(params, *lr, *momentum),
            Optimizer::Adam(adam) => adam.step(params),
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            Optimizer::Sgd { lr, .. } => *lr = value,
            Optimizer::Adam(adam) => adam.lr = value,
        }
    }
}
