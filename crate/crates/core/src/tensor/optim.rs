use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    /// Heavy-ball SGD: `v = mu * v + g; w -= lr * v`.
    Momentum { mu: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }

    pub fn momentum() -> Self {
        OptimizerKind::Momentum { mu: 0.9 }
    }
}

#[derive(Debug, Clone)]
enum SlotState<T> {
    Empty,
    Adam { m: Vec<T>, v: Vec<T> },
    Momentum { velocity: Vec<T> },
}

#[derive(Debug, Clone)]
struct Slot<T: Real> {
    tensor: Tensor<T>,
    state: SlotState<T>,
}

/// Named trainable parameters, non-trainable buffers (batch-norm running
/// statistics) and per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Slot<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    adam_steps: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new(), adam_steps: 0 }
    }

    /// Registers a trainable leaf; names are unique.
    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let tensor = Tensor::parameter(shape, data)?;
        self.params.insert(name.to_string(), Slot { tensor: tensor.clone(), state: SlotState::Empty });
        Ok(tensor)
    }

    pub fn register_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.buffers.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|s| &s.tensor)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for slot in self.params.values() {
            slot.tensor.zero_grad();
        }
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// Optimizer moment buffers as `(param name, state name, values)`.
    pub fn optimizer_state(&self) -> Vec<(String, &'static str, Vec<T>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.params {
            match &slot.state {
                SlotState::Empty => {}
                SlotState::Adam { m, v } => {
                    out.push((name.clone(), "m", m.clone()));
                    out.push((name.clone(), "v", v.clone()));
                }
                SlotState::Momentum { velocity } => out.push((name.clone(), "velocity", velocity.clone())),
            }
        }
        out
    }

    /// Restores state written by [`optimizer_state`](Self::optimizer_state).
    pub fn restore_optimizer_state(
        &mut self,
        name: &str,
        state: &str,
        values: Vec<T>,
        adam_steps: u64,
    ) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if values.len() != slot.tensor.numel() {
            return Err(Error::shape("optimizer state", format!("{name}/{state} has wrong length")));
        }
        let n = slot.tensor.numel();
        match state {
            "m" | "v" => {
                if !matches!(slot.state, SlotState::Adam { .. }) {
                    slot.state = SlotState::Adam { m: vec![T::zero(); n], v: vec![T::zero(); n] };
                }
                if let SlotState::Adam { m, v } = &mut slot.state {
                    if state == "m" {
                        *m = values;
                    } else {
                        *v = values;
                    }
                }
            }
            "velocity" => slot.state = SlotState::Momentum { velocity: values },
            other => return Err(Error::invalid("optimizer state", format!("unknown state `{other}`"))),
        }
        self.adam_steps = adam_steps;
        Ok(())
    }

    /// Applies one update in place to every parameter, then clears the
    /// gradients. Every parameter must have a gradient.
    pub fn optimizer_step(&mut self, kind: OptimizerKind, lr: f64) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, s)| s.tensor.grad_ref().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        if let OptimizerKind::Adam(_) = kind {
            self.adam_steps += 1;
        }
        let steps = self.adam_steps as i32;
        for slot in self.params.values_mut() {
            let grad = slot.tensor.grad().expect("checked above");
            let n = grad.len();
            match kind {
                OptimizerKind::Adam(cfg) => {
                    if !matches!(slot.state, SlotState::Adam { .. }) {
                        slot.state = SlotState::Adam { m: vec![T::zero(); n], v: vec![T::zero(); n] };
                    }
                    let SlotState::Adam { m, v } = &mut slot.state else { unreachable!() };
                    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
                    let c1 = T::one() - T::of(cfg.beta1.powi(steps));
                    let c2 = T::one() - T::of(cfg.beta2.powi(steps));
                    let (lr, eps) = (T::of(lr), T::of(cfg.epsilon));
                    slot.tensor.update_data(|w| {
                        for i in 0..n {
                            let g = grad[i];
                            m[i] = b1 * m[i] + (T::one() - b1) * g;
                            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                            let mhat = m[i] / c1;
                            let vhat = v[i] / c2;
                            w[i] -= lr * mhat / (vhat.sqrt() + eps);
                        }
                    });
                }
                OptimizerKind::Momentum { mu } => {
                    if !matches!(slot.state, SlotState::Momentum { .. }) {
                        slot.state = SlotState::Momentum { velocity: vec![T::zero(); n] };
                    }
                    let SlotState::Momentum { velocity } = &mut slot.state else { unreachable!() };
                    let (mu, lr) = (T::of(mu), T::of(lr));
                    slot.tensor.update_data(|w| {
                        for i in 0..n {
                            velocity[i] = mu * velocity[i] + grad[i];
                            w[i] -= lr * velocity[i];
                        }
                    });
                }
            }
            slot.tensor.zero_grad();
        }
        Ok(())
    }
}
