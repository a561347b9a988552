//! Named parameter storage with gradient accumulators and Adam state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    adam_m: Tensor<T>,
    adam_v: Tensor<T>,
    frozen: bool,
}

/// Owns every learnable tensor. Each parameter has exactly one name;
/// gradient and optimizer-state shapes always match the parameter shape.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, u32>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len() as u32;
        let shape = value.shape();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0 as usize].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0 as usize].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0 as usize];
        if value.shape() != e.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} has shape {:?}, assignment has {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0 as usize];
        if e.frozen {
            return Ok(());
        }
        e.grad.add_assign(delta).map_err(|_| {
            Error::ShapeMismatch(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                delta.shape(),
                e.name,
                e.value.shape()
            ))
        })
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// Freeze every parameter whose name starts with `prefix`; frozen
    /// parameters accumulate no gradient and are skipped by Adam.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0 as usize].frozen
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn iter_names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.entries.iter().enumerate().map(|(i, e)| (e.name.as_str(), ParamId(i as u32)))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// One Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) over all
    /// non-frozen parameters; gradients are cleared afterward.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let beta1 = 0.9f64;
        let beta2 = 0.999f64;
        let eps = 1e-8f64;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for e in &mut self.entries {
            if e.frozen {
                continue;
            }
            let n = e.value.numel();
            let value = e.value.data_mut();
            let grad = e.grad.data();
            let m = e.adam_m.data_mut();
            let v = e.adam_v.data_mut();
            for i in 0..n {
                let g = grad[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let upd = lr * m_hat / (v_hat.sqrt() + eps);
                value[i] = T::from_f64(value[i].as_f64() - upd);
            }
        }
        self.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.register("w", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("p", Tensor::full([1, 1, 1, 1], 3.5)).unwrap();
        s.adam_step(1e-2);
        assert_eq!(s.value(id).data()[0], 3.5);
    }

    #[test]
    fn single_adam_step_is_bias_corrected() {
        // p = 0, grad = 1, fresh state: m_hat / sqrt(v_hat) = 1, so the
        // first update is -lr up to eps.
        let mut s = ParamStore::<f64>::new();
        let id = s.register("p", Tensor::zeros([1, 1, 1, 1])).unwrap();
        s.accumulate_grad(id, &Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        s.adam_step(1e-4);
        let p = s.value(id).data()[0];
        assert!((p + 1e-4).abs() < 1e-10, "p = {p}");
        // Gradients cleared by the step.
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_decreases_parameter_monotonically() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("p", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let mut prev = 0.0;
        for _ in 0..2 {
            s.accumulate_grad(id, &Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
            s.adam_step(1e-4);
            let p = s.value(id).data()[0];
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("intra.p", Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        s.freeze_prefix("intra.");
        s.accumulate_grad(id, &Tensor::full([1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(s.grad(id).data()[0], 0.0);
        s.adam_step(1.0);
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
