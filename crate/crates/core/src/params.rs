//! Named parameter sets and their gradient stores.
//!
//! A [`ParamSet`] owns the trainable tensors of a model in a stable
//! insertion order (which fixes checkpoint byte layout). Gradients live in
//! a parallel [`GradStore`] so a computation graph can borrow the
//! parameters immutably while gradients are flushed after backward.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> ParamSet<T> {
        ParamSet { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace the value of a named parameter, checking the shape.
    pub fn load_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, checkpoint holds {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamSet`]. `touched` records which
/// parameters received any accumulation since the last `zero()`, so the
/// optimizer can reject a step with missing gradients.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
    touched: Vec<bool>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new(params: &ParamSet<T>) -> GradStore<T> {
        GradStore {
            grads: params.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            touched: vec![false; params.len()],
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
        self.touched.iter_mut().for_each(|t| *t = false);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.grads[id.0].add_assign(grad);
        self.touched[id.0] = true;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    pub fn all_touched(&self) -> bool {
        self.touched.iter().all(|&t| t)
    }

    pub fn grads_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.grads.iter_mut()
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .map(|g| g.squared_norm())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("b_second", Tensor::zeros(&[2]));
        let b = ps.add("a_first", Tensor::zeros(&[3]));
        assert_eq!(ps.name(a), "b_second");
        assert_eq!(ps.name(b), "a_first");
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b_second", "a_first"]);
    }

    #[test]
    fn grad_store_tracks_touched() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("a", Tensor::zeros(&[2]));
        let b = ps.add("b", Tensor::zeros(&[2]));
        let mut gs = GradStore::new(&ps);
        assert!(!gs.all_touched());
        gs.accumulate(a, &Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(gs.touched(a));
        assert!(!gs.touched(b));
        gs.accumulate(b, &Tensor::zeros(&[2]));
        assert!(gs.all_touched());
        gs.zero();
        assert!(!gs.touched(a));
        assert_eq!(gs.grad(a).data(), &[0.0, 0.0]);
    }
}
