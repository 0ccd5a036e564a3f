//! Trainable parameters and named parameter sets.
//!
//! A [`Param`] is a shared handle: cloning it aliases the same storage. Two
//! branches of a multi-task network that share a block hold clones of the
//! same handles, so an optimizer step through either view is visible through
//! the other.

use std::sync::{Arc, RwLock, RwLockReadGuard};

use super::error::{EngineError, Result};
use super::tensor::Tensor;

#[derive(Debug)]
struct ParamCell {
    value: Tensor,
    grad: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Param(Arc<RwLock<ParamCell>>);

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param(Arc::new(RwLock::new(ParamCell { value, grad: None })))
    }

    fn read(&self) -> RwLockReadGuard<'_, ParamCell> {
        self.0.read().expect("parameter lock poisoned")
    }

    pub fn value(&self) -> Tensor {
        self.read().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.read().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.read().value.numel()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.read().value)
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut cell = self.0.write().expect("parameter lock poisoned");
        if cell.value.shape() != value.shape() {
            return Err(EngineError::Shape(format!(
                "cannot assign shape {:?} to parameter of shape {:?}",
                value.shape(),
                cell.value.shape()
            )));
        }
        cell.value = value;
        Ok(())
    }

    /// Runs `f` with mutable access to the value and read access to the grad.
    pub fn update<R>(&self, f: impl FnOnce(&mut Tensor, Option<&Tensor>) -> R) -> R {
        let mut cell = self.0.write().expect("parameter lock poisoned");
        let ParamCell { value, grad } = &mut *cell;
        f(value, grad.as_ref())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.read().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.write().expect("parameter lock poisoned").grad = None;
    }

    /// Adds `delta` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&self, delta: &Tensor) -> Result<()> {
        let mut cell = self.0.write().expect("parameter lock poisoned");
        if cell.value.shape() != delta.shape() {
            return Err(EngineError::Shape(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                delta.shape(),
                cell.value.shape()
            )));
        }
        match &mut cell.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.clone()),
        }
        Ok(())
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Handle with fresh storage holding a copy of the current value.
    pub fn deep_clone(&self) -> Param {
        Param::new(self.value())
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Param)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(EngineError::ParamMismatch(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries.push((name, param));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, p)| p.zero_grad());
    }

    /// Independent copy: same names and values, fresh storage.
    pub fn deep_clone(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| (n.clone(), p.deep_clone()))
                .collect(),
        }
    }

    /// Overwrites every value with the same-named value of `source`.
    pub fn copy_values_from(&self, source: &ParamSet) -> Result<()> {
        self.check_compatible(source)?;
        for ((_, dst), (_, src)) in self.entries.iter().zip(&source.entries) {
            dst.set_value(src.value())?;
        }
        Ok(())
    }

    /// Errors unless `other` has identical names (in order) and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(EngineError::ParamMismatch(format!(
                "{} parameters vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(EngineError::ParamMismatch(format!(
                    "name `{na}` vs `{nb}`"
                )));
            }
            if pa.shape() != pb.shape() {
                return Err(EngineError::ParamMismatch(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    pa.shape(),
                    pb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Named snapshot of all values, in order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.value()))
            .collect()
    }
}
