use std::collections::BTreeMap;

use crate::error::{EngineError, Result};
use crate::tensor::Tensor;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// `None` until a backward pass has written to it.
    pub grad: Option<Tensor>,
}

/// Named collection of trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(EngineError::DuplicateParam(name));
        }
        self.entries.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| EngineError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| EngineError::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != grad.shape() {
            return Err(EngineError::shape(
                name,
                format!(
                    "gradient shape {:?} != parameter shape {:?}",
                    grad.shape(),
                    p.value.shape()
                ),
            ));
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2])),
            Err(EngineError::DuplicateParam(_))
        ));
    }

    #[test]
    fn gradient_shape_is_checked_and_accumulated() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.accumulate_grad("w", &Tensor::zeros(&[3])).is_err());
        let g = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        s.accumulate_grad("w", &g).unwrap();
        s.accumulate_grad("w", &g).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[2.0, 4.0]);
        s.zero_grads();
        assert!(s.grad("w").is_none());
    }
}
