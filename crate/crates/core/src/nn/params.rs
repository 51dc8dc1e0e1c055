//! Named parameter traversal shared by the optimizer, serializer and gradient plumbing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a tensor is trained or only tracked (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor));

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, role, t| {
            if role == TensorRole::Param {
                n += t.numel();
            }
        });
        n
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads(BTreeMap<String, Tensor>);

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) -> Result<()> {
        if self.0.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate gradient for {name}")));
        }
        self.0.insert(name, grad);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Sum of squared entries across all gradients.
    pub fn sq_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum()
    }
}

impl Parameterized for crate::nn::Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor)) {
        f(&join(prefix, "weight"), TensorRole::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), TensorRole::Param, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorRole::Param, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), TensorRole::Param, b);
        }
    }
}

impl Parameterized for crate::nn::BatchNorm1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor)) {
        f(&join(prefix, "weight"), TensorRole::Param, &self.weight);
        f(&join(prefix, "bias"), TensorRole::Param, &self.bias);
        f(&join(prefix, "running_mean"), TensorRole::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorRole::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor)) {
        f(&join(prefix, "weight"), TensorRole::Param, &mut self.weight);
        f(&join(prefix, "bias"), TensorRole::Param, &mut self.bias);
        f(&join(prefix, "running_mean"), TensorRole::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorRole::Buffer, &mut self.running_var);
    }
}

impl crate::nn::ConvGrads {
    pub fn collect_into(self, prefix: &str, grads: &mut ParamGrads) -> Result<()> {
        grads.insert(join(prefix, "weight"), self.weight)?;
        if let Some(b) = self.bias {
            grads.insert(join(prefix, "bias"), b)?;
        }
        Ok(())
    }
}

impl crate::nn::BnGrads {
    pub fn collect_into(self, prefix: &str, grads: &mut ParamGrads) -> Result<()> {
        grads.insert(join(prefix, "weight"), self.weight)?;
        grads.insert(join(prefix, "bias"), self.bias)
    }
}
