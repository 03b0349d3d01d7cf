//! Named learnable tensors with same-shape gradient accumulators.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Result, SigError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Glorot-uniform initialised matrix of shape `[fan_in, fan_out]`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `grad` into the accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let acc = &mut self.grads[id.0];
        if acc.numel() != grad.len() {
            return Err(SigError::Shape {
                op: "accumulate",
                lhs: acc.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for (a, g) in acc.data_mut().iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    /// Replaces every value with the same-named value in `other`.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| invalid(format!("missing parameter `{name}`")))?;
            let v = other.value(src);
            if v.shape() != self.values[i].shape() {
                return Err(SigError::Shape {
                    op: "copy_values_from",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_match_shape() {
        let mut p = ParameterSet::new();
        let id = p.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.grad(id).shape(), &[2, 3]);
        p.accumulate(id, &[1.0; 6]).unwrap();
        p.accumulate(id, &[1.0; 6]).unwrap();
        assert_eq!(p.grad(id).data(), &[2.0; 6]);
        p.zero_grad();
        assert_eq!(p.grad(id).data(), &[0.0; 6]);
        assert!(p.accumulate(id, &[1.0; 5]).is_err());
    }
}
