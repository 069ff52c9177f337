use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// An ordered set of named tensors, treated as one flat vector for the
/// optimizer arithmetic (dot products, axpy).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        let same = self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::invalid("parameter sets have different layouts"))
        }
    }

    /// Full flat inner product.
    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum())
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.dot(t)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
            if !a.all_finite() {
                return Err(Error::NonFinite { op: "axpy" });
            }
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Result<ParamSet> {
        let mut out = self.zeros_like();
        out.axpy(alpha, self)?;
        Ok(out)
    }

    /// Puts every tensor on `tape` as a parameter leaf with id `offset + i`.
    pub fn register(&self, tape: &mut Tape, offset: usize) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(offset + i, t.clone()))
            .collect()
    }

    /// Like [`register`](Self::register) but as constants (no gradient).
    pub fn register_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gathers gradients for ids `offset..offset + len` into a set with this layout.
    pub fn gradients_from(&self, grads: &Gradients, offset: usize) -> Result<ParamSet> {
        let mut out = self.zeros_like();
        for (i, t) in out.tensors.iter_mut().enumerate() {
            let g = grads.get(offset + i).ok_or_else(|| {
                Error::invalid(format!("no gradient recorded for parameter {}", self.names[i]))
            })?;
            if g.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "gradients_from",
                    left: g.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *t = g.clone();
        }
        Ok(out)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Flattened copy of all values, in set order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat buffer produced by [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::invalid(format!(
                "flat buffer has {} values, parameter set has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "set_flat" });
            }
        }
        Ok(())
    }
}
