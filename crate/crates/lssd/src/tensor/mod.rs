//! Dense tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is the value type used for parameter storage (32-bit floats).
//! All graph computation happens on a [`Tape`], which promotes values to
//! 64-bit internally so that finite-difference checks hold at tight
//! tolerances.

mod gradcheck;
mod tape;

pub use gradcheck::gradient_check;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 32-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor-new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Adds `delta` (one entry per value) into `grad`, allocating on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = (*g as f64 + d) as f32;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_value_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0f32, 3.0, 4.0][..]));
    }
}
