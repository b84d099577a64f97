use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    grad_ready: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            grad_ready: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// True once a backward pass has written into `grad` since the last
    /// [`Parameter::zero_grad`].
    pub fn has_grad(&self) -> bool {
        self.grad_ready
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        self.grad_ready = false;
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::shape("accumulate_grad", self.value.shape(), g.shape()));
        }
        self.grad
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b);
        self.grad_ready = true;
        Ok(())
    }

    /// Marks the gradient as populated even when it is all zeros (the
    /// parameter was not reachable from the loss).
    pub fn mark_grad_ready(&mut self) {
        self.grad_ready = true;
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter::new(self.name.clone(), self.value.cast())
    }
}
