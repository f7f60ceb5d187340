use super::{Real, Tensor};

/// Trainable weight with its gradient accumulator and Adadelta state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running average of squared gradients.
    pub sq_grad_avg: Tensor<T>,
    /// Running average of squared updates.
    pub sq_update_avg: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(shape.clone()),
            sq_grad_avg: Tensor::zeros(shape.clone()),
            sq_update_avg: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    /// Same storage under a new shape, including optimizer state.
    pub(crate) fn reshaped(self, shape: &[usize]) -> crate::Result<Self> {
        Ok(Self {
            value: self.value.reshape(shape)?,
            grad: self.grad.reshape(shape)?,
            sq_grad_avg: self.sq_grad_avg.reshape(shape)?,
            sq_update_avg: self.sq_update_avg.reshape(shape)?,
        })
    }
}
