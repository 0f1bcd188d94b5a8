use super::{Result, Tensor, TensorError};

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `scale * delta` into the accumulated gradient.
    pub fn accumulate(&mut self, delta: &Tensor, scale: f32) -> Result<()> {
        if delta.shape() != self.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                left: self.value.shape().to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += scale * d;
        }
        Ok(())
    }
}
