use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{missing_cache, Layer};

/// `max(0, x)`. The subgradient at 0 is taken as 0.
#[derive(Debug, Default, Clone)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        self.mask = Some(x.as_slice().iter().map(|&v| v > 0.0).collect());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_parts(
            x.shape().to_vec(),
            x.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        ))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("relu_backward", &[mask.len()], grad_out.shape()));
        }
        let data = grad_out
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Ok(Tensor::from_parts(grad_out.shape().to_vec(), data))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }

    fn has_cache(&self) -> bool {
        self.mask.is_some()
    }
}
