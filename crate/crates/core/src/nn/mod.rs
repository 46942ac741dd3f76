//! Convolutional classifier layers with hand-written backward passes.
//!
//! Activations are NHWC: `[batch, height, width, channels]`. Every layer
//! implements [`Layer`]; a [`Model`] is an ordered stack of them built from a
//! [`ModelConfig`].
//!
//! Backward passes overwrite (not accumulate) the gradient stored next to
//! each parameter, so exactly one `backward` must follow each train-mode
//! `forward`.

mod activation;
mod batchnorm;
mod config;
mod conv;
mod dense;
mod dropout;
mod model;
mod pool;

pub use activation::Relu;
pub use batchnorm::BatchNorm2d;
pub use config::{LayerSpec, ModelConfig};
pub use conv::Conv2d;
pub use dense::{Dense, Flatten};
pub use dropout::Dropout;
pub use model::{build_layer, Model};
pub(crate) use model::shape_trace;
pub use pool::MaxPool2d;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// A learnable tensor and the gradient from the most recent backward pass.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: &'static str, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name, value, grad }
    }
}

pub trait Layer: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Train-mode forward; populates the backward cache.
    fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor>;

    /// Infer-mode forward. Pure: reads parameters and running statistics only.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;

    /// Consumes the cache from the last `forward_train`, writes parameter
    /// gradients and returns the gradient with respect to the input.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn clear_cache(&mut self);

    fn has_cache(&self) -> bool;

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        match mode {
            Mode::Train => self.forward_train(x, rng),
            Mode::Infer => {
                self.clear_cache();
                self.infer(x)
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Non-learnable state that must be persisted (batch-norm running stats).
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }

    fn set_exec(&mut self, _exec: Exec) {}
}

pub(crate) fn missing_cache(kind: &'static str) -> crate::Error {
    crate::Error::InvalidConfig(format!("{kind}: backward called without a train-mode forward"))
}
