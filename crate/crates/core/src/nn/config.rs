use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::{CHANNELS, PATCH_SIZE};

use super::batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};

const CONV_LAYERS: usize = 8;
const POOL_AFTER_CONV: [usize; 3] = [2, 4, 6];
const FINAL_SPATIAL: usize = 4;

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_pool() -> usize {
    2
}
fn default_eps() -> Real {
    DEFAULT_EPS
}
fn default_momentum() -> Real {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Zero padding per side; `None` means "same" (`kernel / 2`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<usize>,
    },
    Batchnorm2d {
        #[serde(default = "default_eps")]
        eps: Real,
        #[serde(default = "default_momentum")]
        momentum: Real,
    },
    Relu,
    Maxpool2d {
        #[serde(default = "default_pool")]
        size: usize,
    },
    Dropout {
        p: Real,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: None,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::Batchnorm2d {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Batchnorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Declarative description of the classifier.
///
/// Whatever the widths, a valid configuration has eight convolutions, a
/// max-pool after the second, fourth and sixth only, a 4×4 feature map
/// entering the head, and two output logits for a 32×32×3 patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_widths([32, 32, 64, 64, 128, 128, 128, 128], 0.5)
    }
}

impl ModelConfig {
    /// conv→batchnorm→relu blocks with the given conv widths, pooling after
    /// blocks 2, 4 and 6, then flatten→dropout→dense(2).
    pub fn with_widths(widths: [usize; CONV_LAYERS], dropout: Real) -> Self {
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::conv(w));
            layers.push(LayerSpec::batchnorm());
            layers.push(LayerSpec::Relu);
            if POOL_AFTER_CONV.contains(&(i + 1)) {
                layers.push(LayerSpec::Maxpool2d { size: 2 });
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dropout { p: dropout });
        layers.push(LayerSpec::Dense { out_features: 2 });
        ModelConfig {
            input: [PATCH_SIZE, PATCH_SIZE, CHANNELS],
            classes: 2,
            layers,
        }
    }

    /// Narrow variant of the default stack for fast experiments and tests.
    pub fn compact() -> Self {
        Self::with_widths([4, 4, 8, 8, 8, 8, 8, 8], 0.5)
    }

    /// Two channels per conv; enough to exercise whole-image geometry.
    pub fn tiny() -> Self {
        Self::with_widths([2; CONV_LAYERS], 0.5)
    }

    /// Checks the structural invariants and returns the per-example shape
    /// after every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input != [PATCH_SIZE, PATCH_SIZE, CHANNELS] {
            return Err(Error::InvalidConfig(format!(
                "input must be {PATCH_SIZE}×{PATCH_SIZE}×{CHANNELS}, got {:?}",
                self.input
            )));
        }
        if self.classes != 2 {
            return Err(Error::InvalidConfig(format!("classes must be 2, got {}", self.classes)));
        }
        let mut convs = 0;
        let mut last_was_block_end: Option<usize> = None;
        for spec in &self.layers {
            match spec {
                LayerSpec::Conv2d { .. } => {
                    convs += 1;
                    last_was_block_end = Some(convs);
                }
                LayerSpec::Maxpool2d { size } => {
                    if *size != 2 {
                        return Err(Error::InvalidConfig(format!("max-pool must be 2×2, got {size}")));
                    }
                    match last_was_block_end {
                        Some(c) if POOL_AFTER_CONV.contains(&c) => last_was_block_end = None,
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "max-pool may only follow conv layers {POOL_AFTER_CONV:?} (found after conv {convs})"
                            )))
                        }
                    }
                }
                _ => {}
            }
        }
        if convs != CONV_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "exactly {CONV_LAYERS} conv layers required, found {convs}"
            )));
        }
        let pools = self
            .layers
            .iter()
            .filter(|s| matches!(s, LayerSpec::Maxpool2d { .. }))
            .count();
        if pools != POOL_AFTER_CONV.len() {
            return Err(Error::InvalidConfig(format!(
                "expected a max-pool after each of conv layers {POOL_AFTER_CONV:?}, found {pools} pools"
            )));
        }
        let trace = super::model::shape_trace(self)?;
        let flatten_in = self
            .layers
            .iter()
            .position(|s| matches!(s, LayerSpec::Flatten))
            .map(|i| if i == 0 { self.input.to_vec() } else { trace[i - 1].clone() });
        match flatten_in.as_deref() {
            Some([FINAL_SPATIAL, FINAL_SPATIAL, _]) => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "feature map entering the head must be {FINAL_SPATIAL}×{FINAL_SPATIAL}, got {other:?}"
                )))
            }
        }
        if trace.last().map(Vec::as_slice) != Some(&[self.classes][..]) {
            return Err(Error::InvalidConfig(format!(
                "model must end in [{}] logits, got {:?}",
                self.classes,
                trace.last()
            )));
        }
        Ok(trace)
    }
}
