use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{
    BatchNorm2d, Conv2d, Dense, Dropout, Flatten, Layer, LayerSpec, MaxPool2d, Mode, ModelConfig,
    Param, Relu,
};

/// Per-example output shape of every layer in `cfg`.
pub(crate) fn shape_trace(cfg: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let mut shape = cfg.input.to_vec();
    let mut trace = Vec::with_capacity(cfg.layers.len());
    for (index, spec) in cfg.layers.iter().enumerate() {
        let wrap = |source: Error| Error::Layer {
            index,
            kind: spec.name(),
            source: Box::new(source),
        };
        shape = match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [h, w, _] = shape[..] else {
                    return Err(wrap(Error::shape("conv2d", &[0, 0, 0], &shape)));
                };
                let pad = padding.unwrap_or(kernel / 2);
                if kernel == 0 || stride == 0 || out_channels == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(wrap(Error::InvalidConfig(format!("bad conv2d geometry {spec:?} for input {shape:?}"))));
                }
                vec![(h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1, out_channels]
            }
            LayerSpec::Maxpool2d { size } => MaxPool2d::new(size)
                .and_then(|p| p.output_shape(&shape))
                .map_err(wrap)?,
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Dense { out_features } => {
                if shape.len() != 1 || out_features == 0 {
                    return Err(wrap(Error::shape("dense", &[0], &shape)));
                }
                vec![out_features]
            }
            LayerSpec::Dropout { p } => {
                Dropout::new(p).map_err(wrap)?;
                shape
            }
            LayerSpec::Batchnorm2d { eps, momentum } => {
                BatchNorm2d::new(*shape.last().unwrap_or(&0), eps, momentum).map_err(wrap)?;
                shape
            }
            LayerSpec::Relu => shape,
        };
        trace.push(shape.clone());
    }
    Ok(trace)
}

/// Instantiates one layer for a per-example input shape.
pub fn build_layer(spec: &LayerSpec, input: &[usize], rng: &mut Rng) -> Result<Box<dyn Layer>> {
    let channels = input.last().copied().unwrap_or(0);
    Ok(match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => Box::new(Conv2d::new(
            channels,
            out_channels,
            kernel,
            stride,
            padding.unwrap_or(kernel / 2),
            rng,
        )?),
        LayerSpec::Batchnorm2d { eps, momentum } => Box::new(BatchNorm2d::new(channels, eps, momentum)?),
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::Maxpool2d { size } => Box::new(MaxPool2d::new(size)?),
        LayerSpec::Dropout { p } => Box::new(Dropout::new(p)?),
        LayerSpec::Flatten => Box::new(Flatten::new()),
        LayerSpec::Dense { out_features } => {
            if input.len() != 1 {
                return Err(Error::shape("dense", &[0], input));
            }
            Box::new(Dense::new(input[0], out_features, rng)?)
        }
    })
}

/// The layer stack plus its configuration.
pub struct Model {
    config: ModelConfig,
    layers: Vec<Box<dyn Layer>>,
    exec: Exec,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kinds: Vec<&str> = self.layers.iter().map(|l| l.kind()).collect();
        f.debug_struct("Model").field("layers", &kinds).field("exec", &self.exec).finish()
    }
}

impl Model {
    /// Validates `config` and initializes every layer from a child stream of
    /// `rng` labelled by layer index.
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        let trace = config.validate()?;
        Self::build(config, &trace, rng)
    }

    /// Builds a model without enforcing the fixed-architecture invariants.
    /// Used for gradient checks on small ad-hoc stacks.
    pub fn unchecked(config: ModelConfig, rng: &Rng) -> Result<Self> {
        let trace = shape_trace(&config)?;
        Self::build(config, &trace, rng)
    }

    fn build(config: ModelConfig, trace: &[Vec<usize>], rng: &Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut input = config.input.to_vec();
        for (i, spec) in config.layers.iter().enumerate() {
            let mut layer_rng = rng.child(&format!("layer{i}"));
            layers.push(build_layer(spec, &input, &mut layer_rng)?);
            input = trace[i].clone();
        }
        let mut model = Model {
            config,
            layers,
            exec: Exec::default(),
        };
        model.set_exec(Exec::default());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
        for layer in &mut self.layers {
            layer.set_exec(exec);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input {
            let mut want = vec![0];
            want.extend_from_slice(&self.config.input);
            return Err(Error::shape("model input", &want, s));
        }
        Ok(())
    }

    fn wrap(&self, index: usize, source: Error) -> Error {
        Error::Layer {
            index,
            kind: self.layers[index].kind(),
            source: Box::new(source),
        }
    }

    /// Runs the stack. Train mode populates every layer's backward cache and
    /// draws dropout masks from `rng`; infer mode clears all caches.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        if mode == Mode::Infer {
            for layer in &mut self.layers {
                layer.clear_cache();
            }
            return self.predict(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            h = self.layers[i]
                .forward_train(&h, rng)
                .and_then(|y| y.check_finite("forward").map(|_| y))
                .map_err(|e| self.wrap(i, e))?;
        }
        Ok(h)
    }

    /// Infer-mode logits `[N, 2]`; a pure function of parameters and input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer
                .infer(&h)
                .and_then(|y| y.check_finite("forward").map(|_| y))
                .map_err(|e| self.wrap(i, e))?;
        }
        Ok(h)
    }

    /// Back-propagates `grad_logits`, leaving parameter gradients on each
    /// [`Param`], and returns the gradient with respect to the input batch.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i]
                .backward(&g)
                .and_then(|y| y.check_finite("backward").map(|_| y))
                .map_err(|e| self.wrap(i, e))?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters named `"{layer}.{kind}.{param}"`, in layer order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.kind();
                l.params()
                    .into_iter()
                    .map(move |p| (format!("{i}.{kind}.{}", p.name), p))
            })
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.kind();
                l.buffers()
                    .into_iter()
                    .map(move |(name, t)| (format!("{i}.{kind}.{name}"), t))
            })
            .collect()
    }

    /// Overwrites a parameter or buffer by its qualified name.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for p in layer.params_mut() {
                if format!("{i}.{kind}.{}", p.name) == name {
                    return replace(&mut p.value, value, name);
                }
            }
            for (bname, b) in layer.buffers_mut() {
                if format!("{i}.{kind}.{bname}") == name {
                    return replace(b, value, name);
                }
            }
        }
        Err(Error::Corrupt(format!("unknown tensor {name}")))
    }

    pub fn has_cache(&self) -> bool {
        self.layers.iter().any(|l| l.has_cache())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

fn replace(slot: &mut Tensor, value: Tensor, name: &str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::Corrupt(format!(
            "tensor {name}: expected shape {:?}, found {:?}",
            slot.shape(),
            value.shape()
        )));
    }
    *slot = value;
    Ok(())
}
