use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{missing_cache, Layer};

/// Non-overlapping `size×size` max pooling (stride = size) over NHWC input.
///
/// Ties resolve to the first maximum in row-major window order, and backward
/// routes each gradient to that single position.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidConfig("maxpool2d size must be positive".into()));
        }
        Ok(MaxPool2d { size, cache: None })
    }

    fn pool(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", &[0, 0, 0, 0], s));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % self.size != 0 || w % self.size != 0 {
            return Err(Error::InvalidConfig(format!(
                "maxpool2d: spatial extent {h}×{w} not divisible by {}",
                self.size
            )));
        }
        let (oh, ow) = (h / self.size, w / self.size);
        let xs = x.as_slice();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = usize::MAX;
                        let mut best = 0.0;
                        for ky in 0..self.size {
                            for kx in 0..self.size {
                                let iy = oy * self.size + ky;
                                let ix = ox * self.size + kx;
                                let idx = ((b * h + iy) * w + ix) * c + ch;
                                if best_idx == usize::MAX || xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        Ok((Tensor::from_parts(vec![n, oh, ow, c], out), argmax))
    }
}

impl Layer for MaxPool2d {
    fn kind(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let (y, argmax) = self.pool(x)?;
        self.cache = Some((argmax, x.shape().to_vec()));
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pool(x)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) = self.cache.take().ok_or_else(|| missing_cache("maxpool2d"))?;
        if grad_out.len() != argmax.len() {
            return Err(Error::shape("maxpool2d_backward", &[argmax.len()], grad_out.shape()));
        }
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad_out.as_slice()) {
            dx[idx] += g;
        }
        Ok(Tensor::from_parts(in_shape, dx))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [h, w, c] if h % self.size == 0 && w % self.size == 0 => {
                Ok(vec![h / self.size, w / self.size, *c])
            }
            _ => Err(Error::InvalidConfig(format!(
                "maxpool2d({}) cannot pool per-example shape {input:?}",
                self.size
            ))),
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}
