use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

use super::{missing_cache, Layer, Param};

pub const DEFAULT_EPS: Real = 1e-5;
pub const DEFAULT_MOMENTUM: Real = 0.9;

/// Per-channel batch normalization over every axis except the last.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates as
/// `running = momentum·running + (1 − momentum)·batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    channels: usize,
    eps: Real,
    momentum: Real,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    x_hat: Vec<Real>,
    inv_std: Vec<Real>,
    shape: Vec<usize>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: Real, momentum: Real) -> Result<Self> {
        if channels == 0 || !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "batchnorm2d needs channels > 0, eps > 0, momentum in [0,1) (got {channels}, {eps}, {momentum})"
            )));
        }
        Ok(BatchNorm2d {
            channels,
            eps,
            momentum,
            gamma: Param::new("gamma", Tensor::ones(&[channels])),
            beta: Param::new("beta", Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        match x.shape().last() {
            Some(&c) if c == self.channels && x.shape().len() >= 2 => Ok(x.len() / c),
            _ => Err(Error::shape("batchnorm2d", &[0, 0, 0, self.channels], x.shape())),
        }
    }
}

impl Layer for BatchNorm2d {
    fn kind(&self) -> &'static str {
        "batchnorm2d"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let count = self.check(x)?;
        if count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let c = self.channels;
        let xs = x.as_slice();
        let mut mean = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count as Real);
        let mut var = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count as Real);
        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

        let gamma = self.gamma.value.as_slice();
        let beta = self.beta.value.as_slice();
        let mut x_hat = Vec::with_capacity(xs.len());
        let mut y = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                x_hat.push(h);
                y.push(gamma[ch] * h + beta[ch]);
            }
        }

        let m = self.momentum;
        for ((rm, rv), (&bm, &bv)) in self
            .running_mean
            .as_mut_slice()
            .iter_mut()
            .zip(self.running_var.as_mut_slice().iter_mut())
            .zip(mean.iter().zip(&var))
        {
            *rm = m * *rm + (1.0 - m) * bm;
            *rv = m * *rv + (1.0 - m) * bv;
        }

        self.cache = Some(Cache {
            x_hat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.channels;
        let scale: Vec<Real> = self
            .gamma
            .value
            .as_slice()
            .iter()
            .zip(self.running_var.as_slice())
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let mean = self.running_mean.as_slice();
        let beta = self.beta.value.as_slice();
        let mut y = Vec::with_capacity(x.len());
        for row in x.as_slice().chunks_exact(c) {
            for ch in 0..c {
                y.push((row[ch] - mean[ch]) * scale[ch] + beta[ch]);
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm2d"))?;
        if grad_out.shape() != cache.shape {
            return Err(Error::shape("batchnorm2d_backward", &cache.shape, grad_out.shape()));
        }
        let c = self.channels;
        let count = (cache.x_hat.len() / c) as Real;
        let gs = grad_out.as_slice();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (grow, hrow) in gs.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += grow[ch];
                sum_gx[ch] += grow[ch] * hrow[ch];
            }
        }
        let gamma = self.gamma.value.as_slice();
        let mut dx = Vec::with_capacity(gs.len());
        for (grow, hrow) in gs.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / count;
                dx.push(k * (count * grow[ch] - sum_g[ch] - hrow[ch] * sum_gx[ch]));
            }
        }
        self.gamma.grad = Tensor::from_parts(vec![c], sum_gx);
        self.beta.grad = Tensor::from_parts(vec![c], sum_g);
        Ok(Tensor::from_parts(cache.shape, dx))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.channels) {
            return Err(Error::shape("batchnorm2d", &[self.channels], input));
        }
        Ok(input.to_vec())
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}
