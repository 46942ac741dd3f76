use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{linalg, Real, Tensor};

use super::{missing_cache, Layer, Param};

/// Collapses every axis after the batch axis.
#[derive(Debug, Default, Clone)]
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let n = *x.shape().first().ok_or_else(|| Error::shape("flatten", &[0, 0], x.shape()))?;
        let width = x.shape()[1..].iter().product();
        x.reshape(&[n, width])
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.in_shape.take().ok_or_else(|| missing_cache("flatten"))?;
        grad_out.reshape(&shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input.iter().product()])
    }

    fn clear_cache(&mut self) {
        self.in_shape = None;
    }

    fn has_cache(&self) -> bool {
        self.in_shape.is_some()
    }
}

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    in_features: usize,
    out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    /// He-initialized: weights ~ N(0, 2 / in_features), zero bias.
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidConfig(format!(
                "dense needs positive widths, got {in_features}→{out_features}"
            )));
        }
        let std = (2.0 / in_features as Real).sqrt();
        let weight = rng.normal_tensor(&[in_features, out_features], 0.0, std)?;
        Ok(Dense {
            in_features,
            out_features,
            weight: Param::new("weight", weight),
            bias: Param::new("bias", Tensor::zeros(&[out_features])),
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [n, d] if *d == self.in_features => Ok(*n),
            s => Err(Error::shape("dense", &[0, self.in_features], s)),
        }
    }
}

impl Layer for Dense {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check(x)?;
        let mut y = self.bias.value.broadcast_to(&[n, self.out_features])?.into_vec();
        linalg::matmul_acc(
            x.as_slice(),
            self.weight.value.as_slice(),
            &mut y,
            n,
            self.in_features,
            self.out_features,
        );
        Ok(Tensor::from_parts(vec![n, self.out_features], y))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("dense"))?;
        let n = x.shape()[0];
        if grad_out.shape() != [n, self.out_features] {
            return Err(Error::shape("dense_backward", &[n, self.out_features], grad_out.shape()));
        }
        let (d, k) = (self.in_features, self.out_features);
        let mut dw = vec![0.0; d * k];
        linalg::matmul_at_b_acc(x.as_slice(), grad_out.as_slice(), &mut dw, n, d, k);
        let mut db = vec![0.0; k];
        for row in grad_out.as_slice().chunks_exact(k) {
            db.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
        }
        let mut dx = vec![0.0; n * d];
        linalg::matmul_a_bt(grad_out.as_slice(), self.weight.value.as_slice(), &mut dx, n, k, d);
        self.weight.grad = Tensor::from_parts(vec![d, k], dw);
        self.bias.grad = Tensor::from_parts(vec![k], db);
        Ok(Tensor::from_parts(vec![n, d], dx))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.in_features] {
            return Err(Error::shape("dense", &[self.in_features], input));
        }
        Ok(vec![self.out_features])
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }

    fn has_cache(&self) -> bool {
        self.input.is_some()
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let mut d = Dense::new(2, 2, &mut Rng::new(0)).unwrap();
        d.weight.value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(d.infer(&x).unwrap().as_slice(), &[1.0, 2.0]);
        d.bias.value = Tensor::ones(&[2]);
        assert_eq!(d.infer(&x).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn width_mismatch() {
        let d = Dense::new(3, 2, &mut Rng::new(0)).unwrap();
        assert!(d.infer(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut f = Flatten::new();
        let x = Rng::new(0).normal_tensor(&[2, 4, 4, 3], 0.0, 1.0).unwrap();
        let y = f.forward_train(&x, &mut Rng::new(0)).unwrap();
        assert_eq!(y.shape(), &[2, 48]);
        assert!(f.backward(&y).unwrap().bit_eq(&x));
    }
}
