use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

use super::{missing_cache, Layer};

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1−p)`; infer mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: Real,
    mask: Option<Vec<Real>>,
}

impl Dropout {
    pub fn new(p: Real) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability must be in [0,1), got {p}")));
        }
        Ok(Dropout { p, mask: None })
    }

    pub fn p(&self) -> Real {
        self.p
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mask: Vec<Real> = if self.p == 0.0 {
            vec![1.0; x.len()]
        } else {
            let keep = 1.0 / (1.0 - self.p);
            (0..x.len())
                .map(|_| if (rng.next_f64() as Real) < self.p { 0.0 } else { keep })
                .collect()
        };
        let y = x.as_slice().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropout"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("dropout_backward", &[mask.len()], grad_out.shape()));
        }
        let dx = grad_out.as_slice().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Ok(Tensor::from_parts(grad_out.shape().to_vec(), dx))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let x = Rng::new(1).normal_tensor(&[3, 7], 0.0, 1.0).unwrap();
        let mut d = Dropout::new(0.0).unwrap();
        assert!(d.forward_train(&x, &mut Rng::new(2)).unwrap().bit_eq(&x));
        assert!(d.infer(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn infer_is_identity_for_any_rate() {
        let x = Rng::new(1).normal_tensor(&[3, 7], 0.0, 1.0).unwrap();
        for p in [0.1, 0.5, 0.9] {
            assert!(Dropout::new(p).unwrap().infer(&x).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn half_rate_preserves_mean() {
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward_train(&Tensor::ones(&[100_000]), &mut Rng::new(42)).unwrap();
        assert!((y.mean() - 1.0).abs() < 0.02, "mean {}", y.mean());
        assert!(y.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_reuses_mask() {
        let mut d = Dropout::new(0.5).unwrap();
        let x = Tensor::ones(&[64]);
        let y = d.forward_train(&x, &mut Rng::new(3)).unwrap();
        let g = d.backward(&Tensor::ones(&[64])).unwrap();
        assert!(g.bit_eq(&y));
    }

    #[test]
    fn invalid_rates() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }
}
