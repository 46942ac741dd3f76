use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − label) / N` with respect to the logits.
///
/// Uses the log-sum-exp form, so large logits do not overflow.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<(Real, Tensor)> {
    let (n, k) = match logits.shape() {
        [n, k] if *n > 0 && *k > 0 => (*n, *k),
        s => return Err(Error::shape("softmax_cross_entropy", &[0, 2], s)),
    };
    if labels.shape() != logits.shape() {
        return Err(Error::shape("softmax_cross_entropy labels", logits.shape(), labels.shape()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    let inv_n = 1.0 / n as Real;
    for (row, (z, y)) in logits
        .as_slice()
        .chunks_exact(k)
        .zip(labels.as_slice().chunks_exact(k))
        .enumerate()
    {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::MalformedLabel { row });
        }
        let truth = y.iter().position(|&v| v == 1.0).unwrap();
        let max = z.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let sum_exp: Real = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        loss += log_sum - z[truth];
        for (j, &v) in z.iter().enumerate() {
            let p = (v - log_sum).exp();
            grad.push((p - y[j]) * inv_n);
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::from_parts(vec![n, k], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((loss - (2.0 as Real).ln()).abs() < 1e-12);
        assert_eq!(grad.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, grad) =
            softmax_cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.as_slice().iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_labels() {
        let z = t(&[2, 2], &[0.0; 4]);
        for bad in [[1.0, 0.0, 1.0, 1.0], [1.0, 0.0, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]] {
            assert!(matches!(
                softmax_cross_entropy(&z, &t(&[2, 2], &bad)),
                Err(Error::MalformedLabel { row: 1 })
            ));
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let z = t(&[3, 2], &[3.0, -2.0, 0.1, 0.2, -50.0, 50.0]);
        let y = t(&[3, 2], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(softmax_cross_entropy(&z, &y).unwrap().0 >= 0.0);
    }
}
