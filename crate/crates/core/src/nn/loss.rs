use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::from_parts(logits.dims().to_vec(), out))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, and its
/// gradient `(softmax − onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy<T: Float>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.chunks_mut(k)).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[label];
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            *gj = (p - target) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_parts(vec![n, k], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_saturated() {
        let l = Tensor::<f64>::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let l = Tensor::<f64>::new(vec![1, 2], vec![0.0, 50.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&l, &[1]).unwrap();
        assert!(loss < 1e-9 && loss >= 0.0);
        assert!(g.is_finite());
    }

    #[test]
    fn rejects_bad_labels() {
        let l = Tensor::<f64>::zeros(&[2, 2]);
        assert!(softmax_cross_entropy(&l, &[0, 2]).is_err());
        assert!(softmax_cross_entropy(&l, &[0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        let p = softmax(&l).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
