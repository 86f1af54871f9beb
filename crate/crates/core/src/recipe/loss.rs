use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smoothed target: `ε/N` off the label, `1 − (N−1)ε/N` on it.
pub fn label_smooth<S: Scalar>(y: usize, n: usize, eps: f64) -> Result<Tensor<S>> {
    if y >= n {
        return Err(Error::invalid(format!("label {y} out of range for {n} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("smoothing epsilon must lie in [0, 1), got {eps}")));
    }
    let off = eps / n as f64;
    let mut q = vec![off; n];
    q[y] = 1.0 - (n - 1) as f64 * off;
    Tensor::from_f64(&[n], &q)
}

/// `[B, N]` targets for a batch of labels; `eps = 0` gives one-hot rows.
pub fn smoothed_targets<S: Scalar>(labels: &[usize], n: usize, eps: f64) -> Result<Tensor<S>> {
    let rows = labels
        .iter()
        .map(|&y| label_smooth::<S>(y, n, eps))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows.iter().collect::<Vec<_>>(), 0)
}

/// `−Σ q_i log softmax(logits)_i`, stabilized by subtracting the max logit.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, q: &Tensor<S>) -> Result<S> {
    if logits.rank() != 1 || logits.shape() != q.shape() {
        return Err(Error::shape("cross_entropy", logits.shape(), q.shape()));
    }
    let total: f64 = q.data().iter().map(|v| v.f64()).sum();
    if q.data().iter().any(|v| v.f64() < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("target must be a distribution (sum {total})")));
    }
    let m = logits.data().iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let lse = m + logits.data().iter().map(|&v| (v - m).exp()).sum::<S>().ln();
    Ok(logits.data().iter().zip(q.data()).map(|(&l, &qi)| -qi * (l - lse)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smoothing_values() {
        let q: Tensor<f64> = label_smooth(0, 10, 0.1).unwrap();
        assert!((q.data()[0] - 0.91).abs() < 1e-9);
        assert!(q.data()[1..].iter().all(|&v| (v - 0.01).abs() < 1e-9));
        let q: Tensor<f64> = label_smooth(7, 500, 0.1).unwrap();
        assert!((q.data()[7] - 0.9002).abs() < 1e-9);
        assert!((q.data()[0] - 0.0002).abs() < 1e-9);
        let q: Tensor<f64> = label_smooth(2, 4, 0.0).unwrap();
        assert_eq!(q.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(label_smooth::<f64>(4, 4, 0.1).is_err());
        assert!(label_smooth::<f64>(0, 4, 1.0).is_err());
    }

    #[test]
    fn smoothing_keeps_the_label_as_argmax() {
        for n in [2, 10, 500] {
            for y in [0, n - 1] {
                let q: Tensor<f64> = label_smooth(y, n, 0.1).unwrap();
                assert_eq!(q.clone().reshape(&[1, n]).unwrap().argmax_rows(), vec![y]);
                assert!((q.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_values() {
        let zero = Tensor::<f64>::zeros(&[2]).unwrap();
        let one_hot = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        assert!((cross_entropy(&zero, &one_hot).unwrap() - 2f64.ln()).abs() < 1e-9);
        for n in [3, 10, 500] {
            let l = Tensor::<f64>::full(&[n], 1.7).unwrap();
            let q: Tensor<f64> = label_smooth(1, n, 0.0).unwrap();
            assert!((cross_entropy(&l, &q).unwrap() - (n as f64).ln()).abs() < 1e-9);
        }
        // With q = p the loss is the entropy of p.
        let l = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let z: f64 = l.data().iter().map(|v: &f64| v.exp()).sum();
        let p: Vec<f64> = l.data().iter().map(|v: &f64| v.exp() / z).collect();
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let q = Tensor::from_f64(&[3], &p).unwrap();
        assert!((cross_entropy(&l, &q).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_malformed_targets() {
        let l = Tensor::<f64>::zeros(&[2]).unwrap();
        assert!(cross_entropy(&l, &Tensor::from_f64(&[2], &[0.7, 0.7]).unwrap()).is_err());
        assert!(cross_entropy(&l, &Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap()).is_err());
        assert!(cross_entropy(&l, &Tensor::from_f64(&[3], &[1.0, 0.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let l = Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap();
        let q = Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap();
        assert!((cross_entropy(&l, &q).unwrap() - 1000.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn smoothed_rows_are_positive_distributions(n in 2usize..600, y_frac in 0.0f64..1.0, eps in 1e-3f64..0.99) {
            let y = ((n as f64 * y_frac) as usize).min(n - 1);
            let q: Tensor<f64> = label_smooth(y, n, eps).unwrap();
            prop_assert!((q.sum() - 1.0).abs() < 1e-6);
            prop_assert!(q.data().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn cross_entropy_nonnegative_and_falls_as_correct_logit_grows(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..8),
            step in 0.1f64..3.0,
        ) {
            let n = logits.len();
            let q: Tensor<f64> = label_smooth(0, n, 0.0).unwrap();
            let l = Tensor::from_f64(&[n], &logits).unwrap();
            let mut bumped = logits.clone();
            bumped[0] += step;
            let lb = Tensor::from_f64(&[n], &bumped).unwrap();
            let a = cross_entropy(&l, &q).unwrap();
            let b = cross_entropy(&lb, &q).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!(b < a);
        }
    }
}
