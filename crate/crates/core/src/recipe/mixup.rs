use crate::error::{Error, Result};
use crate::tensor::{rand_beta, Rng, Scalar, Tensor};

/// A training batch in the form mixup operates on.
#[derive(Clone, Debug, PartialEq)]
pub struct MixBatch<S> {
    /// `[B, ...]` inputs.
    pub x: Tensor<S>,
    /// `[B, N]` target distributions.
    pub q: Tensor<S>,
    /// Optional `[B, T]` word-boundary indicators, mixed like `x`.
    pub boundary: Option<Tensor<S>>,
}

/// The random choices behind one mixup call: partner `perm[i]` and weight `lambda[i]` for sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub lambda: Vec<f64>,
    pub perm: Vec<usize>,
}

impl<S: Scalar> MixBatch<S> {
    pub fn len(&self) -> usize {
        self.x.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mix_rows<S: Scalar>(t: &Tensor<S>, plan: &MixPlan) -> Result<Tensor<S>> {
    let b = plan.perm.len();
    let row = t.len() / b;
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for (i, (&j, &lam)) in plan.perm.iter().zip(&plan.lambda).enumerate() {
        let (l, r) = (S::of(lam), S::of(1.0 - lam));
        let (a, bb) = (&src[i * row..(i + 1) * row], &src[j * row..(j + 1) * row]);
        out.extend(a.iter().zip(bb).map(|(&u, &v)| l * u + r * v));
    }
    Tensor::new(t.shape(), out)
}

/// Applies a fixed plan: `x̂_i = λ_i x_i + (1 − λ_i) x_perm[i]`, likewise for targets and boundaries.
pub fn mixup_with<S: Scalar>(batch: &MixBatch<S>, plan: &MixPlan) -> Result<MixBatch<S>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("mixup needs a non-empty batch"));
    }
    if plan.perm.len() != b || plan.lambda.len() != b || plan.perm.iter().any(|&j| j >= b) {
        return Err(Error::invalid(format!("mix plan does not fit a batch of {b}")));
    }
    if plan.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::invalid("mix weights must lie in [0, 1]"));
    }
    if batch.q.shape().first() != Some(&b) || batch.boundary.as_ref().is_some_and(|m| m.shape().first() != Some(&b)) {
        return Err(Error::shape("mixup", batch.x.shape(), batch.q.shape()));
    }
    Ok(MixBatch {
        x: mix_rows(&batch.x, plan)?,
        q: mix_rows(&batch.q, plan)?,
        boundary: batch.boundary.as_ref().map(|m| mix_rows(m, plan)).transpose()?,
    })
}

/// Draws a partner permutation and λ ~ Beta(α, α) (one per batch, or one per
/// sample when `per_sample`), then mixes.
pub fn mixup_batch<S: Scalar>(
    batch: &MixBatch<S>,
    alpha: f64,
    per_sample: bool,
    rng: &mut Rng,
) -> Result<(MixBatch<S>, MixPlan)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("mixup needs a non-empty batch"));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut perm);
    let lambda = if per_sample {
        (0..b).map(|_| rand_beta(rng, alpha)).collect::<Result<Vec<_>>>()?
    } else {
        vec![rand_beta(rng, alpha)?; b]
    };
    let plan = MixPlan { lambda, perm };
    Ok((mixup_with(batch, &plan)?, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::smoothed_targets;
    use crate::tensor::rand_uniform;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn batch(seed: u64, b: usize) -> MixBatch<f64> {
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(4)).collect();
        MixBatch {
            x: rand_uniform(&mut rng, &[b, 2, 3], 0.0, 1.0).unwrap(),
            q: smoothed_targets(&labels, 4, 0.1).unwrap(),
            boundary: Some(Tensor::from_f64(&[b, 3], &vec![1.0; 3 * b]).unwrap()),
        }
    }

    #[test]
    fn endpoints() {
        let bt = batch(1, 4);
        let perm = vec![2, 3, 0, 1];
        let same = mixup_with(&bt, &MixPlan { lambda: vec![1.0; 4], perm: perm.clone() }).unwrap();
        assert_eq!(same, bt);
        let swapped = mixup_with(&bt, &MixPlan { lambda: vec![0.0; 4], perm: perm.clone() }).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(swapped.x.select(0, i).unwrap(), bt.x.select(0, j).unwrap());
            assert_eq!(swapped.q.select(0, i).unwrap(), bt.q.select(0, j).unwrap());
        }
    }

    #[test]
    fn hand_interpolation() {
        let bt = MixBatch::<f64> {
            x: Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap(),
            q: smoothed_targets(&[1, 2], 3, 0.0).unwrap(),
            boundary: Some(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()),
        };
        let out = mixup_with(&bt, &MixPlan { lambda: vec![0.3; 2], perm: vec![1, 0] }).unwrap();
        let row0 = out.x.select(0, 0).unwrap();
        assert!(row0.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let q0 = out.q.select(0, 0).unwrap();
        assert!((q0.data()[1] - 0.3).abs() < 1e-12 && (q0.data()[2] - 0.7).abs() < 1e-12);
        let m0 = out.boundary.unwrap().select(0, 0).unwrap();
        assert!((m0.data()[0] - 0.3).abs() < 1e-12 && (m0.data()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn errors_and_determinism() {
        let bt = batch(2, 3);
        assert!(mixup_with(&bt, &MixPlan { lambda: vec![0.5; 2], perm: vec![0, 1] }).is_err());
        assert!(mixup_with(&bt, &MixPlan { lambda: vec![1.5; 3], perm: vec![0, 1, 2] }).is_err());
        let empty = MixBatch::<f64> {
            x: Tensor::zeros(&[0, 2]).unwrap_or_else(|_| Tensor::scalar(0.0)),
            q: Tensor::scalar(1.0),
            boundary: None,
        };
        assert!(mixup_batch(&empty, 0.2, false, &mut Rng::new(0)).is_err());
        let a = mixup_batch(&bt, 0.2, false, &mut Rng::new(9)).unwrap();
        let b = mixup_batch(&bt, 0.2, false, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.1.lambda.windows(2).all(|w| w[0] == w[1]));
        let (_, per) = mixup_batch(&bt, 0.2, true, &mut Rng::new(9)).unwrap();
        assert!(per.lambda.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn batch_lambda_mean_over_many_draws() {
        let bt = batch(3, 2);
        let mut rng = Rng::new(77);
        let n = 10_000;
        let mean = (0..n).map(|_| mixup_batch(&bt, 0.2, false, &mut rng).unwrap().1.lambda[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    proptest! {
        #[test]
        fn mixed_values_stay_between_partners(seed in 0u64..500, b in 1usize..6) {
            let bt = batch(seed, b);
            let (out, plan) = mixup_batch(&bt, 0.2, seed % 2 == 0, &mut Rng::new(seed)).unwrap();
            let row = bt.x.len() / b;
            for i in 0..b {
                let j = plan.perm[i];
                for k in 0..row {
                    let (u, v) = (bt.x.data()[i * row + k], bt.x.data()[j * row + k]);
                    let y = out.x.data()[i * row + k];
                    prop_assert!(y >= u.min(v) - 1e-12 && y <= u.max(v) + 1e-12);
                }
                let s: f64 = out.q.select(0, i).unwrap().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
