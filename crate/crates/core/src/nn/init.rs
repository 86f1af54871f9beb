//! Parameter initializers.

use crate::error::{Error, Result};
use crate::tensor::{rand_uniform, Rng, Scalar, Tensor};

/// Half-width `a = √(2 / (d_in + d_out))` of the dense uniform initializer.
pub fn glorot_bound(d_in: usize, d_out: usize) -> Result<f64> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::invalid(format!(
            "fan counts must be positive, got d_in={d_in}, d_out={d_out}"
        )));
    }
    Ok((2.0 / (d_in + d_out) as f64).sqrt())
}

/// Uniform on `[-a, a]` with `a` from [`glorot_bound`].
///
/// For convolutions pass fan counts that include the kernel volume,
/// i.e. `C_in·k` and `C_out·k`.
pub fn init_dense_uniform<S: Scalar>(rng: &mut Rng, d_in: usize, d_out: usize, shape: &[usize]) -> Result<Tensor<S>> {
    let a = glorot_bound(d_in, d_out)?;
    rand_uniform(rng, shape, -a, a)
}

/// Uniform on `[-bound, bound)`.
pub fn init_symmetric<S: Scalar>(rng: &mut Rng, bound: f64, shape: &[usize]) -> Result<Tensor<S>> {
    rand_uniform(rng, shape, -bound, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_examples() {
        assert_eq!(glorot_bound(1, 1).unwrap(), 1.0);
        assert!((glorot_bound(49, 49).unwrap() - 0.142_857_142_857).abs() < 1e-9);
        assert!(glorot_bound(0, 3).is_err());
    }

    #[test]
    fn draws_respect_bound() {
        let t: Tensor<f32> = init_dense_uniform(&mut Rng::new(1), 49, 49, &[49, 49]).unwrap();
        let a = glorot_bound(49, 49).unwrap() as f32;
        assert!(t.max_abs() <= a);
        let unit: Tensor<f64> = init_dense_uniform(&mut Rng::new(1), 1, 1, &[1000]).unwrap();
        assert!(unit.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
