//! Dense row-major tensors and the seeded randomness every stochastic step draws from.
//!
//! Everything numeric in the crate bottoms out here. A [`Tensor`] is a shape
//! plus a flat row-major buffer; it is generic over a [`Scalar`] so the same
//! kernels run in `f32` for training and `f64` for gradient checking.

mod io;
mod rng;
mod scalar;

pub use io::{read_lkt1, write_lkt1, DType};
pub use rng::{rand_beta, rand_uniform, Rng};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatView};

use crate::error::{Error, Result};

/// Reduction applied by [`Tensor::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Dense N-dimensional array stored in row-major order.
///
/// Invariants: every extent is positive, `shape.iter().product() == data.len()`,
/// and values entering through [`Tensor::new`] or a file are finite.
/// Arithmetic inside the crate does not re-check finiteness; the training
/// loop checks the loss instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "extent of axis {axis} is zero in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::one())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        Ok(t)
    }

    /// Builds a tensor from `f64` values, converting to `S`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<S> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> Result<S> {
        Ok(self.data[self.offset(index)?])
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::invalid(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i))
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatView::row_major(&self.data, m, k),
            MatView::row_major(&other.data, k, n),
            S::zero(),
            &mut out,
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!("t() on rank-{} tensor", self.rank())));
        }
        self.permute(&[1, 0])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permutation {axes:?} invalid for rank {rank}"
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        for_each_index(&out_shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
        });
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Reduces over the given axes, removing them from the shape.
    pub fn reduce(&self, axes: &[usize], kind: Reduce) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid(format!(
                    "axis {a} out of range for rank {rank}"
                )));
            }
            if std::mem::replace(&mut reduced[a], true) {
                return Err(Error::invalid(format!("axis {a} listed twice")));
            }
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| self.shape[a])
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| self.shape[a]).product();

        // Map each input position to its output slot via kept-axis strides.
        let out_strides = strides(&out_shape);
        let mut kept_stride = vec![0usize; rank];
        let mut k = 0;
        for a in 0..rank {
            if !reduced[a] {
                kept_stride[a] = out_strides[k];
                k += 1;
            }
        }
        let init = match kind {
            Reduce::Max => S::neg_infinity(),
            _ => S::zero(),
        };
        let mut out = vec![init; out_len];
        let mut flat = 0;
        for_each_index(&self.shape, |idx| {
            let o: usize = idx.iter().zip(&kept_stride).map(|(i, s)| i * s).sum();
            let v = self.data[flat];
            flat += 1;
            match kind {
                Reduce::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
                _ => out[o] += v,
            }
        });
        if kind == Reduce::Mean {
            let c = S::of(count as f64);
            out.iter_mut().for_each(|v| *v /= c);
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} for rank {rank}")));
        }
        for p in parts {
            let same = p.rank() == rank
                && (0..rank).all(|a| a == axis || p.shape[a] == first.shape[a]);
            if !same {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Slice `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Self> {
        if axis >= self.rank() || index >= self.shape[axis] {
            return Err(Error::invalid(format!(
                "select({axis}, {index}) on shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            out.extend_from_slice(&self.data[start..start + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        if axis > first.rank() {
            return Err(Error::invalid(format!(
                "stack axis {axis} for rank {}",
                first.rank()
            )));
        }
        let mut expanded_shape = first.shape.clone();
        expanded_shape.insert(axis, 1);
        let expanded = parts
            .iter()
            .map(|p| {
                if p.shape != first.shape {
                    return Err(Error::shape("stack", &first.shape, &p.shape));
                }
                Ok(Tensor::from_parts(expanded_shape.clone(), p.data.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Self> = expanded.iter().collect();
        Self::concat(&refs, axis)
    }

    /// Index of the maximum along the last axis, per leading row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let n = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(n)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Calls `f` with every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        f(&idx);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(Tensor::eye(2).unwrap().matmul(&b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
        let z = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        let any = t(&[2, 3], &[1., -2., 3., 4., 5., 6.]);
        assert!(z.matmul(&any).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn reduce_examples() {
        let x = t(&[2], &[1., 3.]);
        assert_eq!(x.reduce(&[0], Reduce::Mean).unwrap().item().unwrap(), 2.0);
        let ones = Tensor::<f64>::ones(&[2, 3]).unwrap();
        assert_eq!(ones.reduce(&[0, 1], Reduce::Sum).unwrap().item().unwrap(), 6.0);
        let m = t(&[3], &[-1., 4., 2.]);
        assert_eq!(m.reduce(&[0], Reduce::Max).unwrap().item().unwrap(), 4.0);
        assert!(m.reduce(&[1], Reduce::Sum).is_err());
    }

    #[test]
    fn reduce_keeps_unreduced_axes_in_order() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.reduce(&[0], Reduce::Sum).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(x.reduce(&[1], Reduce::Max).unwrap().data(), &[3., 6.]);
    }

    #[test]
    fn concat_select_stack_agree() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[9., 8.]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        assert_eq!(c.select(1, 2).unwrap().data(), &[9., 8.]);
        let s = Tensor::stack(&[&a, &a], 1).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.select(1, 1).unwrap(), a);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let scale = a.max_abs().max(b.max_abs()).max(1e-12);
        a.sub(b).unwrap().max_abs() / scale
    }

    proptest! {
        #[test]
        fn matmul_is_associative_f64(
            a in small_matrix(3, 4), b in small_matrix(4, 5), c in small_matrix(5, 2)
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(rel_err(&left, &right) < 1e-10);
        }

        #[test]
        fn matmul_is_associative_f32(
            a in small_matrix(3, 4), b in small_matrix(4, 5), c in small_matrix(5, 2)
        ) {
            let (a, b, c) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap().cast::<f64>();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().cast::<f64>();
            prop_assert!(rel_err(&left, &right) < 1e-4);
        }

        #[test]
        fn mean_times_count_is_sum(x in small_matrix(4, 6), axis in 0usize..2) {
            let mean = x.reduce(&[axis], Reduce::Mean).unwrap();
            let sum = x.reduce(&[axis], Reduce::Sum).unwrap();
            let count = x.shape()[axis] as f64;
            for (m, s) in mean.data().iter().zip(sum.data()) {
                prop_assert!((m * count - s).abs() <= 1e-6 * s.abs().max(1.0));
            }
        }

        #[test]
        fn permute_round_trips(x in small_matrix(3, 5)) {
            let x = x.reshape(&[3, 5, 1]).unwrap();
            let p = x.permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
        }
    }
}
