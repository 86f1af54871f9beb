//! Forward and backward kernels on flat buffers.
//!
//! Convolutions are handled uniformly as 3D: a 2D convolution is a 3D one
//! with a temporal extent and kernel of 1. Images are processed in chunks so
//! the lowered (im2col) matrix of a chunk feeds one matrix product; chunk
//! boundaries depend only on shapes, never on the thread count, so every
//! reduction happens in a fixed order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Scalar};

/// Kernel, stride and padding per spatial axis, ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        Ok(ConvGeom { kernel, stride, pad })
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents, or an error when the padded input is smaller than the kernel.
    pub fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return Err(Error::invalid(format!(
                    "input extent {} (padded {padded}) smaller than kernel {} on axis {a}",
                    dims[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Number of images lowered together; a function of the output size only.
fn chunk_images(n: usize, positions: usize) -> usize {
    (4096 / positions.max(1)).clamp(1, n.max(1))
}

struct Lowering {
    cin: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    geom: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.cin * self.geom.volume()
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn image_len(&self) -> usize {
        self.cin * self.in_dims.iter().product::<usize>()
    }

    /// `(output index, input index)` pairs along axis `a` for kernel offset `k`, skipping padding.
    fn axis_taps(&self, a: usize, k: usize) -> Vec<(usize, usize)> {
        (0..self.out_dims[a])
            .filter_map(|o| {
                let p = (o * self.geom.stride[a] + k).checked_sub(self.geom.pad[a])?;
                (p < self.in_dims[a]).then_some((o, p))
            })
            .collect()
    }

    /// Visits (lowered row, position, source offset) for every in-bounds tap,
    /// in row-major order of (row, position).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kt, kh, kw] = self.geom.kernel;
        let [_, oh, ow] = self.out_dims;
        let [it, ih, iw] = self.in_dims;
        let taps = |a: usize, n: usize| (0..n).map(|k| self.axis_taps(a, k)).collect::<Vec<_>>();
        let (tt, hh, ww) = (taps(0, kt), taps(1, kh), taps(2, kw));
        let mut row = 0;
        for c in 0..self.cin {
            for t_taps in &tt {
                for h_taps in &hh {
                    for w_taps in &ww {
                        for &(ot, st) in t_taps {
                            for &(o_h, sh) in h_taps {
                                let pos = (ot * oh + o_h) * ow;
                                let src = ((c * it + st) * ih + sh) * iw;
                                for &(o_w, sw) in w_taps {
                                    f(row, pos + o_w, src + sw);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Lowers `images` into a `rows × (count·positions)` matrix.
    fn im2col<S: Scalar>(&self, images: &[S], count: usize) -> Vec<S> {
        let p = self.positions();
        let width = count * p;
        let mut cols = vec![S::zero(); self.rows() * width];
        let len = self.image_len();
        for i in 0..count {
            let img = &images[i * len..(i + 1) * len];
            self.for_each_tap(|row, pos, src| cols[row * width + i * p + pos] = img[src]);
        }
        cols
    }

    /// Scatter-adds a lowered gradient back into image layout.
    fn col2im<S: Scalar>(&self, cols: &[S], count: usize, images: &mut [S]) {
        let p = self.positions();
        let width = count * p;
        let len = self.image_len();
        for i in 0..count {
            let img = &mut images[i * len..(i + 1) * len];
            self.for_each_tap(|row, pos, src| img[src] += cols[row * width + i * p + pos]);
        }
    }
}

/// Shape bookkeeping shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvShape {
    fn lowering(&self) -> Lowering {
        Lowering {
            cin: self.cin,
            in_dims: self.in_dims,
            out_dims: self.out_dims,
            geom: self.geom,
        }
    }
}

/// Cross-correlation `y = w ⋆ x + b` over `n` images.
pub fn conv_forward<S: Scalar>(cs: &ConvShape, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let low = cs.lowering();
    let p = low.positions();
    let k = low.rows();
    let in_len = low.image_len();
    let out_len = cs.cout * p;
    let chunk = chunk_images(cs.n, p);
    let mut out = vec![S::zero(); cs.n * out_len];
    out.par_chunks_mut(chunk * out_len)
        .zip(x.par_chunks(chunk * in_len))
        .for_each(|(out_c, x_c)| {
            let count = x_c.len() / in_len;
            let cols = low.im2col(x_c, count);
            let width = count * p;
            let mut prod = vec![S::zero(); cs.cout * width];
            gemm(
                S::one(),
                MatView::row_major(w, cs.cout, k),
                MatView::row_major(&cols, k, width),
                S::zero(),
                &mut prod,
            );
            for i in 0..count {
                for co in 0..cs.cout {
                    let bias = b.map_or(S::zero(), |b| b[co]);
                    let dst = &mut out_c[i * out_len + co * p..i * out_len + (co + 1) * p];
                    let src = &prod[co * width + i * p..co * width + (i + 1) * p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        });
    out
}

/// `out[i][j] = a_i · b_j` for rows of length `len`. The weight gradient has a
/// tiny output and a long reduction, a shape blocked GEMM handles poorly.
fn row_dots<S: Scalar>(a: &[S], b: &[S], len: usize) -> Vec<S> {
    const LANES: usize = 8;
    let split = len - len % LANES;
    let mut out = Vec::with_capacity((a.len() / len) * (b.len() / len));
    for ra in a.chunks_exact(len) {
        for rb in b.chunks_exact(len) {
            let mut acc = [S::zero(); LANES];
            for (ca, cb) in ra[..split].chunks_exact(LANES).zip(rb[..split].chunks_exact(LANES)) {
                for l in 0..LANES {
                    acc[l] += ca[l] * cb[l];
                }
            }
            let tail: S = ra[split..].iter().zip(&rb[split..]).map(|(&x, &y)| x * y).sum();
            out.push(acc.iter().copied().sum::<S>() + tail);
        }
    }
    out
}

/// Gradients of [`conv_forward`]: returns (dx, dw, db); dx only when `need_dx`.
pub fn conv_backward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    w: &[S],
    dy: &[S],
    need_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let low = cs.lowering();
    let p = low.positions();
    let k = low.rows();
    let in_len = low.image_len();
    let out_len = cs.cout * p;
    let chunk = chunk_images(cs.n, p);
    let mut dx = vec![S::zero(); cs.n * in_len];
    let partials: Vec<Vec<S>> = dx
        .par_chunks_mut(chunk * in_len)
        .zip(x.par_chunks(chunk * in_len))
        .zip(dy.par_chunks(chunk * out_len))
        .map(|((dx_c, x_c), dy_c)| {
            let count = x_c.len() / in_len;
            let width = count * p;
            // Gather dy into cout × (count·p).
            let mut g = vec![S::zero(); cs.cout * width];
            for i in 0..count {
                for co in 0..cs.cout {
                    g[co * width + i * p..co * width + (i + 1) * p]
                        .copy_from_slice(&dy_c[i * out_len + co * p..i * out_len + (co + 1) * p]);
                }
            }
            let cols = low.im2col(x_c, count);
            let dw = row_dots(&g, &cols, width);
            if !need_dx {
                return dw;
            }
            let mut dcols = vec![S::zero(); k * width];
            gemm(
                S::one(),
                MatView::row_major(w, cs.cout, k).t(),
                MatView::row_major(&g, cs.cout, width),
                S::zero(),
                &mut dcols,
            );
            low.col2im(&dcols, count, dx_c);
            dw
        })
        .collect();
    let mut dw = vec![S::zero(); cs.cout * k];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![S::zero(); cs.cout];
    for i in 0..cs.n {
        for co in 0..cs.cout {
            db[co] += dy[i * out_len + co * p..i * out_len + (co + 1) * p]
                .iter()
                .copied()
                .sum::<S>();
        }
    }
    (need_dx.then_some(dx), dw, db)
}

/// Max pooling with implicit `-inf` padding; returns outputs and the flat
/// per-image source index of each maximum.
pub fn maxpool_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    in_dims: [usize; 3],
    geom: &ConvGeom,
) -> Result<(Vec<S>, Vec<usize>)> {
    let out_dims = geom.out_dims(in_dims)?;
    let in_len: usize = in_dims.iter().product();
    let out_len: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(planes * out_len);
    let mut arg = Vec::with_capacity(planes * out_len);
    for plane in 0..planes {
        let src = &x[plane * in_len..(plane + 1) * in_len];
        for t in 0..out_dims[0] {
            for h in 0..out_dims[1] {
                for w in 0..out_dims[2] {
                    let mut best = S::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dt in 0..geom.kernel[0] {
                        let it = (t * geom.stride[0] + dt) as isize - geom.pad[0] as isize;
                        if it < 0 || it >= in_dims[0] as isize {
                            continue;
                        }
                        for dh in 0..geom.kernel[1] {
                            let ih = (h * geom.stride[1] + dh) as isize - geom.pad[1] as isize;
                            if ih < 0 || ih >= in_dims[1] as isize {
                                continue;
                            }
                            for dw in 0..geom.kernel[2] {
                                let iw = (w * geom.stride[2] + dw) as isize - geom.pad[2] as isize;
                                if iw < 0 || iw >= in_dims[2] as isize {
                                    continue;
                                }
                                let i = ((it as usize * in_dims[1]) + ih as usize) * in_dims[2]
                                    + iw as usize;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(Error::invalid("pooling window entirely in padding"));
                    }
                    out.push(best);
                    arg.push(plane * in_len + best_i);
                }
            }
        }
    }
    Ok((out, arg))
}

/// Per-channel statistics cache from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Batch-statistics normalization of an `(n, c, rest)` buffer.
///
/// Returns the output, the cache, and the batch mean and biased variance.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    rest: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, BnCache<S>, Vec<S>, Vec<S>) {
    let m = S::of((n * rest) as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let s = &x[(i * c + ch) * rest..(i * c + ch + 1) * rest];
            mean[ch] += s.iter().copied().sum::<S>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for i in 0..n {
        for ch in 0..c {
            let s = &x[(i * c + ch) * rest..(i * c + ch + 1) * rest];
            var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<S>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut y = vec![S::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * rest;
            for j in base..base + rest {
                xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                y[j] = gamma[ch] * xhat[j] + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std }, mean, var)
}

/// Gradients of [`batchnorm_train`], including the batch-statistics terms.
/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward<S: Scalar>(
    dy: &[S],
    cache: &BnCache<S>,
    n: usize,
    c: usize,
    rest: usize,
    gamma: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let m = S::of((n * rest) as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * rest;
            for j in base..base + rest {
                dbeta[ch] += dy[j];
                dgamma[ch] += dy[j] * cache.xhat[j];
            }
        }
    }
    let mut dx = vec![S::zero(); dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * rest;
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for j in base..base + rest {
                dx[j] = k * (m * dy[j] - dbeta[ch] - cache.xhat[j] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}
