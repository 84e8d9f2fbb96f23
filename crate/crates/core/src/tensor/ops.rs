//! Forward and adjoint kernels on plain tensors.
//!
//! The tape calls into these; they are also public so that callers can run
//! inference without recording anything.

use super::{ensure_same_shape, Result, Tensor, TensorError};

/// Output geometry of a square-kernel 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [c_in, h, w] = *input else {
            return Err(TensorError::Dimension(format!(
                "conv2d input must be [C,H,W], got {input:?}"
            )));
        };
        let [c_out, kc_in, k, k2] = *kernel else {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel must be [C_out,C_in,k,k], got {kernel:?}"
            )));
        };
        if kc_in != c_in {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if k != k2 || k == 0 {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel must be square and non-empty, got {k}x{k2}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Geometry("conv2d stride must be >= 1".into()));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < k {
                return Err(TensorError::Geometry(format!(
                    "conv2d: padded extent {padded} smaller than kernel {k}"
                )));
            }
            if (padded - k) % stride != 0 {
                return Err(TensorError::Geometry(format!(
                    "conv2d: ({padded} - {k}) not divisible by stride {stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            padding,
            out_h: out_dim(h)?,
            out_w: out_dim(w)?,
        })
    }

    /// Input row for an output row and kernel row, if inside the image.
    #[inline]
    fn src(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Half-open range of output columns whose source column is in bounds.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > kx {
            (self.padding - kx).div_ceil(s)
        } else {
            0
        };
        let hi = if self.w + self.padding > kx {
            (self.w + self.padding - kx).div_ceil(s).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn col(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx - self.padding
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (x, wt) = (input.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let w = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let off = lo + kx - g.padding;
                            for (d, s) in drow[lo..hi].iter_mut().zip(&row[off..off + hi - lo]) {
                                *d += w * s;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox] += w * row[g.col(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let (gy, wt) = (grad_out.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut gx = vec![0.0; g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let gsrc = &gy[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let dst = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let w = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let grow = &gsrc[oy * g.out_w..(oy + 1) * g.out_w];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = lo + kx - g.padding;
                            for (d, s) in drow[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *d += w * s;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[g.col(ox, kx)] += w * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    #[cfg(test)]
    if fault::conv_grad_fault() {
        gx.iter_mut().for_each(|v| *v *= 1.01);
    }
    Tensor::new(&[g.c_in, g.h, g.w], gx)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_backward_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let (gy, x) = (grad_out.data(), input.data());
    let plane = g.out_h * g.out_w;
    let mut gk = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for co in 0..g.c_out {
        let gsrc = &gy[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (lo, hi) = g.valid_cols(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let grow = &gsrc[oy * g.out_w..(oy + 1) * g.out_w];
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = lo + kx - g.padding;
                            acc += grow[lo..hi]
                                .iter()
                                .zip(&row[off..off + hi - lo])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in lo..hi {
                                acc += grow[ox] * row[g.col(ox, kx)];
                            }
                        }
                    }
                    gk[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.c_in, g.k, g.k], gk)
}

/// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape().first().unwrap_or(&0);
    if bias.shape() != [c] {
        return Err(TensorError::Dimension(format!(
            "bias shape {:?} does not match {c} channels",
            bias.shape()
        )));
    }
    let plane = x.numel() / c.max(1);
    let b = bias.data();
    let mut out = x.clone().into_vec();
    for (ch, chunk) in out.chunks_mut(plane.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v += b[ch]);
    }
    Tensor::new(x.shape(), out)
}

pub fn channel_sums(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let plane = x.numel() / c.max(1);
    Tensor::from_fn(&[c], |ch| x.data()[ch * plane..(ch + 1) * plane].iter().sum())
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (batch, n, k, batch_b, k2, m) = match (a, b) {
        ([n, k], [k2, m]) => (1, *n, *k, 1, *k2, *m),
        ([ba, n, k], [bb, k2, m]) => (*ba, *n, *k, *bb, *k2, *m),
        _ => {
            return Err(TensorError::Dimension(format!(
                "matmul needs two rank-2 or two rank-3 operands, got {a:?} and {b:?}"
            )))
        }
    };
    if k != k2 || batch != batch_b {
        return Err(TensorError::Dimension(format!(
            "matmul inner/batch dims disagree: {a:?} x {b:?}"
        )));
    }
    Ok((batch, n, k, m))
}

/// Matrix product of `[n,k] x [k,m]`, or a batched `[b,n,k] x [b,k,m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, n, k, m) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * n * m];
    for bi in 0..batch {
        let ad = &a.data()[bi * n * k..(bi + 1) * n * k];
        let bd = &b.data()[bi * k * m..(bi + 1) * k * m];
        let od = &mut out[bi * n * m..(bi + 1) * n * m];
        for i in 0..n {
            let orow = &mut od[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
    }
    let shape: Vec<usize> = if a.rank() == 2 {
        vec![n, m]
    } else {
        vec![batch, n, m]
    };
    Tensor::new(&shape, out)
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose_last(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        2 => permute(x, &[1, 0]),
        3 => permute(x, &[0, 2, 1]),
        r => Err(TensorError::Dimension(format!(
            "transpose_last needs rank 2 or 3, got {r}"
        ))),
    }
}

/// `(outer, len, inner)` strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Adjoint of softmax given its output `y`: `y * (g - sum(g * y))` per slice.
pub fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..len {
                out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Dimension("concat of zero tensors".into()))?;
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(TensorError::Dimension(format!(
                "concat along axis {axis}: ragged shapes {:?} and {:?}",
                first.shape(),
                p.shape()
            )));
        }
        shape[axis] += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

/// Splits `grad` along `axis` back into pieces of the given extents.
pub fn split(grad: &Tensor, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
    let (outer, total, inner) = axis_split(grad.shape(), axis)?;
    if extents.iter().sum::<usize>() != total {
        return Err(TensorError::Dimension(format!(
            "split extents {extents:?} do not cover {total}"
        )));
    }
    let mut offset = 0;
    extents
        .iter()
        .map(|&len| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&grad.data()[start..start + len * inner]);
            }
            offset += len;
            let mut shape = grad.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)
        })
        .collect()
}

pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Dimension(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let shape = x.shape();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.numel() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Non-overlapping `k x k` max pooling. Returns the pooled tensor and the
/// flat input index of each window's maximum (first in row-major order on ties).
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = *x.shape() else {
        return Err(TensorError::Dimension(format!(
            "max_pool2d input must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::Geometry(format!(
            "max_pool2d window {k} must divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = ch * h * w + (oy * k + dy) * w + ox * k + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(TensorError::Dimension(format!(
            "upsample_nearest input must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if factor == 0 {
        return Err(TensorError::Geometry("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let out = (0..c * oh * ow)
        .map(|i| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (rem / ow, rem % ow);
            src[ch * h * w + (y / factor) * w + xx / factor]
        })
        .collect();
    Tensor::new(&[c, oh, ow], out)
}

pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    let [c, oh, ow] = *grad.shape() else {
        return Err(TensorError::Dimension("upsample gradient must be rank 3".into()));
    };
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0; c * h * w];
    for (i, g) in grad.data().iter().enumerate() {
        let (ch, rem) = (i / (oh * ow), i % (oh * ow));
        let (y, x) = (rem / ow, rem % ow);
        out[ch * h * w + (y / factor) * w + x / factor] += g;
    }
    Tensor::new(&[c, h, w], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b, "div")?;
    a.zip_map(b, |x, y| x / y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops, zero padding handled by bounds checks.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co_n, ks) = (k.shape()[0], k.shape()[2]);
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; co_n * oh * ow];
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * ci_n + ci) * ks + ky) * ks + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_sum_kernel() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
            let x = random(&[2, 5, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let oracle = conv_oracle(&x, &k, stride, pad);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn conv_geometry_errors() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(TensorError::Dimension(_))));
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        // (4 - 3) / 2 is not exact
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(TensorError::Geometry(_))));
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(TensorError::Geometry(_))));
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &x).unwrap(), x);

        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - acc).abs() <= 1e-12);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = |v: Vec<f64>| {
            softmax(&Tensor::new(&[v.len()], v).unwrap(), 0)
                .unwrap()
                .into_vec()
        };
        assert_eq!(s(vec![0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(s(vec![1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = s(vec![0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis_slices_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 3], &mut rng);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let total: f64 = (0..4).map(|j| y.data()[(o * 4 + j) * 3 + i]).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(concat(&[&a], 0).unwrap(), a);
        let parts = split(&c, 0, &[1, 1]).unwrap();
        assert_eq!(parts, vec![a.clone(), b.clone()]);
        let c1 = concat(&[&a, &b], 2).unwrap();
        assert_eq!(c1.data(), &[0.0, 1.0, 10.0, 11.0, 2.0, 3.0, 12.0, 13.0]);
        assert!(concat(&[&a, &Tensor::zeros(&[1, 3, 2])], 0).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn pooling_and_upsampling() {
        let c = Tensor::full(&[1, 4, 4], 0.3);
        assert_eq!(max_pool2d(&c, 2).unwrap().0, Tensor::full(&[1, 2, 2], 0.3));
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        // ties resolve to the first element in scan order
        assert_eq!(max_pool2d(&c, 2).unwrap().1[0], 0);
        assert!(max_pool2d(&Tensor::zeros(&[1, 3, 4]), 2).is_err());

        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            up.data(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
        let g = upsample_nearest_backward(&Tensor::full(&[1, 4, 4], 1.0), 2).unwrap();
        assert_eq!(g.data(), &[4.0; 4]);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::new(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }
}
