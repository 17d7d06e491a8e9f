//! Per-layer forward and backward kernels on batched `[n, c, h, w]` buffers.

use crate::graph::{conv_out, pool_out, Dims};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_dims: Dims,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let [_, h, w] = self.in_dims;
        (
            conv_out(h, self.kernel, self.stride, self.pad).expect("validated geometry"),
            conv_out(w, self.kernel, self.stride, self.pad).expect("validated geometry"),
        )
    }

    pub fn fan_in(&self) -> usize {
        self.in_dims[0] * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        let (oh, ow) = self.out_hw();
        oh * ow
    }

    /// Input coordinate `(channel, y, x)` read by fan-in column `j` at output
    /// position `(oy, ox)`, or `None` inside the zero padding.
    pub fn source(&self, j: usize, oy: usize, ox: usize) -> Option<(usize, usize, usize)> {
        let [_, h, w] = self.in_dims;
        let kk = self.kernel * self.kernel;
        let (c, off) = (j / kk, j % kk);
        let (ky, kx) = (off / self.kernel, off % self.kernel);
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < h && ix < w).then_some((c, iy, ix))
    }
}

/// Unroll one sample into a `fan_in x positions` column matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], col: &mut [T]) {
    let [c, h, w] = g.in_dims;
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    debug_assert_eq!(col.len(), c * k * k * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto one sample's input gradient.
pub fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], grad: &mut [T]) {
    let [c, h, w] = g.in_dims;
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            grad[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeometry, input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = input.dim0();
    let (oh, ow) = g.out_hw();
    let (fan_in, p, o) = (g.fan_in(), oh * ow, g.out_channels);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut col = vec![T::zero(); fan_in * p];
    for s in 0..n {
        im2col(g, input.row(s), &mut col);
        let dst = out.row_mut(s);
        for (i, &b) in bias.data().iter().enumerate() {
            dst[i * p..(i + 1) * p].fill(b);
        }
        T::gemm(
            o,
            fan_in,
            p,
            weight.data(),
            (fan_in as isize, 1),
            &col,
            (p as isize, 1),
            T::one(),
            dst,
        );
    }
    out
}

pub struct AffineGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

pub fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
) -> AffineGrads<T> {
    let n = input.dim0();
    let (fan_in, p, o) = (g.fan_in(), g.positions(), g.out_channels);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = Tensor::zeros(input.shape());
    let mut col = vec![T::zero(); fan_in * p];
    let mut dcol = vec![T::zero(); fan_in * p];
    for s in 0..n {
        let dy = dout.row(s);
        im2col(g, input.row(s), &mut col);
        // dW += dY (o x p) * col^T (p x fan_in)
        T::gemm(
            o,
            p,
            fan_in,
            dy,
            (p as isize, 1),
            &col,
            (1, p as isize),
            T::one(),
            dw.data_mut(),
        );
        for (i, b) in db.data_mut().iter_mut().enumerate() {
            *b += dy[i * p..(i + 1) * p].iter().copied().sum::<T>();
        }
        // dcol = W^T (fan_in x o) * dY (o x p)
        T::gemm(
            fan_in,
            o,
            p,
            weight.data(),
            (1, fan_in as isize),
            dy,
            (p as isize, 1),
            T::zero(),
            &mut dcol,
        );
        col2im(g, &dcol, dx.row_mut(s));
    }
    AffineGrads {
        weight: dw,
        bias: db,
        input: dx,
    }
}

pub fn fc_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = input.dim0();
    let f = input.stride0();
    let o = weight.dim0();
    let mut out = Tensor::zeros(&[n, o, 1, 1]);
    for s in 0..n {
        out.row_mut(s).copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        f,
        o,
        input.data(),
        (f as isize, 1),
        weight.data(),
        (1, f as isize),
        T::one(),
        out.data_mut(),
    );
    out
}

pub fn fc_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, dout: &Tensor<T>) -> AffineGrads<T> {
    let n = input.dim0();
    let f = input.stride0();
    let o = weight.dim0();
    let mut dw = Tensor::zeros(weight.shape());
    T::gemm(
        o,
        n,
        f,
        dout.data(),
        (1, o as isize),
        input.data(),
        (f as isize, 1),
        T::zero(),
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(&[o]);
    for s in 0..n {
        for (b, &d) in db.data_mut().iter_mut().zip(dout.row(s)) {
            *b += d;
        }
    }
    let mut dx = Tensor::zeros(input.shape());
    T::gemm(
        n,
        o,
        f,
        dout.data(),
        (o as isize, 1),
        weight.data(),
        (f as isize, 1),
        T::zero(),
        dx.data_mut(),
    );
    AffineGrads {
        weight: dw,
        bias: db,
        input: dx,
    }
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub in_dims: Dims,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let [_, h, w] = self.in_dims;
        (
            pool_out(h, self.kernel, self.stride).expect("validated geometry"),
            pool_out(w, self.kernel, self.stride).expect("validated geometry"),
        )
    }

    /// Window rows/cols clipped to the input.
    fn window(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let [_, h, w] = self.in_dims;
        let (y0, x0) = (oy * self.stride, ox * self.stride);
        (y0..(y0 + self.kernel).min(h), x0..(x0 + self.kernel).min(w))
    }
}

pub fn pool_forward<T: Scalar>(g: &PoolGeometry, kind: PoolKind, input: &Tensor<T>) -> Tensor<T> {
    let n = input.dim0();
    let [c, h, w] = g.in_dims;
    let (oh, ow) = g.out_hw();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for s in 0..n {
        let src = input.row(s);
        let dst = out.row_mut(s);
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (ys, xs) = g.window(oy, ox);
                    let count = ys.len() * xs.len();
                    let mut acc = match kind {
                        PoolKind::Max => T::neg_infinity(),
                        PoolKind::Avg => T::zero(),
                    };
                    for y in ys {
                        for x in xs.clone() {
                            let v = plane[y * w + x];
                            acc = match kind {
                                PoolKind::Max => {
                                    if v > acc {
                                        v
                                    } else {
                                        acc
                                    }
                                }
                                PoolKind::Avg => acc + v,
                            };
                        }
                    }
                    if kind == PoolKind::Avg {
                        acc /= T::from_f64(count as f64);
                    }
                    dst[(ci * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Max pooling routes the gradient to the first maximal element of each window.
pub fn pool_backward<T: Scalar>(g: &PoolGeometry, kind: PoolKind, input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let n = input.dim0();
    let [c, h, w] = g.in_dims;
    let (oh, ow) = g.out_hw();
    let mut dx = Tensor::zeros(input.shape());
    for s in 0..n {
        let src = input.row(s);
        let dy = dout.row(s);
        let dst = dx.row_mut(s);
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[(ci * oh + oy) * ow + ox];
                    let (ys, xs) = g.window(oy, ox);
                    match kind {
                        PoolKind::Max => {
                            let mut best = (T::neg_infinity(), 0);
                            for y in ys {
                                for x in xs.clone() {
                                    let v = src[base + y * w + x];
                                    if v > best.0 {
                                        best = (v, base + y * w + x);
                                    }
                                }
                            }
                            dst[best.1] += d;
                        }
                        PoolKind::Avg => {
                            let share = d / T::from_f64((ys.len() * xs.len()) as f64);
                            for y in ys {
                                for x in xs.clone() {
                                    dst[base + y * w + x] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug)]
pub struct LrnParams {
    pub local_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

/// Cross-channel normaliser `k + alpha/n * sum_{window} x^2` per element.
fn lrn_scale<T: Scalar>(p: &LrnParams, dims: Dims, x: &[T]) -> Vec<T> {
    let [c, h, w] = dims;
    let hw = h * w;
    let half = p.local_size / 2;
    let coeff = T::from_f64(p.alpha / p.local_size as f64);
    let k = T::from_f64(p.k);
    let mut scale = vec![k; x.len()];
    for ci in 0..c {
        let lo = ci.saturating_sub(half);
        let hi = (ci + half).min(c - 1);
        for cj in lo..=hi {
            for q in 0..hw {
                let v = x[cj * hw + q];
                scale[ci * hw + q] += coeff * v * v;
            }
        }
    }
    scale
}

pub fn lrn_forward<T: Scalar>(p: &LrnParams, dims: Dims, input: &Tensor<T>) -> Tensor<T> {
    let beta = T::from_f64(p.beta);
    let mut out = Tensor::zeros(input.shape());
    for s in 0..input.dim0() {
        let x = input.row(s);
        let scale = lrn_scale(p, dims, x);
        for ((o, &v), &sc) in out.row_mut(s).iter_mut().zip(x).zip(&scale) {
            *o = v * sc.powf(-beta);
        }
    }
    out
}

pub fn lrn_backward<T: Scalar>(p: &LrnParams, dims: Dims, input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = dims;
    let hw = h * w;
    let half = p.local_size / 2;
    let beta = T::from_f64(p.beta);
    let coeff = T::from_f64(2.0 * p.alpha * p.beta / p.local_size as f64);
    let mut dx = Tensor::zeros(input.shape());
    for s in 0..input.dim0() {
        let x = input.row(s);
        let dy = dout.row(s);
        let scale = lrn_scale(p, dims, x);
        // ratio_j = dy_j * y_j / scale_j = dy_j * x_j * scale_j^(-beta-1)
        let ratio: Vec<T> = (0..x.len())
            .map(|q| dy[q] * x[q] * scale[q].powf(-beta - T::one()))
            .collect();
        let dst = dx.row_mut(s);
        for ci in 0..c {
            let lo = ci.saturating_sub(half);
            let hi = (ci + half).min(c - 1);
            for q in 0..hw {
                let i = ci * hw + q;
                let mut acc = T::zero();
                for cj in lo..=hi {
                    acc += ratio[cj * hw + q];
                }
                dst[i] = dy[i] * scale[i].powf(-beta) - coeff * x[i] * acc;
            }
        }
    }
    dx
}

/// Concatenate batched tensors along the channel axis.
pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let n = parts[0].dim0();
    let sizes: Vec<usize> = parts.iter().map(|p| p.stride0()).collect();
    let total: usize = sizes.iter().sum();
    let shape = parts[0].shape();
    let hw = shape[2] * shape[3];
    let mut out = Tensor::zeros(&[n, total / hw, shape[2], shape[3]]);
    for s in 0..n {
        let dst = out.row_mut(s);
        let mut off = 0;
        for (p, &len) in parts.iter().zip(&sizes) {
            dst[off..off + len].copy_from_slice(p.row(s));
            off += len;
        }
    }
    out
}

/// Split a channel gradient back into per-input pieces.
pub fn concat_backward<T: Scalar>(dout: &Tensor<T>, part_shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
    let n = dout.dim0();
    let mut off = 0;
    part_shapes
        .iter()
        .map(|shape| {
            let len: usize = shape[1..].iter().product();
            let mut t = Tensor::zeros(shape);
            for s in 0..n {
                t.row_mut(s).copy_from_slice(&dout.row(s)[off..off + len]);
            }
            off += len;
            t
        })
        .collect()
}

/// Straightforward nested-loop cross-correlation, kept as an independent
/// reference for the unrolled path.
pub mod reference {
    use super::ConvGeometry;
    use crate::tensor::{Scalar, Tensor};

    pub fn conv2d_naive<T: Scalar>(
        g: &ConvGeometry,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Tensor<T> {
        let n = input.dim0();
        let [c, h, w] = g.in_dims;
        let (oh, ow) = g.out_hw();
        let k = g.kernel;
        let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
        let wd = weight.data();
        for s in 0..n {
            let x = input.row(s);
            let y = out.row_mut(s);
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[o].as_f64();
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[(ci * h + iy as usize) * w + ix as usize];
                                    let wv = wd[((o * c + ci) * k + ky) * k + kx];
                                    acc += xv.as_f64() * wv.as_f64();
                                }
                            }
                        }
                        y[(o * oh + oy) * ow + ox] = T::from_f64(acc);
                    }
                }
            }
        }
        out
    }
}
