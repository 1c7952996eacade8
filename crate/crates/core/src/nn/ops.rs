//! Batched kernels behind the convolution, pooling and dense layers.

use rayon::prelude::*;

use crate::tensor::Real;

/// Items per work unit in the parallel convolution kernels. Fixed so that
/// weight-gradient reduction order never depends on the thread count.
const CONV_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: usize, pad: usize) -> Self {
        let (channels, height, width) = (input[0], input[1], input[2]);
        ConvGeom {
            channels,
            height,
            width,
            kernel,
            pad,
            out_h: height + 2 * pad - kernel + 1,
            out_w: width + 2 * pad - kernel + 1,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn im2col<R: Real>(&self, x: &[R], cols: &mut [R]) {
        let p = self.out_positions();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = oh + ki;
                        for ow in 0..self.out_w {
                            let iw = ow + kj;
                            dst[oh * self.out_w + ow] = if ih < self.pad
                                || iw < self.pad
                                || ih - self.pad >= self.height
                                || iw - self.pad >= self.width
                            {
                                R::zero()
                            } else {
                                x[(c * self.height + ih - self.pad) * self.width + iw - self.pad]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<R: Real>(&self, cols: &[R], dx: &mut [R]) {
        let p = self.out_positions();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = oh + ki;
                        if ih < self.pad || ih - self.pad >= self.height {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = ow + kj;
                            if iw < self.pad || iw - self.pad >= self.width {
                                continue;
                            }
                            dx[(c * self.height + ih - self.pad) * self.width + iw - self.pad] +=
                                src[oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b])`; `weight` is `(out, patch_len)`.
pub(crate) fn conv_forward<R: Real>(
    geom: &ConvGeom,
    out_channels: usize,
    x: &[R],
    weight: &[R],
    batch: usize,
) -> Vec<R> {
    let p = geom.out_positions();
    let kk = geom.patch_len();
    let in_len = geom.in_len();
    let mut y = vec![R::zero(); batch * out_channels * p];
    y.par_chunks_mut(out_channels * p)
        .zip(x.par_chunks(in_len))
        .for_each_init(
            || vec![R::zero(); kk * p],
            |cols, (yi, xi)| {
                geom.im2col(xi, cols);
                R::gemm(
                    out_channels,
                    kk,
                    p,
                    R::one(),
                    weight,
                    (kk as isize, 1),
                    cols,
                    (p as isize, 1),
                    R::zero(),
                    yi,
                    (p as isize, 1),
                );
            },
        );
    y
}

/// Returns `(dx, dW)` for a convolution given the output gradient `dy`.
pub(crate) fn conv_backward<R: Real>(
    geom: &ConvGeom,
    out_channels: usize,
    x: &[R],
    weight: &[R],
    dy: &[R],
    batch: usize,
) -> (Vec<R>, Vec<R>) {
    let p = geom.out_positions();
    let kk = geom.patch_len();
    let in_len = geom.in_len();
    let out_len = out_channels * p;
    let mut dx = vec![R::zero(); batch * in_len];
    let partials: Vec<Vec<R>> = dx
        .par_chunks_mut(CONV_CHUNK * in_len)
        .zip(x.par_chunks(CONV_CHUNK * in_len))
        .zip(dy.par_chunks(CONV_CHUNK * out_len))
        .map(|((dx_c, x_c), dy_c)| {
            let mut dw = vec![R::zero(); out_channels * kk];
            let mut cols = vec![R::zero(); kk * p];
            let mut dcols = vec![R::zero(); kk * p];
            for ((dxi, xi), dyi) in dx_c
                .chunks_mut(in_len)
                .zip(x_c.chunks(in_len))
                .zip(dy_c.chunks(out_len))
            {
                geom.im2col(xi, &mut cols);
                // dW += dy_i · cols^T
                R::gemm(
                    out_channels,
                    p,
                    kk,
                    R::one(),
                    dyi,
                    (p as isize, 1),
                    &cols,
                    (1, p as isize),
                    R::one(),
                    &mut dw,
                    (kk as isize, 1),
                );
                // dcols = W^T · dy_i
                R::gemm(
                    kk,
                    out_channels,
                    p,
                    R::one(),
                    weight,
                    (1, kk as isize),
                    dyi,
                    (p as isize, 1),
                    R::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                geom.col2im(&dcols, dxi);
            }
            dw
        })
        .collect();
    let mut dw = vec![R::zero(); out_channels * kk];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    (dx, dw)
}

/// `y = x · Wᵀ` for `x: (batch, fan_in)` and `W: (out, fan_in)`.
pub(crate) fn dense_forward<R: Real>(x: &[R], weight: &[R], batch: usize, fan_in: usize, out: usize) -> Vec<R> {
    let mut y = vec![R::zero(); batch * out];
    R::gemm(
        batch,
        fan_in,
        out,
        R::one(),
        x,
        (fan_in as isize, 1),
        weight,
        (1, fan_in as isize),
        R::zero(),
        &mut y,
        (out as isize, 1),
    );
    y
}

/// Returns `(dx, dW)` for a dense layer.
pub(crate) fn dense_backward<R: Real>(
    x: &[R],
    weight: &[R],
    dy: &[R],
    batch: usize,
    fan_in: usize,
    out: usize,
) -> (Vec<R>, Vec<R>) {
    let mut dw = vec![R::zero(); out * fan_in];
    R::gemm(
        out,
        batch,
        fan_in,
        R::one(),
        dy,
        (1, out as isize),
        x,
        (fan_in as isize, 1),
        R::zero(),
        &mut dw,
        (fan_in as isize, 1),
    );
    let mut dx = vec![R::zero(); batch * fan_in];
    R::gemm(
        batch,
        out,
        fan_in,
        R::one(),
        dy,
        (out as isize, 1),
        weight,
        (fan_in as isize, 1),
        R::zero(),
        &mut dx,
        (fan_in as isize, 1),
    );
    (dx, dw)
}

/// Max pooling over `(batch, c, h, w)`; returns the output and, per output
/// element, the flat input index it was taken from.
pub(crate) fn max_pool_forward<R: Real>(
    x: &[R],
    shape: &[usize],
    kernel: usize,
    stride: usize,
) -> (Vec<R>, Vec<usize>, [usize; 2]) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for di in 0..kernel {
                    for dj in 0..kernel {
                        let idx = base + (i * stride + di) * w + j * stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg, [oh, ow])
}
