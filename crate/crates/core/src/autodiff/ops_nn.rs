//! Kernels for the NCHW image ops recorded on the tape.

use super::Real;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        ensure!(x.len() == 4, "conv2d: input must be NCHW, got {x:?}");
        ensure!(w.len() == 4, "conv2d: weight must be OIHW, got {w:?}");
        ensure!(stride >= 1, "conv2d: stride must be positive");
        ensure!(
            x[1] == w[1],
            "conv2d: input has {} channels, weight expects {}",
            x[1],
            w[1]
        );
        let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
        ensure!(
            h >= w[2] && wd >= w[3],
            "conv2d: kernel {}x{} larger than padded input {h}x{wd}",
            w[2],
            w[3]
        );
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kernel_h: w[2],
            kernel_w: w[3],
            stride,
            padding,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Visits `(column row, output pixel, input offset)` for every in-bounds
    /// tap of the kernel over one image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            f(
                                row,
                                oy * self.out_w + ox,
                                (c * self.height + iy as usize) * self.width + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let n = self.out_plane();
        self.for_each_tap(|row, px, src| cols[row * n + px] = image[src]);
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let n = self.out_plane();
        self.for_each_tap(|row, px, dst| image[dst] = image[dst] + cols[row * n + px]);
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, n, o) = (g.patch_len(), g.out_plane(), g.out_channels);
    let mut out = vec![T::zero(); g.batch * o * n];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let dst = &mut out[b * o * n..(b + 1) * o * n];
        T::gemm(o, k, n, w, false, &cols, false, dst, false);
        if let Some(bias) = bias {
            for (plane, &bv) in dst.chunks_mut(n).zip(bias) {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
) {
    let (k, n, o) = (g.patch_len(), g.out_plane(), g.out_channels);
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        let gb = &grad_out[b * o * n..(b + 1) * o * n];
        if let Some(gw) = grad_w.as_deref_mut() {
            g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            T::gemm(o, n, k, gb, false, &cols, true, gw, true);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            T::gemm(k, o, n, w, true, gb, false, &mut cols, false);
            g.col2im(&cols, &mut gx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
}

pub(crate) fn conv2d_bias_backward<T: Real>(g: &ConvGeom, grad_out: &[T], grad_b: &mut [T]) {
    let n = g.out_plane();
    for (i, plane) in grad_out.chunks(n).enumerate() {
        let c = i % g.out_channels;
        grad_b[c] = grad_b[c] + plane.iter().copied().sum::<T>();
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    planes: usize,
    height: usize,
    width: usize,
    lead: [usize; 2],
}

impl PoolGeom {
    pub fn new(x: &[usize]) -> Result<Self> {
        ensure!(x.len() == 4, "max_pool2: input must be NCHW, got {x:?}");
        ensure!(
            x[2] >= 2 && x[3] >= 2,
            "max_pool2: spatial size {}x{} below 2x2",
            x[2],
            x[3]
        );
        Ok(Self {
            planes: x[0] * x[1],
            height: x[2],
            width: x[3],
            lead: [x[0], x[1]],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.lead[0], self.lead[1], self.height / 2, self.width / 2]
    }
}

pub(crate) fn max_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.height / 2, g.width / 2);
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut argmax = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * g.width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * g.width + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn instance_norm_forward<T: Real>(x: &[T], plane: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / plane);
    let n = T::lit(plane as f64);
    for chunk in x.chunks(plane) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(chunk.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// `dx = inv_std / N · (N·g − Σg − x̂·Σ(g·x̂))` per plane.
pub(crate) fn instance_norm_backward<T: Real>(
    xhat: &[T],
    inv_std: &[T],
    plane: usize,
    g: &[T],
    gx: &mut [T],
) {
    let n = T::lit(plane as f64);
    for (p, &inv) in inv_std.iter().enumerate() {
        let span = p * plane..(p + 1) * plane;
        let (xh, gp) = (&xhat[span.clone()], &g[span.clone()]);
        let sum_g: T = gp.iter().copied().sum();
        let sum_gx: T = gp.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((dst, &gi), &xi) in gx[span].iter_mut().zip(gp).zip(xh) {
            *dst = *dst + inv / n * (n * gi - sum_g - xi * sum_gx);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ResizeGeom {
    planes: usize,
    lead: [usize; 2],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

/// Source taps `(i0, i1, frac)` for output coordinate `o` when mapping
/// `n_out` corner-aligned samples onto `n_in` pixel centres.
fn taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        let c = (n_in - 1) as f64 / 2.0;
        let i0 = c.floor() as usize;
        return (i0, (i0 + 1).min(n_in - 1), c - i0 as f64);
    }
    let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (s.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

impl ResizeGeom {
    pub fn new(x: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(x.len() == 4, "resize_bilinear: input must be NCHW, got {x:?}");
        ensure!(
            x[2] > 0 && x[3] > 0 && out_h > 0 && out_w > 0,
            "resize_bilinear: empty extent"
        );
        Ok(Self {
            planes: x[0] * x[1],
            lead: [x[0], x[1]],
            in_h: x[2],
            in_w: x[3],
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.lead[0], self.lead[1], self.out_h, self.out_w]
    }

    fn visit(&self, mut f: impl FnMut(usize, usize, f64)) {
        let cols: Vec<_> = (0..self.out_w)
            .map(|ox| taps(ox, self.in_w, self.out_w))
            .collect();
        for p in 0..self.planes {
            let src = p * self.in_h * self.in_w;
            let dst = p * self.out_h * self.out_w;
            for oy in 0..self.out_h {
                let (y0, y1, fy) = taps(oy, self.in_h, self.out_h);
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let o = dst + oy * self.out_w + ox;
                    f(o, src + y0 * self.in_w + x0, (1.0 - fy) * (1.0 - fx));
                    f(o, src + y0 * self.in_w + x1, (1.0 - fy) * fx);
                    f(o, src + y1 * self.in_w + x0, fy * (1.0 - fx));
                    f(o, src + y1 * self.in_w + x1, fy * fx);
                }
            }
        }
    }
}

pub(crate) fn resize_forward<T: Real>(g: &ResizeGeom, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.planes * g.out_h * g.out_w];
    g.visit(|o, i, wgt| {
        if wgt != 0.0 {
            out[o] = out[o] + x[i] * T::lit(wgt);
        }
    });
    out
}

pub(crate) fn resize_backward<T: Real>(g: &ResizeGeom, grad_out: &[T], gx: &mut [T]) {
    g.visit(|o, i, wgt| {
        if wgt != 0.0 {
            gx[i] = gx[i] + grad_out[o] * T::lit(wgt);
        }
    });
}
