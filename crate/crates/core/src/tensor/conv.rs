//! Stride-1 3D cross-correlation over `[N, C, T, H, W]` volumes.
//!
//! Each output frame is computed as one GEMM between the flattened kernel
//! `[F, C*kt*kh*kw]` and an im2col buffer built for that frame only, which
//! keeps the buffer small enough to stay in cache.

use super::{Element, Tensor};
use crate::error::invalid;
use crate::Result;

/// Zero padding that keeps stride-1 output extents equal to the input's.
pub fn same_padding(kernel: [usize; 3]) -> [usize; 3] {
    [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2]
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    f: usize,
    k: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], bias: &[usize], pad: [usize; 3]) -> Result<Self> {
        let (&[n, c, t, h, w], &[f, kc, kt, kh, kw]) = (input, kernel) else {
            return Err(invalid!(
                "conv3d expects input [N,C,T,H,W] and kernel [F,C,kt,kh,kw], got {input:?} and {kernel:?}"
            ));
        };
        if c != kc {
            return Err(invalid!(
                "conv3d channel mismatch: input {input:?} vs kernel {kernel:?}"
            ));
        }
        if bias != [f] {
            return Err(invalid!(
                "conv3d bias shape {bias:?} does not match kernel {kernel:?}"
            ));
        }
        let extent = |len: usize, k: usize, p: usize| (len + 2 * p).checked_sub(k).map(|v| v + 1);
        let out = match (
            extent(t, kt, pad[0]),
            extent(h, kh, pad[1]),
            extent(w, kw, pad[2]),
        ) {
            (Some(a), Some(b), Some(c)) => [a, b, c],
            _ => {
                return Err(invalid!(
                    "conv3d kernel {kernel:?} larger than padded input {input:?} (padding {pad:?})"
                ))
            }
        };
        Ok(Self {
            n,
            c,
            t,
            h,
            w,
            f,
            k: [kt, kh, kw],
            pad,
            out,
        })
    }

    fn taps(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    fn cols(&self) -> usize {
        self.c * self.taps()
    }

    fn frame(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn in_volume(&self) -> usize {
        self.t * self.h * self.w
    }

    fn out_volume(&self) -> usize {
        self.out[0] * self.frame()
    }

    fn pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Valid output x range for kernel offset `dx`.
    fn x_range(&self, dx: usize) -> (usize, usize) {
        let lo = self.pad[2].saturating_sub(dx).min(self.out[2]);
        let hi = (self.w + self.pad[2])
            .saturating_sub(dx)
            .min(self.out[2])
            .max(lo);
        (lo, hi)
    }
}

/// Output rows handled per im2col block; keeps the column buffer cache-sized.
fn row_block(g: &Geometry) -> usize {
    let per_row = g.cols() * g.out[2];
    (COL_BUDGET / per_row.max(1)).clamp(1, g.out[1])
}

const COL_BUDGET: usize = 65536;

/// Fills `col` (`[C*taps, rows*ow]`) with the receptive fields of output
/// frame `to`, rows `rows.0..rows.1`.
fn im2col<T: Element>(g: &Geometry, input: &[T], to: usize, rows: (usize, usize), col: &mut [T]) {
    let [_, _, ow] = g.out;
    let p = (rows.1 - rows.0) * ow;
    let [kt, kh, kw] = g.k;
    let [pt, ph, pw] = g.pad;
    let mut row = 0;
    for ci in 0..g.c {
        let channel = &input[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for dt in 0..kt {
            let ti = (to + dt).checked_sub(pt).filter(|&v| v < g.t);
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    let Some(ti) = ti else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let plane = &channel[ti * g.h * g.w..(ti + 1) * g.h * g.w];
                    let (lo, hi) = g.x_range(dx);
                    for oy in rows.0..rows.1 {
                        let r = oy - rows.0;
                        let drow = &mut dst[r * ow..(r + 1) * ow];
                        match (oy + dy).checked_sub(ph).filter(|&v| v < g.h) {
                            None => drow.fill(T::zero()),
                            Some(yi) => {
                                drow[..lo].fill(T::zero());
                                drow[hi..].fill(T::zero());
                                if hi > lo {
                                    let src = yi * g.w + lo + dx - pw;
                                    drow[lo..hi].copy_from_slice(&plane[src..src + hi - lo]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `grad_input`.
fn col2im<T: Element>(
    g: &Geometry,
    col: &[T],
    to: usize,
    rows: (usize, usize),
    grad_input: &mut [T],
) {
    let [kt, kh, kw] = g.k;
    let [pt, ph, pw] = g.pad;
    let [_, _, ow] = g.out;
    let p = (rows.1 - rows.0) * ow;
    let mut row = 0;
    for ci in 0..g.c {
        let base = ci * g.in_volume();
        for dt in 0..kt {
            let ti = (to + dt).checked_sub(pt).filter(|&v| v < g.t);
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    let Some(ti) = ti else { continue };
                    let plane = base + ti * g.h * g.w;
                    let (lo, hi) = g.x_range(dx);
                    if hi == lo {
                        continue;
                    }
                    for oy in rows.0..rows.1 {
                        let Some(yi) = (oy + dy).checked_sub(ph).filter(|&v| v < g.h) else {
                            continue;
                        };
                        let dst = plane + yi * g.w + lo + dx - pw;
                        let r = (oy - rows.0) * ow;
                        for (d, &s) in grad_input[dst..dst + hi - lo]
                            .iter_mut()
                            .zip(&src[r + lo..r + hi])
                        {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, stride 1.
pub fn conv3d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), kernel.shape(), bias.shape(), padding)?;
    let mut out = vec![T::zero(); g.n * g.f * g.out_volume()];
    let (x, wk, b) = (input.data(), kernel.data(), bias.data());
    let in_sample = g.c * g.in_volume();
    let out_sample = g.f * g.out_volume();

    if g.pointwise() {
        let v = g.in_volume();
        for n in 0..g.n {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            let os = &mut out[n * out_sample..(n + 1) * out_sample];
            T::gemm(g.f, g.c, v, wk, (g.c, 1), xs, (v, 1), T::zero(), os, (v, 1));
        }
    } else {
        let p = g.frame();
        let kdim = g.cols();
        let (ow, rb) = (g.out[2], row_block(&g));
        let mut col = vec![T::zero(); kdim * rb * ow];
        for n in 0..g.n {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            for to in 0..g.out[0] {
                for y0 in (0..g.out[1]).step_by(rb) {
                    let rows = (y0, (y0 + rb).min(g.out[1]));
                    let cols = (rows.1 - rows.0) * ow;
                    im2col(&g, xs, to, rows, &mut col);
                    let os = &mut out[n * out_sample + to * p + y0 * ow..(n + 1) * out_sample];
                    T::gemm(
                        g.f,
                        kdim,
                        cols,
                        wk,
                        (kdim, 1),
                        &col,
                        (cols, 1),
                        T::zero(),
                        os,
                        (g.out_volume(), 1),
                    );
                }
            }
        }
    }

    let vol = g.out_volume();
    for chunk in out.chunks_mut(vol).enumerate() {
        let (idx, plane) = chunk;
        let bf = b[idx % g.f];
        for v in plane {
            *v = *v + bf;
        }
    }
    Tensor::new(&[g.n, g.f, g.out[0], g.out[1], g.out[2]], out)
}

/// `(input, kernel, bias)` gradients.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv3d_forward`] with respect to input (optional), kernel and bias.
pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: [usize; 3],
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let f = kernel.shape()[0];
    let g = Geometry::new(input.shape(), kernel.shape(), &[f], padding)?;
    let expected = [g.n, g.f, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expected {
        return Err(invalid!(
            "conv3d grad shape {:?}, expected {expected:?}",
            grad_out.shape()
        ));
    }
    let (x, wk, go) = (input.data(), kernel.data(), grad_out.data());
    let in_sample = g.c * g.in_volume();
    let out_sample = g.f * g.out_volume();
    let kdim = g.cols();
    let mut dk = vec![T::zero(); g.f * kdim];
    let mut din = want_input.then(|| vec![T::zero(); input.len()]);

    let mut db = vec![T::zero(); g.f];
    for (idx, plane) in go.chunks(g.out_volume()).enumerate() {
        db[idx % g.f] = db[idx % g.f] + plane.iter().copied().sum::<T>();
    }

    if g.pointwise() {
        let v = g.in_volume();
        for n in 0..g.n {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            let gs = &go[n * out_sample..(n + 1) * out_sample];
            T::gemm(
                g.f,
                v,
                g.c,
                gs,
                (v, 1),
                xs,
                (1, v),
                T::one(),
                &mut dk,
                (g.c, 1),
            );
            if let Some(din) = din.as_mut() {
                let ds = &mut din[n * in_sample..(n + 1) * in_sample];
                T::gemm(g.c, g.f, v, wk, (1, g.c), gs, (v, 1), T::zero(), ds, (v, 1));
            }
        }
    } else {
        let p = g.frame();
        let ov = g.out_volume();
        let (ow, rb) = (g.out[2], row_block(&g));
        let mut col = vec![T::zero(); kdim * rb * ow];
        let mut dcol = if want_input { col.clone() } else { Vec::new() };
        for n in 0..g.n {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            for to in 0..g.out[0] {
                for y0 in (0..g.out[1]).step_by(rb) {
                    let rows = (y0, (y0 + rb).min(g.out[1]));
                    let cols = (rows.1 - rows.0) * ow;
                    let gs = &go[n * out_sample + to * p + y0 * ow..(n + 1) * out_sample];
                    im2col(&g, xs, to, rows, &mut col);
                    T::gemm(
                        g.f,
                        cols,
                        kdim,
                        gs,
                        (ov, 1),
                        &col,
                        (1, cols),
                        T::one(),
                        &mut dk,
                        (kdim, 1),
                    );
                    if let Some(din) = din.as_mut() {
                        T::gemm(
                            kdim,
                            g.f,
                            cols,
                            wk,
                            (1, kdim),
                            gs,
                            (ov, 1),
                            T::zero(),
                            &mut dcol,
                            (cols, 1),
                        );
                        col2im(
                            &g,
                            &dcol,
                            to,
                            rows,
                            &mut din[n * in_sample..(n + 1) * in_sample],
                        );
                    }
                }
            }
        }
    }

    let din = din.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    Ok((
        din,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::new(&[g.f], db)?,
    ))
}
