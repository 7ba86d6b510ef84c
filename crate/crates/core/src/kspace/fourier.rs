//! Centered orthonormal 2D DFT applied frame by frame.
//!
//! `fft2c = fftshift . FFT . ifftshift / sqrt(nx * ny)`, which puts the DC
//! sample at index `(ny / 2, nx / 2)` and makes the transform unitary.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::invalid;
use crate::tensor::{Element, Tensor};
use crate::Result;

/// Transforms every `ny x nx` frame stored consecutively in `buf`.
pub fn fft2c_frames<T: Element>(buf: &mut [Complex<T>], ny: usize, nx: usize, inverse: bool) {
    let area = ny * nx;
    assert!(
        area > 0 && buf.len().is_multiple_of(area),
        "buffer is not a whole number of {ny}x{nx} frames"
    );
    let mut planner = FftPlanner::<T>::new();
    let (rows, cols) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    let scale = T::cast(1.0 / (area as f64).sqrt());
    let mut work = vec![Complex::new(T::zero(), T::zero()); area];
    let mut transposed = work.clone();
    for frame in buf.chunks_mut(area) {
        // ifftshift: work[y][x] = frame[(y + ny/2) % ny][(x + nx/2) % nx]
        for y in 0..ny {
            let sy = (y + ny / 2) % ny;
            for x in 0..nx {
                work[y * nx + x] = frame[sy * nx + (x + nx / 2) % nx];
            }
        }
        rows.process(&mut work);
        for y in 0..ny {
            for x in 0..nx {
                transposed[x * ny + y] = work[y * nx + x];
            }
        }
        cols.process(&mut transposed);
        // fftshift back into row-major order
        for y in 0..ny {
            let sy = (y + ny - ny / 2) % ny;
            for x in 0..nx {
                let sx = (x + nx - nx / 2) % nx;
                frame[y * nx + x] = transposed[sx * ny + sy] * scale;
            }
        }
    }
}

/// Applies [`fft2c_frames`] to a two-channel `[N, 2, T, H, W]` tensor.
pub fn transform_channels<T: Element>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let &[n, 2, t, h, w] = x.shape() else {
        return Err(invalid!(
            "fft2 expects a [N, 2, T, H, W] tensor, got {:?}",
            x.shape()
        ));
    };
    let vol = t * h * w;
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); vol];
    for ni in 0..n {
        let base = ni * 2 * vol;
        let (re, im) = x.data()[base..base + 2 * vol].split_at(vol);
        for ((c, &r), &i) in buf.iter_mut().zip(re).zip(im) {
            *c = Complex::new(r, i);
        }
        fft2c_frames(&mut buf, h, w, inverse);
        let (ore, oim) = out[base..base + 2 * vol].split_at_mut(vol);
        for ((c, r), i) in buf.iter().zip(ore).zip(oim) {
            *r = c.re;
            *i = c.im;
        }
    }
    Tensor::new(x.shape(), out)
}
