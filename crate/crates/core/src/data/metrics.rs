//! Image quality metrics on magnitude images.

use crate::error::invalid;
use crate::kspace::ComplexImageSequence;
use crate::Result;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn magnitudes(
    rec: &ComplexImageSequence,
    reference: &ComplexImageSequence,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !rec.same_geometry(reference) {
        return Err(invalid!(
            "metric geometry mismatch: {:?} vs {:?}",
            rec.geometry(),
            reference.geometry()
        ));
    }
    Ok((rec.magnitude(), reference.magnitude()))
}

/// Squared error `||Ref - Rec||^2`, summed (not averaged).
pub fn metric_mse(rec: &ComplexImageSequence, reference: &ComplexImageSequence) -> Result<f64> {
    let (a, b) = magnitudes(rec, reference)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum())
}

/// `20 log10(max(Ref) sqrt(N) / ||Ref - Rec||)`; `+inf` for identical images.
pub fn metric_psnr(rec: &ComplexImageSequence, reference: &ComplexImageSequence) -> Result<f64> {
    let (a, b) = magnitudes(rec, reference)?;
    let err = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = b.iter().copied().fold(0.0, f64::max);
    Ok(20.0 * (peak * (b.len() as f64).sqrt() / err).log10())
}

/// Mean SSIM over frames with dynamic range `max(Ref)`.
pub fn metric_ssim(rec: &ComplexImageSequence, reference: &ComplexImageSequence) -> Result<f64> {
    let (a, b) = magnitudes(rec, reference)?;
    let peak = b.iter().copied().fold(0.0, f64::max);
    ssim_frames(&a, &b, rec.nx(), rec.ny(), peak)
}

/// Mean SSIM over frames with an explicit dynamic range; symmetric in its
/// two image arguments.
pub fn ssim_with_range(
    a: &ComplexImageSequence,
    b: &ComplexImageSequence,
    range: f64,
) -> Result<f64> {
    let (x, y) = magnitudes(a, b)?;
    ssim_frames(&x, &y, a.nx(), a.ny(), range)
}

fn gaussian_window(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `ny x nx` frame.
fn filter_valid(img: &[f64], nx: usize, ny: usize, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let (ox, oy) = (nx - n + 1, ny - n + 1);
    let mut rows = vec![0.0; ny * ox];
    for y in 0..ny {
        for x in 0..ox {
            rows[y * ox + x] = (0..n).map(|k| w[k] * img[y * nx + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oy * ox];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..n).map(|k| w[k] * rows[(y + k) * ox + x]).sum();
        }
    }
    out
}

fn ssim_frames(a: &[f64], b: &[f64], nx: usize, ny: usize, range: f64) -> Result<f64> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(invalid!("SSIM dynamic range must be positive, got {range}"));
    }
    // frames smaller than the window use the largest odd window that fits
    let mut n = SSIM_WINDOW.min(nx).min(ny);
    if n.is_multiple_of(2) {
        n -= 1;
    }
    let w = gaussian_window(n);
    let (c1, c2) = ((K1 * range).powi(2), (K2 * range).powi(2));
    let area = nx * ny;
    let frames = a.len() / area;
    let mut total = 0.0;
    for t in 0..frames {
        let x = &a[t * area..(t + 1) * area];
        let y = &b[t * area..(t + 1) * area];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] =
            [x, y, &xx[..], &yy[..], &xy[..]].map(|f| filter_valid(f, nx, ny, &w));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / frames as f64)
}
