//! Fourier encoding and the undersampled acquisition model `K_u = F_u S + e`.

pub mod fourier;
mod mask;

pub use mask::{generate_mask, MaskConfig, SamplingMask};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::tensor::{Element, Tensor};
use crate::Result;

/// Complex dynamic image `S`, stored frame-major: `t` slowest, then `y`, then `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImageSequence {
    nx: usize,
    ny: usize,
    nt: usize,
    data: Vec<Complex64>,
}

/// Dense k-space with the same layout as an image (`kx` fastest, then `ky`, then `t`).
pub type KSpaceDense = ComplexImageSequence;

impl ComplexImageSequence {
    pub fn new(nx: usize, ny: usize, nt: usize, data: Vec<Complex64>) -> Result<Self> {
        if nx == 0 || ny == 0 || nt == 0 {
            return Err(invalid!(
                "image extents must be positive, got {nx}x{ny}x{nt}"
            ));
        }
        if data.len() != nx * ny * nt {
            return Err(invalid!(
                "{nx}x{ny}x{nt} sequence needs {} samples, got {}",
                nx * ny * nt,
                data.len()
            ));
        }
        if let Some(i) = data
            .iter()
            .position(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(invalid!("non-finite sample at index {i}"));
        }
        Ok(Self { nx, ny, nt, data })
    }

    pub fn zeros(nx: usize, ny: usize, nt: usize) -> Self {
        Self {
            nx,
            ny,
            nt,
            data: vec![Complex64::new(0.0, 0.0); nx * ny * nt],
        }
    }

    /// Builds a sequence from `f(x, y, t)`.
    pub fn from_fn(
        nx: usize,
        ny: usize,
        nt: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(nx * ny * nt);
        for t in 0..nt {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, t));
                }
            }
        }
        Self::new(nx, ny, nt, data)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nt)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize, t: usize) -> Complex64 {
        self.data[(t * self.ny + y) * self.nx + x]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let area = self.nx * self.ny;
        &self.data[t * area..(t + 1) * area]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Complex inner product `<self, other> = sum conj(self) * other`.
    pub fn dot(&self, other: &Self) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.geometry() == other.geometry()
    }

    /// Two-channel real view `[2, nt, ny, nx]` (real part, then imaginary part).
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.len());
        data.extend(self.data.iter().map(|c| T::cast(c.re)));
        data.extend(self.data.iter().map(|c| T::cast(c.im)));
        Tensor::new(&[2, self.nt, self.ny, self.nx], data).expect("geometry is consistent")
    }

    /// Stacks sequences of equal geometry into `[N, 2, nt, ny, nx]`.
    pub fn stack<T: Element>(seqs: &[&Self]) -> Result<Tensor<T>> {
        let first = seqs
            .first()
            .ok_or_else(|| invalid!("cannot stack an empty list of sequences"))?;
        let mut data = Vec::with_capacity(seqs.len() * 2 * first.len());
        for s in seqs {
            if !s.same_geometry(first) {
                return Err(invalid!(
                    "cannot stack {:?} with {:?}",
                    s.geometry(),
                    first.geometry()
                ));
            }
            data.extend(s.to_tensor::<T>().into_data());
        }
        Tensor::new(&[seqs.len(), 2, first.nt, first.ny, first.nx], data)
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); also accepts a leading unit batch axis.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (nt, ny, nx) = match *t.shape() {
            [2, nt, ny, nx] | [1, 2, nt, ny, nx] => (nt, ny, nx),
            ref s => return Err(invalid!("expected a [2, nt, ny, nx] tensor, got {s:?}")),
        };
        let (re, im) = t.data().split_at(t.len() / 2);
        let data = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex64::new(r.as_f64(), i.as_f64()))
            .collect();
        Self::new(nx, ny, nt, data)
    }

    /// Splits an `[N, 2, nt, ny, nx]` tensor into sequences.
    pub fn unstack<T: Element>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let &[n, 2, nt, ny, nx] = t.shape() else {
            return Err(invalid!(
                "expected an [N, 2, nt, ny, nx] tensor, got {:?}",
                t.shape()
            ));
        };
        let per = 2 * nt * ny * nx;
        (0..n)
            .map(|i| {
                let part =
                    Tensor::new(&[2, nt, ny, nx], t.data()[i * per..(i + 1) * per].to_vec())?;
                Self::from_tensor(&part)
            })
            .collect()
    }
}

/// Centered orthonormal 2D DFT of every frame.
pub fn fft2_per_frame(img: &ComplexImageSequence) -> KSpaceDense {
    let mut out = img.clone();
    fourier::fft2c_frames(&mut out.data, img.ny, img.nx, false);
    out
}

/// Inverse of [`fft2_per_frame`].
pub fn ifft2_per_frame(k: &KSpaceDense) -> ComplexImageSequence {
    let mut out = k.clone();
    fourier::fft2c_frames(&mut out.data, k.ny, k.nx, true);
    out
}

/// Acquisition noise `e`: i.i.d. Gaussian with standard deviation `sigma` on
/// the real and on the imaginary part of every k-space sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma: f64,
}

/// Undersampled measurements `K_u`; exactly zero wherever the mask is unset.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    samples: KSpaceDense,
    mask: SamplingMask,
}

impl KSpaceData {
    /// Restricts dense k-space to the mask, zeroing every unsampled entry.
    pub fn from_dense(mut samples: KSpaceDense, mask: &SamplingMask) -> Result<Self> {
        mask.check_geometry(&samples)?;
        mask.apply(&mut samples);
        Ok(Self {
            samples,
            mask: mask.clone(),
        })
    }

    pub fn samples(&self) -> &KSpaceDense {
        &self.samples
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        self.samples.geometry()
    }
}

/// `K_u = M . FFT(S) + M . e`.
pub fn forward_model(
    img: &ComplexImageSequence,
    mask: &SamplingMask,
    noise: NoiseModel,
    seed: u64,
) -> Result<KSpaceData> {
    mask.check_geometry(img)?;
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(invalid!(
            "noise sigma must be finite and nonnegative, got {}",
            noise.sigma
        ));
    }
    let mut k = fft2_per_frame(img);
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.sigma).expect("sigma validated above");
        for c in &mut k.data {
            c.re += normal.sample(&mut rng);
            c.im += normal.sample(&mut rng);
        }
    }
    KSpaceData::from_dense(k, mask)
}

/// Inverse FFT of the zero-filled measurements.
pub fn zero_filled_recon(k: &KSpaceData) -> ComplexImageSequence {
    ifft2_per_frame(&k.samples)
}

/// `F_u x = M . FFT(x)`.
pub fn undersampled_fft(img: &ComplexImageSequence, mask: &SamplingMask) -> Result<KSpaceDense> {
    mask.check_geometry(img)?;
    let mut k = fft2_per_frame(img);
    mask.apply(&mut k);
    Ok(k)
}

/// `F_u^H y = IFFT(M . y)`.
pub fn undersampled_ifft(k: &KSpaceDense, mask: &SamplingMask) -> Result<ComplexImageSequence> {
    mask.check_geometry(k)?;
    let mut masked = k.clone();
    mask.apply(&mut masked);
    Ok(ifft2_per_frame(&masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_seq(nx: usize, ny: usize, nt: usize, seed: u64) -> ComplexImageSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImageSequence::from_fn(nx, ny, nt, |_, _, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    #[test]
    fn rejects_non_finite_samples() {
        let mut data = vec![Complex64::new(0.0, 0.0); 8];
        data[3].im = f64::NAN;
        assert!(ComplexImageSequence::new(2, 2, 2, data).is_err());
    }

    #[test]
    fn two_channel_view_roundtrips() {
        let s = random_seq(5, 4, 3, 1);
        let t = s.to_tensor::<f64>();
        assert_eq!(t.shape(), &[2, 3, 4, 5]);
        assert_eq!(t.data()[7], s.data()[7].re);
        assert_eq!(t.data()[60 + 7], s.data()[7].im);
        assert_eq!(ComplexImageSequence::from_tensor(&t).unwrap(), s);
    }

    #[test]
    fn roundtrip_and_parseval() {
        let s = random_seq(32, 32, 4, 2);
        let k = fft2_per_frame(&s);
        assert!(ifft2_per_frame(&k).max_abs_diff(&s) < 1e-6);
        assert!((k.norm() - s.norm()).abs() < 1e-6 * s.norm());
    }

    #[test]
    fn full_mask_noiseless_forward_is_plain_fft() {
        let s = random_seq(8, 8, 2, 3);
        let mask = generate_mask(8, 8, 2, 1.0, 2, 0).unwrap();
        let k = forward_model(&s, &mask, NoiseModel::default(), 0).unwrap();
        assert_eq!(*k.samples(), fft2_per_frame(&s));
        assert!(zero_filled_recon(&k).max_abs_diff(&s) < 1e-6);
    }

    #[test]
    fn unsampled_entries_are_exactly_zero() {
        let s = random_seq(16, 16, 3, 4);
        let mask = generate_mask(16, 16, 3, 4.0, 2, 9).unwrap();
        let k = forward_model(&s, &mask, NoiseModel { sigma: 0.1 }, 5).unwrap();
        for t in 0..3 {
            for ky in 0..16 {
                let row = &k.samples().frame(t)[ky * 16..(ky + 1) * 16];
                if !mask.is_sampled(t, ky) {
                    assert!(row.iter().all(|c| c.re == 0.0 && c.im == 0.0));
                } else {
                    assert!(row.iter().any(|c| c.norm() > 0.0));
                }
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let s = random_seq(8, 8, 2, 3);
        let mask = generate_mask(8, 10, 2, 2.0, 2, 0).unwrap();
        assert!(forward_model(&s, &mask, NoiseModel::default(), 0).is_err());
    }

    #[test]
    fn zero_filled_matches_ifft_of_masked_fft() {
        let s = random_seq(12, 10, 3, 6);
        let mask = generate_mask(12, 10, 3, 3.0, 2, 1).unwrap();
        let k = forward_model(&s, &mask, NoiseModel::default(), 0).unwrap();
        let oracle = ifft2_per_frame(&undersampled_fft(&s, &mask).unwrap());
        assert_eq!(zero_filled_recon(&k), oracle);
    }
}
