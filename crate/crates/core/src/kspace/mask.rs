use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ComplexImageSequence;
use crate::error::invalid;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

const MASK_MAGIC: &[u8; 8] = b"DMRIMSK1";

/// Undersampling parameters for [`generate_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub acceleration: f64,
    pub acs_lines: usize,
    /// Standard deviation of the Gaussian line density, in ky lines.
    /// `None` means `ny / 6`.
    pub density_std: Option<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            acceleration: 4.0,
            acs_lines: 6,
            density_std: None,
        }
    }
}

impl MaskConfig {
    pub fn generate(&self, nx: usize, ny: usize, nt: usize, seed: u64) -> Result<SamplingMask> {
        let std = self.density_std.unwrap_or(ny as f64 / 6.0);
        generate_mask_with_density(nx, ny, nt, self.acceleration, self.acs_lines, std, seed)
    }
}

/// Binary k-t mask: one bit per `(t, ky)` phase-encode line, fully sampled along kx.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    nx: usize,
    ny: usize,
    nt: usize,
    lines: Vec<bool>,
    acs_lines: usize,
    acceleration: f64,
}

/// First ky index of the centered ACS block. The DC line sits at `ny / 2`;
/// for odd counts the extra line goes to the negative-frequency side.
fn acs_start(ny: usize, acs_lines: usize) -> usize {
    let start = (ny / 2).saturating_sub(acs_lines.div_ceil(2));
    start.min(ny - acs_lines)
}

/// k-t mask with `acs_lines` central lines in every frame and the remaining
/// `ceil(ny / R) - acs_lines` lines per frame drawn without replacement from a
/// zero-mean Gaussian density over the centered ky index (std `ny / 6`).
pub fn generate_mask(
    nx: usize,
    ny: usize,
    nt: usize,
    acceleration: f64,
    acs_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    generate_mask_with_density(nx, ny, nt, acceleration, acs_lines, ny as f64 / 6.0, seed)
}

pub fn generate_mask_with_density(
    nx: usize,
    ny: usize,
    nt: usize,
    acceleration: f64,
    acs_lines: usize,
    density_std: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if nx == 0 || ny == 0 || nt == 0 {
        return Err(invalid!(
            "mask extents must be positive, got {nx}x{ny}x{nt}"
        ));
    }
    if !(acceleration >= 1.0 && acceleration.is_finite()) {
        return Err(invalid!(
            "acceleration must be a finite value >= 1, got {acceleration}"
        ));
    }
    if acs_lines > ny {
        return Err(invalid!("acs_lines {acs_lines} exceeds ny {ny}"));
    }
    if !(density_std > 0.0 && density_std.is_finite()) {
        return Err(invalid!(
            "density std must be positive and finite, got {density_std}"
        ));
    }
    let per_frame = (ny as f64 / acceleration).ceil() as usize;
    if per_frame < acs_lines {
        return Err(invalid!(
            "ceil(ny / R) = {per_frame} lines cannot hold {acs_lines} ACS lines (ny {ny}, R {acceleration})"
        ));
    }

    let acs = acs_start(ny, acs_lines)..acs_start(ny, acs_lines) + acs_lines;
    let center = (ny / 2) as f64;
    let candidates: Vec<(usize, f64)> = (0..ny)
        .filter(|ky| !acs.contains(ky))
        .map(|ky| {
            let c = ky as f64 - center;
            (ky, (-c * c / (2.0 * density_std * density_std)).exp())
        })
        .collect();
    let extra = per_frame - acs_lines;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = vec![false; nt * ny];
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for t in 0..nt {
        let frame = &mut lines[t * ny..(t + 1) * ny];
        frame[acs.clone()].fill(true);
        // Weighted sampling without replacement: keep the `extra` largest
        // ln(u) / w keys (equivalent to sequential proportional draws).
        keys.clear();
        for &(ky, w) in &candidates {
            let u: f64 = 1.0 - rng.random::<f64>();
            let key = if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            };
            keys.push((key, ky));
        }
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, ky) in keys.iter().take(extra) {
            frame[ky] = true;
        }
    }
    Ok(SamplingMask {
        nx,
        ny,
        nt,
        lines,
        acs_lines,
        acceleration,
    })
}

impl SamplingMask {
    /// Mask with every line sampled.
    pub fn full(nx: usize, ny: usize, nt: usize) -> Self {
        Self {
            nx,
            ny,
            nt,
            lines: vec![true; nt * ny],
            acs_lines: ny,
            acceleration: 1.0,
        }
    }

    /// Mask from explicit `(t, ky)` line bits (t-major).
    pub fn from_lines(
        nx: usize,
        ny: usize,
        nt: usize,
        lines: Vec<bool>,
        acs_lines: usize,
        acceleration: f64,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || nt == 0 || lines.len() != nt * ny {
            return Err(invalid!(
                "{} line bits do not fit a {nx}x{ny}x{nt} mask",
                lines.len()
            ));
        }
        Ok(Self {
            nx,
            ny,
            nt,
            lines,
            acs_lines,
            acceleration,
        })
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nt)
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    /// ky indices of the ACS block.
    pub fn acs_range(&self) -> std::ops::Range<usize> {
        let s = acs_start(self.ny, self.acs_lines);
        s..s + self.acs_lines
    }

    pub fn is_sampled(&self, t: usize, ky: usize) -> bool {
        self.lines[t * self.ny + ky]
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn lines_in_frame(&self, t: usize) -> usize {
        self.lines[t * self.ny..(t + 1) * self.ny]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Fraction of all k-t samples acquired.
    pub fn sampled_fraction(&self) -> f64 {
        self.lines.iter().filter(|&&b| b).count() as f64 / self.lines.len() as f64
    }

    /// Per-ky fraction of frames in which the line is sampled.
    pub fn line_frequency(&self) -> Vec<f64> {
        (0..self.ny)
            .map(|ky| {
                (0..self.nt).filter(|&t| self.is_sampled(t, ky)).count() as f64 / self.nt as f64
            })
            .collect()
    }

    pub(crate) fn check_geometry(&self, s: &ComplexImageSequence) -> Result<()> {
        if s.geometry() != self.geometry() {
            return Err(invalid!(
                "mask geometry {:?} does not match data geometry {:?}",
                self.geometry(),
                s.geometry()
            ));
        }
        Ok(())
    }

    /// Zeroes every unsampled entry of `k` in place.
    pub fn apply(&self, k: &mut ComplexImageSequence) {
        let nx = self.nx;
        for (row, &keep) in k.data_mut().chunks_mut(nx).zip(&self.lines) {
            if !keep {
                row.fill(num_complex::Complex64::new(0.0, 0.0));
            }
        }
    }

    /// Dense 0/1 tensor `[1, channels, nt, ny, nx]` broadcast over kx and channels.
    pub fn to_tensor<T: Element>(&self, channels: usize) -> Tensor<T> {
        let plane: Vec<T> = self
            .lines
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { T::one() } else { T::zero() }, self.nx))
            .collect();
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Tensor::new(&[1, channels, self.nt, self.ny, self.nx], data)
            .expect("mask geometry is positive")
    }

    /// Binary k-t picture: width `nt`, height `ny`, white where sampled.
    pub fn write_pgm(&self, mut out: impl Write) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.nt, self.ny)?;
        let mut pixels = Vec::with_capacity(self.nt * self.ny);
        for ky in 0..self.ny {
            for t in 0..self.nt {
                pixels.push(if self.is_sampled(t, ky) { 255u8 } else { 0 });
            }
        }
        out.write_all(&pixels)?;
        Ok(())
    }

    /// Raw bitset: `DMRIMSK1`, u32 nx, ny, nt, acs_lines, f64 acceleration
    /// (all little-endian), line bits packed LSB-first in `(t, ky)` order,
    /// then a CRC-32 of the packed bits.
    pub fn write_bitset(&self, mut out: impl Write) -> Result<()> {
        let mut header = Vec::with_capacity(32);
        header.extend_from_slice(MASK_MAGIC);
        for v in [self.nx, self.ny, self.nt, self.acs_lines] {
            header.extend_from_slice(
                &u32::try_from(v)
                    .map_err(|_| invalid!("mask extent {v} exceeds u32"))?
                    .to_le_bytes(),
            );
        }
        header.extend_from_slice(&self.acceleration.to_le_bytes());
        let mut bits = vec![0u8; self.lines.len().div_ceil(8)];
        for (i, &b) in self.lines.iter().enumerate() {
            if b {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.write_all(&header)?;
        out.write_all(&bits)?;
        out.write_all(&crc32fast::hash(&bits).to_le_bytes())?;
        Ok(())
    }

    pub fn read_bitset(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let fmt = |m: &str| Error::Format(format!("mask file: {m}"));
        if bytes.len() < 32 || &bytes[..8] != MASK_MAGIC {
            return Err(fmt("bad magic or truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (nx, ny, nt, acs_lines) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let acceleration = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let nbits = ny.checked_mul(nt).ok_or_else(|| fmt("overflow"))?;
        let nbytes = nbits.div_ceil(8);
        if bytes.len() != 32 + nbytes + 4 {
            return Err(fmt("length does not match header"));
        }
        let bits = &bytes[32..32 + nbytes];
        let crc = u32::from_le_bytes(bytes[32 + nbytes..].try_into().unwrap());
        if crc32fast::hash(bits) != crc {
            return Err(fmt("CRC mismatch"));
        }
        let lines = (0..nbits)
            .map(|i| bits[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        Self::from_lines(nx, ny, nt, lines, acs_lines, acceleration)
            .map_err(|e| fmt(&e.to_string()))
    }
}
