//! Synthetic dynamic phantoms, patch shearing, simulated measurements,
//! dataset files and image-quality metrics.

mod format;
mod metrics;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::kspace::{forward_model, ComplexImageSequence, KSpaceData, MaskConfig, NoiseModel};
use crate::Result;

pub use format::{
    decode_dataset, encode_dataset, payload_crc, read_dataset, write_dataset, DATASET_MAGIC,
};
pub use metrics::{metric_mse, metric_psnr, metric_ssim, ssim_with_range};
pub use phantom::{generate_phantom, PhantomConfig};

/// Patch extents `(x, y, t)` and strides for [`shear_patches`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: [117, 120, 6],
            stride: [7, 7, 5],
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) || self.stride.contains(&0) {
            return Err(invalid!(
                "patch size and stride must be >= 1, got {:?} / {:?}",
                self.size,
                self.stride
            ));
        }
        Ok(())
    }

    /// Number of patches along each axis of an `(nx, ny, nt)` volume.
    pub fn counts(&self, geometry: (usize, usize, usize)) -> Result<[usize; 3]> {
        self.validate()?;
        let dims = [geometry.0, geometry.1, geometry.2];
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = patch_count(dims[a], self.size[a], self.stride[a])
                .ok_or_else(|| invalid!("patch {:?} exceeds volume {:?}", self.size, dims))?;
        }
        Ok(out)
    }
}

/// `floor((len - patch) / stride) + 1`, or `None` when the patch does not fit.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> Option<usize> {
    (patch <= len && stride > 0).then(|| (len - patch) / stride + 1)
}

/// All patches at offsets `(i sx, j sy, k st)` lying fully inside `volume`,
/// ordered t-offset slowest, x-offset fastest.
pub fn shear_patches(
    volume: &ComplexImageSequence,
    spec: &PatchSpec,
) -> Result<Vec<ComplexImageSequence>> {
    let [cx, cy, ct] = spec.counts(volume.geometry())?;
    let [px, py, pt] = spec.size;
    let [sx, sy, st] = spec.stride;
    let mut out = Vec::with_capacity(cx * cy * ct);
    for k in 0..ct {
        for j in 0..cy {
            for i in 0..cx {
                let (ox, oy, ot) = (i * sx, j * sy, k * st);
                out.push(ComplexImageSequence::from_fn(px, py, pt, |x, y, t| {
                    volume.at(ox + x, oy + y, ot + t)
                })?);
            }
        }
    }
    Ok(out)
}

/// A reference image and its simulated undersampled measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub reference: ComplexImageSequence,
    pub k_u: KSpaceData,
}

/// Simulates `K_u` for each reference with its own mask and noise draw.
///
/// Record `i` uses mask seed `seed + 2i` and noise seed `seed + 2i + 1`.
pub fn simulate_samples(
    references: &[ComplexImageSequence],
    mask: &MaskConfig,
    noise: NoiseModel,
    seed: u64,
) -> Result<Vec<Sample>> {
    references
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = seed.wrapping_add(2 * i as u64);
            let (nx, ny, nt) = r.geometry();
            let m = mask.generate(nx, ny, nt, s)?;
            let k_u = forward_model(r, &m, noise, s.wrapping_add(1))?;
            Ok(Sample {
                reference: r.clone(),
                k_u,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn count_formula_examples() {
        assert_eq!(patch_count(192, 117, 7), Some(11));
        assert_eq!(patch_count(25, 6, 5), Some(4));
        assert_eq!(patch_count(5, 6, 1), None);
    }

    #[test]
    fn whole_volume_patch() {
        let v = ComplexImageSequence::from_fn(5, 4, 3, |x, y, t| {
            Complex64::new(x as f64, (y * t) as f64)
        })
        .unwrap();
        let p = shear_patches(
            &v,
            &PatchSpec {
                size: [5, 4, 3],
                stride: [2, 2, 2],
            },
        )
        .unwrap();
        assert_eq!(p, vec![v]);
    }

    #[test]
    fn patches_match_exhaustive_enumeration_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (nx, ny, nt) = (
                rng.random_range(1..9),
                rng.random_range(1..9),
                rng.random_range(1..6),
            );
            let v = ComplexImageSequence::from_fn(nx, ny, nt, |x, y, t| {
                Complex64::new((x + 10 * y) as f64, t as f64)
            })
            .unwrap();
            let spec = PatchSpec {
                size: [
                    rng.random_range(1..=nx),
                    rng.random_range(1..=ny),
                    rng.random_range(1..=nt),
                ],
                stride: [
                    rng.random_range(1..4),
                    rng.random_range(1..4),
                    rng.random_range(1..4),
                ],
            };
            let mut offsets = Vec::new();
            for ot in 0..nt {
                for oy in 0..ny {
                    for ox in 0..nx {
                        let fits = ox + spec.size[0] <= nx
                            && oy + spec.size[1] <= ny
                            && ot + spec.size[2] <= nt;
                        let aligned = ox % spec.stride[0] == 0
                            && oy % spec.stride[1] == 0
                            && ot % spec.stride[2] == 0;
                        if fits && aligned {
                            offsets.push((ox, oy, ot));
                        }
                    }
                }
            }
            let patches = shear_patches(&v, &spec).unwrap();
            assert_eq!(patches.len(), offsets.len());
            for (p, &(ox, oy, ot)) in patches.iter().zip(&offsets) {
                assert_eq!(p.at(0, 0, 0), v.at(ox, oy, ot));
                let (lx, ly, lt) = (spec.size[0] - 1, spec.size[1] - 1, spec.size[2] - 1);
                assert_eq!(p.at(lx, ly, lt), v.at(ox + lx, oy + ly, ot + lt));
            }
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let v = ComplexImageSequence::zeros(8, 8, 4);
        assert!(shear_patches(&v, &PatchSpec::default()).is_err());
    }

    #[test]
    fn simulated_samples_are_seeded() {
        let refs: Vec<_> = (0..3)
            .map(|s| {
                generate_phantom(&PhantomConfig {
                    seed: s,
                    ..PhantomConfig::default()
                })
                .unwrap()
            })
            .collect();
        let a = simulate_samples(&refs, &MaskConfig::default(), NoiseModel::default(), 5).unwrap();
        let b = simulate_samples(&refs, &MaskConfig::default(), NoiseModel::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].k_u.mask(), a[1].k_u.mask());
    }
}
