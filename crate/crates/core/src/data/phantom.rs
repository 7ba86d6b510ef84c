use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::kspace::ComplexImageSequence;
use crate::Result;

/// Synthetic dynamic phantom: moving, pulsating ellipses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub num_ellipses: usize,
    /// Per-ellipse motion amplitude range. An amplitude `a` scales the radius
    /// by `1 + a sin(.)` and translates the center by up to `a` times the
    /// field of view.
    pub motion_amplitude: [f64; 2],
    /// Motion cycles per sequence.
    pub motion_frequency: [f64; 2],
    pub contrast: [f64; 2],
    /// Multiply by a smooth low-order phase map.
    pub smooth_phase: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            nx: 32,
            ny: 32,
            nt: 8,
            num_ellipses: 6,
            motion_amplitude: [0.02, 0.08],
            motion_frequency: [0.5, 1.5],
            contrast: [0.2, 1.0],
            smooth_phase: true,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]) {
        return Err(invalid!(
            "phantom.{name} must be an ordered range with values >= {min}, got {r:?}"
        ));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 16 || self.ny < 16 {
            return Err(invalid!(
                "phantom extents must be >= 16, got {}x{}",
                self.nx,
                self.ny
            ));
        }
        if self.nt < 2 {
            return Err(invalid!("phantom needs nt >= 2, got {}", self.nt));
        }
        check_range("motion_amplitude", self.motion_amplitude, 0.0)?;
        check_range("motion_frequency", self.motion_frequency, 0.0)?;
        check_range("contrast", self.contrast, 0.0)?;
        if self.motion_amplitude[1] >= 1.0 {
            return Err(invalid!(
                "phantom.motion_amplitude must stay below 1, got {:?}",
                self.motion_amplitude
            ));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    contrast: f64,
    amplitude: f64,
    freq: f64,
    phase: f64,
    direction: f64,
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Sum of ellipse indicators with per-ellipse contrast, normalized so the
/// largest magnitude is 1. Coordinates are in units of the field of view,
/// centered at 0.
pub fn generate_phantom(config: &PhantomConfig) -> Result<ComplexImageSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ellipses: Vec<Ellipse> = (0..config.num_ellipses)
        .map(|i| {
            // the first ellipse is a large "body" the others sit in
            let (c, a) = if i == 0 {
                (0.05, [0.3, 0.42])
            } else {
                (0.22, [0.06, 0.18])
            };
            Ellipse {
                cx: rng.random_range(-c..=c),
                cy: rng.random_range(-c..=c),
                ax: draw(&mut rng, a),
                ay: draw(&mut rng, a),
                angle: rng.random_range(0.0..PI),
                contrast: draw(&mut rng, config.contrast),
                amplitude: draw(&mut rng, config.motion_amplitude),
                freq: draw(&mut rng, config.motion_frequency),
                phase: rng.random_range(0.0..2.0 * PI),
                direction: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let phase_coef: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let (nx, ny, nt) = (config.nx, config.ny, config.nt);
    let mut seq = ComplexImageSequence::from_fn(nx, ny, nt, |x, y, t| {
        let u = (x as f64 + 0.5) / nx as f64 - 0.5;
        let v = (y as f64 + 0.5) / ny as f64 - 0.5;
        let mut m = 0.0;
        for e in &ellipses {
            let s = (2.0 * PI * e.freq * t as f64 / nt as f64 + e.phase).sin();
            let scale = 1.0 + e.amplitude * s;
            let (cx, cy) = (
                e.cx + e.amplitude * s * e.direction.cos(),
                e.cy + e.amplitude * s * e.direction.sin(),
            );
            let (du, dv) = (u - cx, v - cy);
            let (ca, sa) = (e.angle.cos(), e.angle.sin());
            let (p, q) = (du * ca + dv * sa, -du * sa + dv * ca);
            if (p / (e.ax * scale)).powi(2) + (q / (e.ay * scale)).powi(2) <= 1.0 {
                m += e.contrast;
            }
        }
        let phi = if config.smooth_phase {
            0.5 * PI * (phase_coef[0] * u + phase_coef[1] * v + phase_coef[2] * u * v)
        } else {
            0.0
        };
        Complex64::from_polar(m, phi)
    })?;
    let peak = seq.magnitude().into_iter().fold(0.0, f64::max);
    if peak > 0.0 {
        for c in seq.data_mut() {
            *c /= peak;
        }
    }
    Ok(seq)
}
