//! TV-regularized compressed-sensing reconstruction
//!
//! ```text
//! min_S  1/2 ||F_u S - K_u||^2 + lambda * sum_pixels TV_eps(S)
//! ```
//!
//! solved by gradient descent from the zero-filled image. The data gradient is
//! `F_u^H (F_u S - K_u)`; the TV gradient comes from the tape.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::kspace::{
    undersampled_fft, undersampled_ifft, zero_filled_recon, ComplexImageSequence, KSpaceData,
};
use crate::losses::{tv_field, TvKind};
use crate::tensor::{Boundary, Tape};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub tv_kind: TvKind,
    pub smoothing_eps: f64,
    /// Halve the step and retry whenever the objective would increase.
    pub backtracking: bool,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            iterations: 100,
            step_size: 1.0,
            tv_kind: TvKind::Aniso,
            smoothing_eps: 1e-4,
            backtracking: true,
        }
    }
}

impl CsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid!(
                "cs.lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if self.iterations == 0 {
            return Err(invalid!("cs.iterations must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid!(
                "cs.step_size must be finite and > 0, got {}",
                self.step_size
            ));
        }
        if !(self.smoothing_eps >= 0.0 && self.smoothing_eps.is_finite()) {
            return Err(invalid!(
                "cs.smoothing_eps must be finite and >= 0, got {}",
                self.smoothing_eps
            ));
        }
        if self.tv_kind == TvKind::None {
            return Err(invalid!("cs.tv_kind must name a TV penalty, not none"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CsResult {
    /// Iterate with the lowest objective.
    pub image: ComplexImageSequence,
    /// Objective of the initial point and of every accepted iterate.
    pub trace: Vec<f64>,
    pub best_iteration: usize,
}

/// Objective value and gradient at `s`.
pub fn cs_objective(
    s: &ComplexImageSequence,
    k_u: &KSpaceData,
    config: &CsConfig,
) -> Result<(f64, ComplexImageSequence)> {
    let mask = k_u.mask();
    let mut residual = undersampled_fft(s, mask)?;
    for (r, k) in residual.data_mut().iter_mut().zip(k_u.samples().data()) {
        *r -= k;
    }
    let data = 0.5 * residual.norm().powi(2);
    let mut grad = undersampled_ifft(&residual, mask)?;
    if config.lambda == 0.0 {
        return Ok((data, grad));
    }
    let (nx, ny, nt) = s.geometry();
    let tape = Tape::<f64>::new();
    let x = tape.param(s.to_tensor::<f64>().reshape(&[1, 2, nt, ny, nx])?);
    let tv = tv_field(x, config.tv_kind, config.smoothing_eps, Boundary::Replicate)?
        .sum()
        .scale(config.lambda);
    let reg = tv.value().item()?;
    let g = tape.backward(tv)?;
    let gt = g
        .get(x)
        .ok_or_else(|| Error::Numerical("TV gradient missing".into()))?;
    let n = s.len();
    let (re, im) = gt.data().split_at(n);
    for ((c, &r), &i) in grad.data_mut().iter_mut().zip(re).zip(im) {
        c.re += r;
        c.im += i;
    }
    Ok((data + reg, grad))
}

fn step(s: &ComplexImageSequence, g: &ComplexImageSequence, h: f64) -> ComplexImageSequence {
    let mut out = s.clone();
    for (o, d) in out.data_mut().iter_mut().zip(g.data()) {
        *o -= d * h;
    }
    out
}

pub fn cs_reconstruct(k_u: &KSpaceData, config: &CsConfig) -> Result<CsResult> {
    config.validate()?;
    let mut s = zero_filled_recon(k_u);
    let (mut f, mut g) = cs_objective(&s, k_u, config)?;
    let f0 = f;
    let mut trace = vec![f];
    let mut h = config.step_size;
    let mut best = (f, s.clone(), 0);
    for it in 1..=config.iterations {
        let (next, fn_, gn) = loop {
            let cand = step(&s, &g, h);
            let (fc, gc) = cs_objective(&cand, k_u, config)?;
            if !fc.is_finite() || fc > 10.0 * f0.max(f64::MIN_POSITIVE) {
                if !config.backtracking {
                    return Err(Error::Numerical(format!(
                        "CS objective diverged at iteration {it}: {fc} > 10 x initial {f0}; trace {trace:?}"
                    )));
                }
            } else if fc <= f || !config.backtracking {
                break (cand, fc, gc);
            }
            h *= 0.5;
            if h < 1e-12 * config.step_size {
                // no decrease possible along the gradient: stationary to working precision
                return Ok(CsResult {
                    image: best.1,
                    trace,
                    best_iteration: best.2,
                });
            }
        };
        s = next;
        f = fn_;
        g = gn;
        trace.push(f);
        if f < best.0 {
            best = (f, s.clone(), it);
        }
    }
    Ok(CsResult {
        image: best.1,
        trace,
        best_iteration: best.2,
    })
}
