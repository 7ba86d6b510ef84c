//! Training losses: mean squared error and total-variation penalties on
//! two-channel complex images.
//!
//! Every TV variant is built from finite-difference stencils, elementwise
//! products and square roots on the tape, so gradients come for free. The
//! complex modulus of a difference field `d` is `sqrt(sum_c d_c^2)`, and the
//! real part of `a * conj(b)` is `sum_c a_c * b_c`.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::kspace::ComplexImageSequence;
use crate::tensor::{Boundary, Element, Stencil, Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TvKind {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "aniso")]
    Aniso,
    #[serde(rename = "iso")]
    Iso,
    #[serde(rename = "2dtv")]
    Hdtv2,
    #[serde(rename = "3dtv")]
    Hdtv3,
}

impl TvKind {
    pub const ALL: [TvKind; 4] = [TvKind::Aniso, TvKind::Iso, TvKind::Hdtv2, TvKind::Hdtv3];

    pub fn name(self) -> &'static str {
        match self {
            TvKind::None => "none",
            TvKind::Aniso => "aniso",
            TvKind::Iso => "iso",
            TvKind::Hdtv2 => "2dtv",
            TvKind::Hdtv3 => "3dtv",
        }
    }
}

impl std::fmt::Display for TvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TvKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TvKind::None),
            "aniso" => Ok(TvKind::Aniso),
            "iso" => Ok(TvKind::Iso),
            "2dtv" => Ok(TvKind::Hdtv2),
            "3dtv" => Ok(TvKind::Hdtv3),
            _ => Err(invalid!(
                "unknown tv kind '{s}' (expected none, aniso, iso, 2dtv or 3dtv)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tv_kind: TvKind,
    pub tv_weight: f64,
    pub smoothing_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tv_kind: TvKind::None,
            tv_weight: 0.0,
            smoothing_eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(invalid!(
                "tv_weight must be finite and >= 0, got {}",
                self.tv_weight
            ));
        }
        if !(self.smoothing_eps >= 0.0 && self.smoothing_eps.is_finite()) {
            return Err(invalid!(
                "smoothing_eps must be finite and >= 0, got {}",
                self.smoothing_eps
            ));
        }
        Ok(())
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss<'t, T: Element>(rec: Var<'t, T>, reference: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(rec.sub(reference)?.square().mean())
}

/// Finite-difference operators on the last two axes (`y`, `x`).
pub mod stencils {
    use super::*;

    const FWD: [(isize, f64); 2] = [(1, 1.0), (0, -1.0)];
    const ID: [(isize, f64); 1] = [(0, 1.0)];
    const CENTRAL1: [(isize, f64); 2] = [(1, 0.5), (-1, -0.5)];
    const CENTRAL2: [(isize, f64); 3] = [(1, 1.0), (0, -2.0), (-1, 1.0)];
    const CENTRAL3: [(isize, f64); 4] = [(2, 0.5), (1, -1.0), (-1, 1.0), (-2, -0.5)];

    pub fn dx(b: Boundary) -> Stencil {
        Stencil::outer(&ID, &FWD, b)
    }
    pub fn dy(b: Boundary) -> Stencil {
        Stencil::outer(&FWD, &ID, b)
    }
    pub fn dxx(b: Boundary) -> Stencil {
        Stencil::outer(&ID, &CENTRAL2, b)
    }
    pub fn dyy(b: Boundary) -> Stencil {
        Stencil::outer(&CENTRAL2, &ID, b)
    }
    pub fn dxy(b: Boundary) -> Stencil {
        Stencil::outer(&CENTRAL1, &CENTRAL1, b)
    }
    pub fn dxxx(b: Boundary) -> Stencil {
        Stencil::outer(&ID, &CENTRAL3, b)
    }
    pub fn dyyy(b: Boundary) -> Stencil {
        Stencil::outer(&CENTRAL3, &ID, b)
    }
    pub fn dxxy(b: Boundary) -> Stencil {
        Stencil::outer(&CENTRAL1, &CENTRAL2, b)
    }
    pub fn dxyy(b: Boundary) -> Stencil {
        Stencil::outer(&CENTRAL2, &CENTRAL1, b)
    }
}

fn check_two_channel<T: Element>(x: &Var<'_, T>) -> Result<()> {
    let s = x.shape();
    if s.len() != 5 || s[1] != 2 {
        return Err(invalid!(
            "TV expects a two-channel [N, 2, T, H, W] tensor, got {s:?}"
        ));
    }
    Ok(())
}

/// `sum_c a_c * b_c`: `|a|^2` when `a == b`, `Re(a conj b)` otherwise.
fn cdot<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    a.mul(b)?.sum_channels()
}

fn plus_const<'t, T: Element>(x: Var<'t, T>, c: f64) -> Result<Var<'t, T>> {
    if c == 0.0 {
        return Ok(x);
    }
    let k = x.tape().constant(Tensor::full(&x.shape(), T::cast(c)));
    x.add(k)
}

/// Pointwise TV integrand, shape `[N, 1, T, H, W]`.
///
/// `kind` must not be [`TvKind::None`].
pub fn tv_field<'t, T: Element>(
    x: Var<'t, T>,
    kind: TvKind,
    eps: f64,
    boundary: Boundary,
) -> Result<Var<'t, T>> {
    use stencils::*;
    check_two_channel(&x)?;
    let b = boundary;
    match kind {
        TvKind::None => Err(invalid!("tv_field called with tv_kind = none")),
        TvKind::Aniso => {
            let gx = x.stencil(&dx(b))?;
            let gy = x.stencil(&dy(b))?;
            let mx = plus_const(cdot(gx, gx)?, eps)?.sqrt();
            let my = plus_const(cdot(gy, gy)?, eps)?.sqrt();
            mx.add(my)
        }
        TvKind::Iso => {
            let gx = x.stencil(&dx(b))?;
            let gy = x.stencil(&dy(b))?;
            plus_const(cdot(gx, gx)?.add(cdot(gy, gy)?)?, eps).map(Var::sqrt)
        }
        TvKind::Hdtv2 => {
            let xx = x.stencil(&dxx(b))?;
            let yy = x.stencil(&dyy(b))?;
            let xy = x.stencil(&dxy(b))?;
            let t = cdot(xx, xx)?
                .add(cdot(yy, yy)?)?
                .scale(T::cast(3.0))
                .add(cdot(xy, xy)?.scale(T::cast(4.0)))?
                .add(cdot(xx, yy)?.scale(T::cast(2.0)))?
                .scale(T::cast(1.0 / 8.0));
            plus_const(t, eps).map(Var::sqrt)
        }
        TvKind::Hdtv3 => {
            let xxx = x.stencil(&dxxx(b))?;
            let yyy = x.stencil(&dyyy(b))?;
            let xxy = x.stencil(&dxxy(b))?;
            let xyy = x.stencil(&dxyy(b))?;
            let t = cdot(xxx, xxx)?
                .add(cdot(yyy, yyy)?)?
                .scale(T::cast(5.0))
                .add(cdot(xxx, xyy)?.add(cdot(yyy, xxy)?)?.scale(T::cast(6.0)))?
                .add(cdot(xxy, xxy)?.add(cdot(xyy, xyy)?)?.scale(T::cast(9.0)))?;
            Ok(plus_const(t, eps)?
                .sqrt()
                .scale(T::cast(1.0 / (4.0 * 2f64.sqrt()))))
        }
    }
}

/// TV penalty averaged over all pixels and frames (replicate boundary).
pub fn tv_loss<'t, T: Element>(x: Var<'t, T>, kind: TvKind, eps: f64) -> Result<Var<'t, T>> {
    Ok(tv_field(x, kind, eps, Boundary::Replicate)?.mean())
}

pub fn tv_aniso<'t, T: Element>(x: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    tv_loss(x, TvKind::Aniso, eps)
}

pub fn tv_iso<'t, T: Element>(x: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    tv_loss(x, TvKind::Iso, eps)
}

pub fn tv_2d_hdtv<'t, T: Element>(x: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    tv_loss(x, TvKind::Hdtv2, eps)
}

pub fn tv_3d_hdtv<'t, T: Element>(x: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    tv_loss(x, TvKind::Hdtv3, eps)
}

/// `mse + tv_weight * TV(rec)`; the TV term is skipped when its weight or kind is off.
pub fn total_loss<'t, T: Element>(
    rec: Var<'t, T>,
    reference: Var<'t, T>,
    config: &LossConfig,
) -> Result<Var<'t, T>> {
    let mse = mse_loss(rec, reference)?;
    if config.tv_kind == TvKind::None || config.tv_weight == 0.0 {
        return Ok(mse);
    }
    let tv = tv_loss(rec, config.tv_kind, config.smoothing_eps)?;
    mse.add(tv.scale(T::cast(config.tv_weight)))
}

/// Per-pixel-mean TV of a complex sequence, evaluated in f64.
pub fn tv_statistic(seq: &ComplexImageSequence, kind: TvKind, eps: f64) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let (nx, ny, nt) = seq.geometry();
    let x = tape.constant(seq.to_tensor::<f64>().reshape(&[1, 2, nt, ny, nx])?);
    let v = tv_loss(x, kind, eps)?.value().item()?;
    Ok(v)
}
