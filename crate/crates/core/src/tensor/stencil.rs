use super::{Element, Tensor};
use crate::error::invalid;
use crate::Result;

/// How taps falling outside the frame are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Clamp to the nearest edge sample (Neumann).
    Replicate,
    /// Wrap around (periodic).
    Circular,
}

impl Boundary {
    fn resolve(self, i: isize, len: usize) -> usize {
        let n = len as isize;
        match self {
            Boundary::Replicate => i.clamp(0, n - 1) as usize,
            Boundary::Circular => i.rem_euclid(n) as usize,
        }
    }
}

/// A linear filter over the last two axes `(H, W)` of a tensor.
///
/// `out[.., y, x] = sum_k w_k * in[.., y + dy_k, x + dx_k]`, with each tap's
/// coordinate resolved independently through the boundary rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    taps: Vec<(isize, isize, f64)>,
    boundary: Boundary,
}

impl Stencil {
    /// Taps are `(dy, dx, weight)`.
    pub fn new(taps: Vec<(isize, isize, f64)>, boundary: Boundary) -> Self {
        Self { taps, boundary }
    }

    pub fn taps(&self) -> &[(isize, isize, f64)] {
        &self.taps
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Separable product of an x-stencil and a y-stencil (1-D tap lists of `(offset, weight)`).
    pub fn outer(ys: &[(isize, f64)], xs: &[(isize, f64)], boundary: Boundary) -> Self {
        let taps = ys
            .iter()
            .flat_map(|&(dy, wy)| xs.iter().map(move |&(dx, wx)| (dy, dx, wy * wx)))
            .filter(|t| t.2 != 0.0)
            .collect();
        Self { taps, boundary }
    }

    fn frame_dims<T: Element>(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() < 2 {
            return Err(invalid!("stencil needs at least 2 axes, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((x.len() / (h * w), h, w))
    }

    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (planes, h, w) = self.frame_dims(x)?;
        let mut out = vec![T::zero(); x.len()];
        let src = x.data();
        for (wgt, offsets) in self.resolved(h, w) {
            let wgt = T::cast(wgt);
            for p in 0..planes {
                let base = p * h * w;
                let o = &mut out[base..base + h * w];
                let s = &src[base..base + h * w];
                for (dst, &from) in o.iter_mut().zip(&offsets) {
                    *dst = *dst + wgt * s[from];
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn apply_adjoint<T: Element>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (planes, h, w) = self.frame_dims(g)?;
        let mut out = vec![T::zero(); g.len()];
        let src = g.data();
        for (wgt, offsets) in self.resolved(h, w) {
            let wgt = T::cast(wgt);
            for p in 0..planes {
                let base = p * h * w;
                let gs = &src[base..base + h * w];
                let o = &mut out[base..base + h * w];
                for (&gv, &to) in gs.iter().zip(&offsets) {
                    o[to] = o[to] + wgt * gv;
                }
            }
        }
        Tensor::new(g.shape(), out)
    }

    /// Per tap, the source index within a frame for every output pixel.
    fn resolved(&self, h: usize, w: usize) -> Vec<(f64, Vec<usize>)> {
        self.taps
            .iter()
            .map(|&(dy, dx, wgt)| {
                let idx = (0..h)
                    .flat_map(|y| {
                        let yy = self.boundary.resolve(y as isize + dy, h);
                        (0..w).map(move |x| (yy, x))
                    })
                    .map(|(yy, x)| yy * w + self.boundary.resolve(x as isize + dx, w))
                    .collect();
                (wgt, idx)
            })
            .collect()
    }
}
