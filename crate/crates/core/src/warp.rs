//! Disparity-driven backward warping of a view toward the target view.
//!
//! Output pixel `(r, c)` samples the source bilinearly at
//! `(r + D(r,c)·Δu, c + D(r,c)·Δv)`. A sample is valid when it lies inside
//! `[0, H−1] × [0, W−1]`, i.e. every bilinear neighbour carrying weight is
//! in bounds. Invalid outputs are 0 and must be excluded by callers.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Bilinear footprint of one continuous sample position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    /// fractional row offset toward `r1`
    a: f64,
    /// fractional column offset toward `c1`
    b: f64,
}

impl Tap {
    /// `None` when the position falls outside the grid (or is NaN).
    #[inline]
    pub(crate) fn new(pr: f64, pc: f64, h: usize, w: usize) -> Option<Tap> {
        let (r0, r1, a) = axis_tap(pr, h)?;
        let (c0, c1, b) = axis_tap(pc, w)?;
        Some(Tap {
            r0,
            r1,
            c0,
            c1,
            a,
            b,
        })
    }

    #[inline]
    pub(crate) fn sample(&self, img: &ArrayView3<'_, f64>, ch: usize) -> f64 {
        let (a, b) = (self.a, self.b);
        let i00 = img[[self.r0, self.c0, ch]];
        let i01 = img[[self.r0, self.c1, ch]];
        let i10 = img[[self.r1, self.c0, ch]];
        let i11 = img[[self.r1, self.c1, ch]];
        (1.0 - a) * ((1.0 - b) * i00 + b * i01) + a * ((1.0 - b) * i10 + b * i11)
    }

    /// Sample value and its partial derivatives along rows and columns.
    #[inline]
    pub(crate) fn sample_with_grad(&self, img: &ArrayView3<'_, f64>, ch: usize) -> (f64, f64, f64) {
        let (a, b) = (self.a, self.b);
        let i00 = img[[self.r0, self.c0, ch]];
        let i01 = img[[self.r0, self.c1, ch]];
        let i10 = img[[self.r1, self.c0, ch]];
        let i11 = img[[self.r1, self.c1, ch]];
        let value = (1.0 - a) * ((1.0 - b) * i00 + b * i01) + a * ((1.0 - b) * i10 + b * i11);
        let d_row = (1.0 - b) * (i10 - i00) + b * (i11 - i01);
        let d_col = (1.0 - a) * (i01 - i00) + a * (i11 - i10);
        (value, d_row, d_col)
    }
}

#[inline]
fn axis_tap(p: f64, len: usize) -> Option<(usize, usize, f64)> {
    let last = (len - 1) as f64;
    if !(p >= 0.0 && p <= last) {
        return None;
    }
    if len == 1 {
        return Some((0, 0, 0.0));
    }
    let i = p.floor() as usize;
    if i == len - 1 {
        // exactly on the last line: interpolate from the left cell
        Some((len - 2, len - 1, 1.0))
    } else {
        Some((i, i + 1, p - i as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// `H × W × C`; 0 where invalid.
    pub image: Array3<f64>,
    pub validity: Array2<bool>,
}

impl WarpResult {
    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }
}

/// Warps `source` toward the target view given the target-aligned
/// `disparity` and the source's angular offset `(Δu, Δv) = u − u₀`.
pub fn warp_view(
    source: ArrayView3<'_, f64>,
    disparity: ArrayView2<'_, f64>,
    offset: (f64, f64),
) -> Result<WarpResult> {
    warp_impl(source, disparity, offset, false).map(|(w, _)| w)
}

/// Like [`warp_view`], also returning `∂output(r,c,ch)/∂D(r,c)`. Each
/// output pixel depends only on the disparity at the same pixel, so this is
/// the full Jacobian. The derivative is 0 at invalid pixels.
pub fn warp_view_with_grad(
    source: ArrayView3<'_, f64>,
    disparity: ArrayView2<'_, f64>,
    offset: (f64, f64),
) -> Result<(WarpResult, Array3<f64>)> {
    warp_impl(source, disparity, offset, true).map(|(w, g)| (w, g.expect("gradient requested")))
}

fn warp_impl(
    source: ArrayView3<'_, f64>,
    disparity: ArrayView2<'_, f64>,
    (du, dv): (f64, f64),
    with_grad: bool,
) -> Result<(WarpResult, Option<Array3<f64>>)> {
    let (h, w, c) = source.dim();
    if disparity.dim() != (h, w) {
        return Err(Error::mismatch(
            "disparity extent",
            format!("{h}x{w}"),
            format!("{:?}", disparity.dim()),
        ));
    }
    if let Some(bad) = disparity.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("disparity value {bad}")));
    }
    let mut image = Array3::zeros((h, w, c));
    let mut validity = Array2::from_elem((h, w), false);
    let mut grad = with_grad.then(|| Array3::zeros((h, w, c)));
    for r in 0..h {
        for col in 0..w {
            let d = disparity[[r, col]];
            let Some(tap) = Tap::new(r as f64 + d * du, col as f64 + d * dv, h, w) else {
                continue;
            };
            validity[[r, col]] = true;
            for ch in 0..c {
                if let Some(g) = grad.as_mut() {
                    let (value, d_row, d_col) = tap.sample_with_grad(&source, ch);
                    image[[r, col, ch]] = value;
                    g[[r, col, ch]] = d_row * du + d_col * dv;
                } else {
                    image[[r, col, ch]] = tap.sample(&source, ch);
                }
            }
        }
    }
    Ok((WarpResult { image, validity }, grad))
}
