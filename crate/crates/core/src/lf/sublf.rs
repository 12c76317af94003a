//! Quadrant sub-light-fields and the paired angular/spatial flips that bring
//! each of them into the orientation of quadrant 1.

use std::ops::Range;

use ndarray::{Array2, Array3, Array5, ArrayView2, Axis};

use super::LightField;
use crate::error::{Error, Result};

/// One of the four angular quadrants sharing the central view.
///
/// Quadrant 1 holds the views with `u ≤ u₀, v ≤ v₀`, quadrant 2 `u ≤ u₀,
/// v ≥ v₀`, quadrant 3 `u ≥ u₀, v ≤ v₀` and quadrant 4 `u ≥ u₀, v ≥ v₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Q1, Quadrant::Q2, Quadrant::Q3, Quadrant::Q4];

    /// 1-based identifier.
    pub fn id(self) -> u8 {
        self.index() as u8 + 1
    }

    /// 0-based position in [`Quadrant::ALL`].
    pub fn index(self) -> usize {
        match self {
            Quadrant::Q1 => 0,
            Quadrant::Q2 => 1,
            Quadrant::Q3 => 2,
            Quadrant::Q4 => 3,
        }
    }

    /// Whether the transform reverses the `x` (row) and `u` axes.
    pub fn flips_rows(self) -> bool {
        matches!(self, Quadrant::Q3 | Quadrant::Q4)
    }

    /// Whether the transform reverses the `y` (column) and `v` axes.
    pub fn flips_cols(self) -> bool {
        matches!(self, Quadrant::Q2 | Quadrant::Q4)
    }

    /// Angular index ranges `(u, v)` of this quadrant in an `M×N` grid.
    pub fn angular_ranges(self, m: usize, n: usize) -> (Range<usize>, Range<usize>) {
        let (u0, v0) = ((m - 1) / 2, (n - 1) / 2);
        let us = if self.flips_rows() { u0..m } else { 0..u0 + 1 };
        let vs = if self.flips_cols() { v0..n } else { 0..v0 + 1 };
        (us, vs)
    }

    /// Whether angular position `(u, v)` of an `M×N` grid belongs to this
    /// quadrant.
    pub fn contains(self, m: usize, n: usize, u: usize, v: usize) -> bool {
        let (us, vs) = self.angular_ranges(m, n);
        us.contains(&u) && vs.contains(&v)
    }
}

impl TryFrom<u8> for Quadrant {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Quadrant::Q1),
            2 => Ok(Quadrant::Q2),
            3 => Ok(Quadrant::Q3),
            4 => Ok(Quadrant::Q4),
            _ => Err(Error::InvalidArgument(format!(
                "quadrant id {id} outside 1..=4"
            ))),
        }
    }
}

/// A quadrant subset of views, `[u, v, row, col, channel]` like
/// [`LightField`] but with even angular extents allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct SubLightField {
    quadrant: Quadrant,
    data: Array5<f64>,
    transformed: bool,
}

impl SubLightField {
    pub fn quadrant(&self) -> Quadrant {
        self.quadrant
    }

    pub fn is_transformed(&self) -> bool {
        self.transformed
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.data
    }

    pub fn angular(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.2, d.3)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().4
    }

    /// Angular position of the full light field's central view inside this
    /// sub-light-field.
    pub fn target_index(&self) -> (usize, usize) {
        let (m0, n0) = self.angular();
        // Quadrants past the centre on an axis start at the target; the
        // transform reverses that axis and moves it to the far end.
        let at_end = |flips: bool, len: usize| {
            if flips && !self.transformed {
                0
            } else {
                len - 1
            }
        };
        (
            at_end(self.quadrant.flips_rows(), m0),
            at_end(self.quadrant.flips_cols(), n0),
        )
    }

    /// Applies the quadrant's 4-D flip. Flips are involutions, so applying
    /// this to a transformed sub-light-field restores the original.
    pub fn transform(&self) -> SubLightField {
        let mut data = self.data.view();
        if self.quadrant.flips_rows() {
            data.invert_axis(Axis(0));
            data.invert_axis(Axis(2));
        }
        if self.quadrant.flips_cols() {
            data.invert_axis(Axis(1));
            data.invert_axis(Axis(3));
        }
        SubLightField {
            quadrant: self.quadrant,
            data: data.as_standard_layout().into_owned(),
            transformed: !self.transformed,
        }
    }

    /// Views stacked along a leading channel axis, `(views·C) × H × W` in
    /// single precision: channel `(u·N₀ + v)·C + c` holds color `c` of view
    /// `(u, v)`.
    pub fn stack_channels(&self) -> Array3<f32> {
        stack_views(&self.data)
    }
}

pub(crate) fn stack_views(data: &Array5<f64>) -> Array3<f32> {
    let (m, n, h, w, c) = data.dim();
    let mut out = Array3::zeros((m * n * c, h, w));
    for u in 0..m {
        for v in 0..n {
            for ch in 0..c {
                let k = (u * n + v) * c + ch;
                let src = data.slice(ndarray::s![u, v, .., .., ch]);
                out.index_axis_mut(Axis(0), k)
                    .zip_mut_with(&src, |o, &s| *o = s as f32);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubLfBundle {
    pub subs: [SubLightField; 4],
}

impl SubLfBundle {
    pub fn get(&self, q: Quadrant) -> &SubLightField {
        &self.subs[q.index()]
    }

    pub fn is_transformed(&self) -> bool {
        self.subs[0].transformed
    }

    /// Transforms (or un-transforms) every member.
    pub fn transformed(&self) -> SubLfBundle {
        SubLfBundle {
            subs: std::array::from_fn(|i| self.subs[i].transform()),
        }
    }
}

/// Splits a light field into its four quadrant sub-light-fields, each of
/// `M₀×N₀` views and all sharing the central view.
pub fn generate_sub_lfs(lf: &LightField) -> SubLfBundle {
    let (m, n) = lf.angular();
    let subs = Quadrant::ALL.map(|q| {
        let (us, vs) = q.angular_ranges(m, n);
        let data = lf
            .data()
            .slice(ndarray::s![us, vs, .., .., ..])
            .to_owned();
        SubLightField {
            quadrant: q,
            data,
            transformed: false,
        }
    });
    SubLfBundle { subs }
}

/// Applies the 4-D flip of `quadrant_id` (1..=4) to a sub-light-field of
/// that quadrant.
pub fn transform_sub_lf(sub: &SubLightField, quadrant_id: u8) -> Result<SubLightField> {
    let q = Quadrant::try_from(quadrant_id)?;
    if q != sub.quadrant {
        return Err(Error::InvalidArgument(format!(
            "sub-light-field of quadrant {} transformed as quadrant {}",
            sub.quadrant.id(),
            q.id()
        )));
    }
    Ok(sub.transform())
}

/// Inverts the spatial part of a quadrant's transform on a 2-D map.
/// Disparity values need no sign change because the paired angular flip
/// negates the angular offset together with the spatial axis.
pub fn back_transform_map<T: Clone>(map: ArrayView2<'_, T>, quadrant: Quadrant) -> Array2<T> {
    let mut view = map;
    if quadrant.flips_rows() {
        view.invert_axis(Axis(0));
    }
    if quadrant.flips_cols() {
        view.invert_axis(Axis(1));
    }
    view.as_standard_layout().into_owned()
}
