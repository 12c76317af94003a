//! Light-field data model.
//!
//! A light field is stored view-major as a 5-D array indexed
//! `[u, v, row, col, channel]`: `u` runs over the `M` angular rows and `v`
//! over the `N` angular columns, with `v` varying fastest when views are
//! listed in order. Spatial `row` is the `x` axis (extent `H`) and `col` is
//! the `y` axis (extent `W`), so a disparity `d` shifts view `(u, v)` by
//! `d·(u − u₀)` rows and `d·(v − v₀)` columns.
//!
//! All indices are 0-based. The central view of an `M×N` grid sits at
//! `((M − 1)/2, (N − 1)/2)`, which is `((M + 1)/2, (N + 1)/2)` in 1-based
//! notation.

mod patch;
mod sublf;
mod synth;

pub use patch::{refocused_angular_patch, AngularPatch};
pub use sublf::{
    back_transform_map, generate_sub_lfs, transform_sub_lf, Quadrant, SubLfBundle, SubLightField,
};
pub use synth::{synth_scene, Rect, SceneConfig, SceneLayout, SyntheticScene};

use ndarray::{s, Array3, Array5, ArrayView3, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    data: Array5<f64>,
    disparity_range: Option<(f64, f64)>,
}

impl LightField {
    /// Wraps a `[u, v, row, col, channel]` array after validating the
    /// geometry and intensity invariants.
    pub fn new(data: Array5<f64>) -> Result<Self> {
        let (m, n, h, w, c) = data.dim();
        check_angular(m, n)?;
        if h < 2 || w < 2 {
            return Err(Error::UnsupportedGeometry(format!(
                "spatial extent {h}x{w} is smaller than 2x2"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::UnsupportedGeometry(format!(
                "{c} color channels (expected 1 or 3)"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidArgument(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            data,
            disparity_range: None,
        })
    }

    /// Builds a light field from views listed row-major in `(u, v)` with `v`
    /// fastest. Each view is `row × col × channel`.
    pub fn from_views(views: &[Array3<f64>], angular: (usize, usize)) -> Result<Self> {
        let (m, n) = angular;
        check_angular(m, n)?;
        if views.len() != m * n {
            return Err(Error::mismatch(
                "view count",
                format!("{} ({m}x{n})", m * n),
                views.len(),
            ));
        }
        let first = views[0].dim();
        for (i, view) in views.iter().enumerate() {
            if view.dim() != first {
                return Err(Error::mismatch(
                    format!("view {i} (u={}, v={})", i / n, i % n),
                    format!("{first:?}"),
                    format!("{:?}", view.dim()),
                ));
            }
        }
        let (h, w, c) = first;
        let mut data = Array5::zeros((m, n, h, w, c));
        for (i, view) in views.iter().enumerate() {
            data.slice_mut(s![i / n, i % n, .., .., ..]).assign(view);
        }
        Self::new(data)
    }

    pub fn with_disparity_range(mut self, range: Option<(f64, f64)>) -> Self {
        self.disparity_range = range;
        self
    }

    pub fn disparity_range(&self) -> Option<(f64, f64)> {
        self.disparity_range
    }

    /// `(M, N)`.
    pub fn angular(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    /// `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.2, d.3)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().4
    }

    /// 0-based angular index of the central view.
    pub fn central_index(&self) -> (usize, usize) {
        let (m, n) = self.angular();
        ((m - 1) / 2, (n - 1) / 2)
    }

    pub fn view(&self, u: usize, v: usize) -> ArrayView3<'_, f64> {
        self.data.slice(s![u, v, .., .., ..])
    }

    pub fn central_view(&self) -> ArrayView3<'_, f64> {
        let (u0, v0) = self.central_index();
        self.view(u0, v0)
    }

    /// All views stacked on a leading channel axis, ordered as in
    /// [`SubLightField::stack_channels`].
    pub fn stack_channels(&self) -> Array3<f32> {
        sublf::stack_views(&self.data)
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array5<f64> {
        self.data
    }

    /// Spatial crop applied identically to every view.
    pub fn crop_spatial(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let (hh, ww) = self.spatial();
        if h < 2 || w < 2 || row + h > hh || col + w > ww {
            return Err(Error::InvalidArgument(format!(
                "spatial crop {h}x{w} at ({row}, {col}) does not fit in {hh}x{ww}"
            )));
        }
        let data = self
            .data
            .slice(s![.., .., row..row + h, col..col + w, ..])
            .to_owned();
        Ok(Self {
            data,
            disparity_range: self.disparity_range,
        })
    }

    /// Pads the bottom and right borders by mirror reflection (edge pixel
    /// not repeated) so that both extents become multiples of `multiple`.
    /// Returns the padded field; crop results back to the original extent.
    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> Result<Self> {
        let (h, w) = self.spatial();
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if ph == h && pw == w {
            return Ok(self.clone());
        }
        if ph - h >= h || pw - w >= w {
            return Err(Error::InvalidArgument(format!(
                "cannot reflect-pad {h}x{w} to {ph}x{pw}"
            )));
        }
        let (m, n, _, _, c) = self.data.dim();
        let mut data = Array5::zeros((m, n, ph, pw, c));
        for r in 0..ph {
            let sr = reflect_index(r, h);
            for col in 0..pw {
                let sc = reflect_index(col, w);
                data.slice_mut(s![.., .., r, col, ..])
                    .assign(&self.data.slice(s![.., .., sr, sc, ..]));
            }
        }
        Ok(Self {
            data,
            disparity_range: self.disparity_range,
        })
    }

    /// Mean over color channels, keeping a single-channel light field.
    pub fn to_gray(&self) -> Self {
        let data = self
            .data
            .mean_axis(Axis(4))
            .expect("channel axis is non-empty")
            .insert_axis(Axis(4));
        Self {
            data,
            disparity_range: self.disparity_range,
        }
    }
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

pub(crate) fn check_angular(m: usize, n: usize) -> Result<()> {
    if m < 3 || n < 3 || m.is_multiple_of(2) || n.is_multiple_of(2) {
        return Err(Error::UnsupportedGeometry(format!(
            "angular size {m}x{n} must be odd and at least 3x3"
        )));
    }
    Ok(())
}
