//! Synthetic Lambertian scenes with exact ground truth.
//!
//! Each layer is a fronto-parallel plane carrying its own band-limited noise
//! texture. View `(u, v)` sees a plane of disparity `d` shifted by
//! `d·(u − u₀, v − v₀)`, so at integer disparities every view is an exact
//! integer translate of the texture. An optional foreground rectangle is
//! painted over the background in every view; occlusion ground truth comes
//! from testing, per view, whether the background point seen by a central
//! pixel falls under the shifted rectangle.

use ndarray::{Array2, Array3, Array5, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_angular, LightField};
use crate::error::{Error, Result};
use crate::warp::Tap;

/// Half-open pixel rectangle in central-view coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn contains(&self, r: f64, c: f64) -> bool {
        r >= self.top as f64
            && r < (self.top + self.height) as f64
            && c >= self.left as f64
            && c < (self.left + self.width) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneLayout {
    Plane {
        disparity: f64,
    },
    Occluder {
        background: f64,
        foreground: f64,
        rect: Rect,
    },
}

impl SceneLayout {
    /// Random background plane plus an occluding rectangle. Both disparities
    /// lie in `[−max_disparity, max_disparity]` and differ by at least a
    /// quarter of that range.
    pub fn random_occluder(height: usize, width: usize, max_disparity: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0cc1);
        let (background, foreground) = loop {
            let bg = rng.random_range(-max_disparity..=max_disparity);
            let fg = rng.random_range(-max_disparity..=max_disparity);
            if (bg - fg).abs() >= 0.5 * max_disparity {
                break (bg, fg);
            }
        };
        let rh = rng.random_range(height / 4..=height / 2);
        let rw = rng.random_range(width / 4..=width / 2);
        let top = rng.random_range(height / 8..=height - rh - height / 8);
        let left = rng.random_range(width / 8..=width - rw - width / 8);
        SceneLayout::Occluder {
            background,
            foreground,
            rect: Rect {
                top,
                left,
                height: rh,
                width: rw,
            },
        }
    }

    fn disparities(&self) -> Vec<f64> {
        match *self {
            SceneLayout::Plane { disparity } => vec![disparity],
            SceneLayout::Occluder {
                background,
                foreground,
                ..
            } => vec![background, foreground],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub angular: (usize, usize),
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Upper bound on `|disparity|`, pixels per angular step.
    pub max_disparity: f64,
    pub layout: SceneLayout,
    /// Radius of the box filter applied to the uniform noise.
    pub smoothing_radius: usize,
    /// Number of box-filter passes.
    pub smoothing_passes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            angular: (7, 7),
            channels: 3,
            max_disparity: 2.0,
            layout: SceneLayout::Plane { disparity: 1.0 },
            smoothing_radius: 1,
            smoothing_passes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub lf: LightField,
    pub gt_disparity: Array2<f64>,
    /// Central-view pixels hidden by the foreground in at least one view.
    pub gt_occlusion: Array2<bool>,
    pub layout: SceneLayout,
}

impl SyntheticScene {
    /// Views `(u, v)` in which central pixel `(r, c)` is hidden by the
    /// foreground. Empty for plane scenes and for foreground pixels.
    pub fn occluding_views(&self, r: usize, c: usize) -> Vec<(usize, usize)> {
        let (m, n) = self.lf.angular();
        let (u0, v0) = self.lf.central_index();
        occluding_views(&self.layout, (m, n), (u0, v0), r, c)
    }
}

fn occluding_views(
    layout: &SceneLayout,
    (m, n): (usize, usize),
    (u0, v0): (usize, usize),
    r: usize,
    c: usize,
) -> Vec<(usize, usize)> {
    let SceneLayout::Occluder {
        background,
        foreground,
        rect,
    } = *layout
    else {
        return Vec::new();
    };
    let (rf, cf) = (r as f64, c as f64);
    if rect.contains(rf, cf) {
        return Vec::new();
    }
    let rel = background - foreground;
    let mut out = Vec::new();
    for u in 0..m {
        for v in 0..n {
            let du = u as f64 - u0 as f64;
            let dv = v as f64 - v0 as f64;
            // The background point seen at (r, c) appears at (r, c) + bg·Δ in
            // view (u, v), where the foreground covers positions p with
            // p − fg·Δ inside the rectangle.
            if rect.contains(rf + rel * du, cf + rel * dv) {
                out.push((u, v));
            }
        }
    }
    out
}

/// Renders a synthetic scene; deterministic in `seed`.
pub fn synth_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    let (m, n) = cfg.angular;
    check_angular(m, n)?;
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{} channels (expected 1 or 3)",
            cfg.channels
        )));
    }
    if !(cfg.max_disparity.is_finite() && cfg.max_disparity >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max disparity {}",
            cfg.max_disparity
        )));
    }
    let reach = cfg.max_disparity * ((m - 1) / 2).max((n - 1) / 2) as f64;
    if 2.0 * reach >= cfg.height.min(cfg.width) as f64 {
        return Err(Error::InvalidArgument(format!(
            "max disparity {} shifts views by up to {reach} px, beyond the {}x{} extent",
            cfg.max_disparity, cfg.height, cfg.width
        )));
    }
    for d in cfg.layout.disparities() {
        if !(d.is_finite() && d.abs() <= cfg.max_disparity) {
            return Err(Error::InvalidArgument(format!(
                "layer disparity {d} exceeds the configured maximum {}",
                cfg.max_disparity
            )));
        }
    }
    if let SceneLayout::Occluder { rect, .. } = cfg.layout {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > cfg.height
            || rect.left + rect.width > cfg.width
        {
            return Err(Error::InvalidArgument(format!(
                "occluder {rect:?} outside the {}x{} frame",
                cfg.height, cfg.width
            )));
        }
    }

    let margin = reach.ceil() as usize + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex_dims = (cfg.height + 2 * margin, cfg.width + 2 * margin, cfg.channels);
    let background = smooth_noise(tex_dims, cfg, &mut rng);
    let foreground = smooth_noise(tex_dims, cfg, &mut rng);

    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let (u0, v0) = ((m - 1) / 2, (n - 1) / 2);
    let mut data = Array5::zeros((m, n, h, w, ch));
    let bg_disp = cfg.layout.disparities()[0];
    let layer_sample = |tex: &ArrayView3<'_, f64>, r: f64, c: f64, out: &mut [f64]| {
        let tap = Tap::new(r + margin as f64, c + margin as f64, tex_dims.0, tex_dims.1)
            .expect("texture margin covers every sample");
        for (k, o) in out.iter_mut().enumerate() {
            *o = tap.sample(tex, k);
        }
    };
    let mut pixel = vec![0.0; ch];
    for u in 0..m {
        for v in 0..n {
            let du = u as f64 - u0 as f64;
            let dv = v as f64 - v0 as f64;
            for r in 0..h {
                for c in 0..w {
                    let (rf, cf) = (r as f64, c as f64);
                    let fg_hit = match cfg.layout {
                        SceneLayout::Occluder {
                            foreground: fd,
                            rect,
                            ..
                        } => {
                            let (qr, qc) = (rf - fd * du, cf - fd * dv);
                            rect.contains(qr, qc).then_some((qr, qc))
                        }
                        SceneLayout::Plane { .. } => None,
                    };
                    match fg_hit {
                        Some((qr, qc)) => layer_sample(&foreground.view(), qr, qc, &mut pixel),
                        None => layer_sample(
                            &background.view(),
                            rf - bg_disp * du,
                            cf - bg_disp * dv,
                            &mut pixel,
                        ),
                    }
                    for (k, &p) in pixel.iter().enumerate() {
                        data[[u, v, r, c, k]] = p;
                    }
                }
            }
        }
    }

    let mut gt_disparity = Array2::from_elem((h, w), bg_disp);
    let mut gt_occlusion = Array2::from_elem((h, w), false);
    if let SceneLayout::Occluder {
        foreground: fd,
        rect,
        ..
    } = cfg.layout
    {
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                gt_disparity[[r, c]] = fd;
            }
        }
        for r in 0..h {
            for c in 0..w {
                gt_occlusion[[r, c]] =
                    !occluding_views(&cfg.layout, (m, n), (u0, v0), r, c).is_empty();
            }
        }
    }

    let lf = LightField::new(data)?.with_disparity_range(Some((-cfg.max_disparity, cfg.max_disparity)));
    Ok(SyntheticScene {
        lf,
        gt_disparity,
        gt_occlusion,
        layout: cfg.layout,
    })
}

/// Uniform noise smoothed by repeated separable box filtering, then
/// stretched per channel to span [0, 1].
fn smooth_noise(
    dims: (usize, usize, usize),
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let mut tex = Array3::from_shape_simple_fn(dims, || rng.random::<f64>());
    let radius = cfg.smoothing_radius as isize;
    let (h, w, c) = dims;
    for _ in 0..cfg.smoothing_passes {
        for axis in 0..2 {
            let src = tex.clone();
            for r in 0..h {
                for col in 0..w {
                    for k in 0..c {
                        let mut acc = 0.0;
                        let mut count = 0.0;
                        for off in -radius..=radius {
                            let (rr, cc) = if axis == 0 {
                                (r as isize + off, col as isize)
                            } else {
                                (r as isize, col as isize + off)
                            };
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += src[[rr as usize, cc as usize, k]];
                                count += 1.0;
                            }
                        }
                        tex[[r, col, k]] = acc / count;
                    }
                }
            }
        }
    }
    for k in 0..c {
        let mut lane = tex.index_axis_mut(ndarray::Axis(2), k);
        let lo = lane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        lane.mapv_inplace(|x| ((x - lo) / span).clamp(0.0, 1.0));
    }
    tex
}
