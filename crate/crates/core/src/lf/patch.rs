use ndarray::{Array2, Array3};

use super::{LightField, Quadrant};
use crate::error::{Error, Result};
use crate::warp::Tap;

/// Samples gathered from every view for one central-view pixel under a
/// hypothesised disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularPatch {
    /// `M × N × C`; entries with `validity == false` are 0 and meaningless.
    pub values: Array3<f64>,
    pub validity: Array2<bool>,
}

impl AngularPatch {
    /// Population standard deviation over the valid entries of the views
    /// selected by `include(u, v)`, taking the largest value over color
    /// channels. `None` when fewer than one valid entry is selected.
    pub fn std_dev_where(&self, include: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let (m, n, c) = self.values.dim();
        let mut worst: Option<f64> = None;
        for ch in 0..c {
            let samples: Vec<f64> = (0..m)
                .flat_map(|u| (0..n).map(move |v| (u, v)))
                .filter(|&(u, v)| self.validity[[u, v]] && include(u, v))
                .map(|(u, v)| self.values[[u, v, ch]])
                .collect();
            if samples.is_empty() {
                return None;
            }
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let var =
                samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
            let sd = var.sqrt();
            worst = Some(worst.map_or(sd, |w| w.max(sd)));
        }
        worst
    }

    pub fn std_dev(&self) -> Option<f64> {
        self.std_dev_where(|_, _| true)
    }

    /// Standard deviation restricted to one angular quadrant.
    pub fn quadrant_std_dev(&self, q: Quadrant) -> Option<f64> {
        let (m, n) = self.validity.dim();
        self.std_dev_where(|u, v| q.contains(m, n, u, v))
    }
}

/// `A(u, v) = L(x + d(u − u₀), y + d(v − v₀), u, v)` for central-view pixel
/// `(x, y) = pixel`, bilinearly interpolated; samples falling outside a
/// view are flagged invalid rather than clamped.
pub fn refocused_angular_patch(
    lf: &LightField,
    pixel: (usize, usize),
    disparity: f64,
) -> Result<AngularPatch> {
    let (h, w) = lf.spatial();
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::InvalidArgument(format!(
            "pixel {pixel:?} outside {h}x{w}"
        )));
    }
    if !disparity.is_finite() {
        return Err(Error::NonFinite(format!("disparity {disparity}")));
    }
    let (m, n) = lf.angular();
    let (u0, v0) = lf.central_index();
    let c = lf.channels();
    let mut values = Array3::zeros((m, n, c));
    let mut validity = Array2::from_elem((m, n), false);
    for u in 0..m {
        for v in 0..n {
            let pr = pixel.0 as f64 + disparity * (u as f64 - u0 as f64);
            let pc = pixel.1 as f64 + disparity * (v as f64 - v0 as f64);
            if let Some(tap) = Tap::new(pr, pc, h, w) {
                let view = lf.view(u, v);
                validity[[u, v]] = true;
                for ch in 0..c {
                    values[[u, v, ch]] = tap.sample(&view, ch);
                }
            }
        }
    }
    Ok(AngularPatch { values, validity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::{synth_scene, SceneConfig, SceneLayout};
    use ndarray::Array5;

    #[test]
    fn zero_disparity_reads_the_same_pixel_in_every_view() {
        let scene = synth_scene(&SceneConfig::default(), 3).unwrap();
        let lf = &scene.lf;
        let patch = refocused_angular_patch(lf, (5, 9), 0.0).unwrap();
        let (m, n) = lf.angular();
        for u in 0..m {
            for v in 0..n {
                assert!(patch.validity[[u, v]]);
                for ch in 0..lf.channels() {
                    assert_eq!(patch.values[[u, v, ch]], lf.view(u, v)[[5, 9, ch]]);
                }
            }
        }
    }

    #[test]
    fn constant_field_gives_constant_patches() {
        let lf = LightField::new(Array5::from_elem((3, 3, 4, 4, 1), 0.3)).unwrap();
        for d in [-1.0, 0.0, 0.4] {
            let p = refocused_angular_patch(&lf, (2, 2), d).unwrap();
            assert_eq!(p.std_dev(), Some(0.0));
        }
    }

    #[test]
    fn correct_disparity_is_photo_consistent_on_a_plane() {
        for d in [-2.0, -1.0, 1.0, 2.0] {
            let cfg = SceneConfig {
                layout: SceneLayout::Plane { disparity: d },
                ..SceneConfig::default()
            };
            let scene = synth_scene(&cfg, 17).unwrap();
            let p = refocused_angular_patch(&scene.lf, (20, 20), d).unwrap();
            assert!(p.validity.iter().all(|&v| v));
            assert!(p.std_dev().unwrap() < 1e-6);
            // and a wrong hypothesis is not
            let wrong = refocused_angular_patch(&scene.lf, (20, 20), d + 0.5).unwrap();
            assert!(wrong.std_dev().unwrap() > 1e-3);
        }
    }

    #[test]
    fn out_of_bounds_samples_are_flagged() {
        let scene = synth_scene(&SceneConfig::default(), 1).unwrap();
        let p = refocused_angular_patch(&scene.lf, (0, 0), 1.0).unwrap();
        // u < u0 reaches negative rows
        assert!(!p.validity[[0, 0]]);
        assert!(p.validity[[6, 6]]);
        assert_eq!(p.values[[0, 0, 0]], 0.0);
        assert!(refocused_angular_patch(&scene.lf, (64, 0), 0.0).is_err());
    }
}
