//! Disparity accuracy against ground truth.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CROP: usize = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub mse_x100: f64,
    /// Percentage of evaluated pixels with error strictly above `t`.
    pub bpr: f64,
    pub t: f64,
    pub crop: usize,
    pub pixels: usize,
}

fn check(pred: &Array2<f64>, gt: &Array2<f64>, crop: usize) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::mismatch(
            "prediction extent",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let (h, w) = gt.dim();
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} map too small for a {crop}-pixel crop"
        )));
    }
    if pred.iter().chain(gt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("disparity map".into()));
    }
    Ok(())
}

/// Absolute errors over the cropped interior, restricted by `include`.
fn errors(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    crop: usize,
    include: impl Fn(usize, usize) -> bool,
) -> Result<Vec<f64>> {
    check(pred, gt, crop)?;
    let (h, w) = gt.dim();
    let mut out = Vec::new();
    for r in crop..h - crop {
        for c in crop..w - crop {
            if include(r, c) {
                out.push((pred[[r, c]] - gt[[r, c]]).abs());
            }
        }
    }
    Ok(out)
}

fn report(errs: &[f64], t: f64, crop: usize) -> EvalReport {
    let n = errs.len() as f64;
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n;
    let bad = errs.iter().filter(|&&e| e > t).count() as f64;
    EvalReport {
        scene: None,
        mse_x100: 100.0 * mse,
        bpr: 100.0 * bad / n,
        t,
        crop,
        pixels: errs.len(),
    }
}

pub fn mse_x100(pred: &Array2<f64>, gt: &Array2<f64>, crop: usize) -> Result<f64> {
    evaluate(pred, gt, DEFAULT_THRESHOLD, crop).map(|r| r.mse_x100)
}

pub fn bad_pixel_ratio(pred: &Array2<f64>, gt: &Array2<f64>, t: f64, crop: usize) -> Result<f64> {
    evaluate(pred, gt, t, crop).map(|r| r.bpr)
}

/// MSE×100 and BPR over the interior left after removing `crop` pixels
/// from every side.
pub fn evaluate(pred: &Array2<f64>, gt: &Array2<f64>, t: f64, crop: usize) -> Result<EvalReport> {
    let errs = errors(pred, gt, crop, |_, _| true)?;
    Ok(report(&errs, t, crop))
}

/// Square (Chebyshev) dilation by `radius` pixels.
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((r, c), &set) in mask.indexed_iter() {
        if !set {
            continue;
        }
        for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
            for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
                out[[rr, cc]] = true;
            }
        }
    }
    out
}

/// Metrics restricted to the dilated occlusion mask within the cropped
/// interior.
pub fn occlusion_band_metrics(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    occlusion: &Array2<bool>,
    radius: usize,
    t: f64,
    crop: usize,
) -> Result<EvalReport> {
    if occlusion.dim() != gt.dim() {
        return Err(Error::mismatch(
            "occlusion mask extent",
            format!("{:?}", gt.dim()),
            format!("{:?}", occlusion.dim()),
        ));
    }
    let band = dilate(occlusion, radius);
    let errs = errors(pred, gt, crop, |r, c| band[[r, c]])?;
    if errs.is_empty() {
        return Err(Error::InvalidArgument("occlusion band is empty".into()));
    }
    Ok(report(&errs, t, crop))
}

/// Median absolute error over the cropped interior pixels where `include`
/// is set.
pub fn median_abs_error(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    include: &Array2<bool>,
    crop: usize,
) -> Result<f64> {
    if include.dim() != gt.dim() {
        return Err(Error::mismatch(
            "mask extent",
            format!("{:?}", gt.dim()),
            format!("{:?}", include.dim()),
        ));
    }
    let mut errs = errors(pred, gt, crop, |r, c| include[[r, c]])?;
    if errs.is_empty() {
        return Err(Error::InvalidArgument("no pixel selected".into()));
    }
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    Ok(if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((64, 60), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn analytic_examples() {
        let g = gt(0);
        assert_eq!(mse_x100(&g, &g, 20).unwrap(), 0.0);
        let off = &g + 0.1;
        assert!((mse_x100(&off, &g, 20).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(bad_pixel_ratio(&off, &g, 0.07, 20).unwrap(), 100.0);
        assert_eq!(bad_pixel_ratio(&(&g + 0.05), &g, 0.07, 20).unwrap(), 0.0);
        let r = evaluate(&g, &g, 0.07, 20).unwrap();
        assert_eq!(r.pixels, (64 - 40) * (60 - 40));
    }

    #[test]
    fn crop_excludes_the_border() {
        let g = gt(1);
        let mut p = g.clone();
        for ((r, c), v) in p.indexed_iter_mut() {
            if r < 20 || c < 20 || r >= 44 || c >= 40 {
                *v += 5.0;
            }
        }
        assert_eq!(mse_x100(&p, &g, 20).unwrap(), 0.0);
        assert!(mse_x100(&p, &g, 0).unwrap() > 0.0);
        assert!(evaluate(&g, &g, 0.07, 30).is_err());
    }

    #[test]
    fn half_offset_gives_half_bad() {
        let g = Array2::zeros((50, 50));
        let p = Array2::from_shape_fn((50, 50), |(r, _)| if r < 25 { 0.1 } else { 0.0 });
        assert_eq!(bad_pixel_ratio(&p, &g, 0.07, 20).unwrap(), 50.0);
    }

    #[test]
    fn threshold_is_strict() {
        let g = Array2::zeros((8, 8));
        let p = Array2::from_elem((8, 8), 0.25);
        assert_eq!(bad_pixel_ratio(&p, &g, 0.25, 0).unwrap(), 0.0);
    }

    #[test]
    fn band_examples() {
        let g = gt(2);
        let mut occ = Array2::from_elem(g.dim(), false);
        occ[[30, 30]] = true;
        assert_eq!(occlusion_band_metrics(&g, &g, &occ, 3, 0.07, 20).unwrap().mse_x100, 0.0);
        let mut p = g.clone();
        p[[22, 22]] += 1.0;
        let band = occlusion_band_metrics(&p, &g, &occ, 3, 0.07, 20).unwrap();
        assert_eq!(band.mse_x100, 0.0);
        assert_eq!(band.pixels, 49);
        let b0 = dilate(&occ, 0);
        let b2 = dilate(&occ, 2);
        assert!(b0.iter().zip(b2.iter()).all(|(a, b)| !a || *b));
        assert_eq!(b2.iter().filter(|&&v| v).count(), 25);
        let empty = Array2::from_elem(g.dim(), false);
        assert!(occlusion_band_metrics(&p, &g, &empty, 3, 0.07, 20).is_err());
    }

    #[test]
    fn median_of_selected_errors() {
        let g = Array2::zeros((4, 4));
        let p = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let all = Array2::from_elem((4, 4), true);
        assert_eq!(median_abs_error(&p, &g, &all, 0).unwrap(), 7.5);
        assert_eq!(median_abs_error(&p, &g, &all, 1).unwrap(), 7.5);
    }

    #[test]
    fn report_serializes_expected_keys() {
        let g = gt(3);
        let mut r = evaluate(&g, &g, 0.07, 20).unwrap();
        r.scene = Some("a".into());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["scene", "mse_x100", "bpr", "t", "crop", "pixels"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone(seed in 0u64..1000, r in 20usize..44, c in 20usize..40, bump in 0.0f64..1.0) {
            let g = gt(seed);
            let p = gt(seed + 1);
            prop_assert_eq!(mse_x100(&p, &g, 20).unwrap(), mse_x100(&g, &p, 20).unwrap());
            let mut worse = p.clone();
            let e = worse[[r, c]] - g[[r, c]];
            worse[[r, c]] += bump * if e >= 0.0 { 1.0 } else { -1.0 };
            prop_assert!(mse_x100(&worse, &g, 20).unwrap() >= mse_x100(&p, &g, 20).unwrap());
            prop_assert!(bad_pixel_ratio(&worse, &g, 0.07, 20).unwrap() >= bad_pixel_ratio(&p, &g, 0.07, 20).unwrap());
        }
    }
}
