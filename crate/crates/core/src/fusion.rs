//! Occlusion-aware fusion of the four quadrant disparity maps.

use ndarray::{s, Array2, Zip};

use crate::error::{Error, Result};
use crate::io::crop_angular;
use crate::lf::LightField;
use crate::losses::{reliability_softmax, ReliabilityWeights};
use crate::model::{predict_full, predict_initial_maps, ColorMode, InputMode, Network, ScaleMaps};

pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub mask: Array2<bool>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDepth {
    pub d_max: Array2<f64>,
    pub d_avg: Array2<f64>,
    pub d_final: Array2<f64>,
    pub mask: OcclusionMask,
    pub weights: ReliabilityWeights,
}

fn check_maps(maps: &[Array2<f64>; 4]) -> Result<(usize, usize)> {
    let dim = maps[0].dim();
    for m in &maps[1..] {
        if m.dim() != dim {
            return Err(Error::mismatch(
                "disparity map extent",
                format!("{dim:?}"),
                format!("{:?}", m.dim()),
            ));
        }
    }
    if maps.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("disparity maps".into()));
    }
    Ok(dim)
}

fn check_weights(dim: (usize, usize), weights: &ReliabilityWeights) -> Result<()> {
    if weights.dim() != dim {
        return Err(Error::mismatch(
            "reliability weight extent",
            format!("{dim:?}"),
            format!("{:?}", weights.dim()),
        ));
    }
    Ok(())
}

/// Population standard deviation of the four values.
pub fn quadrant_std(values: [f64; 4]) -> f64 {
    let mean = values.iter().sum::<f64>() / 4.0;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt()
}

/// Flags pixels whose four disparities have population std ≥ `lambda`.
pub fn occlusion_mask(maps: &[Array2<f64>; 4], lambda: f64) -> Result<OcclusionMask> {
    let dim = check_maps(maps)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be positive")));
    }
    let mask = Array2::from_shape_fn(dim, |p| {
        quadrant_std([maps[0][p], maps[1][p], maps[2][p], maps[3][p]]) >= lambda
    });
    Ok(OcclusionMask { mask, lambda })
}

/// Per pixel, the disparity of the most reliable quadrant; ties go to the
/// lowest quadrant index.
pub fn fuse_max(maps: &[Array2<f64>; 4], weights: &ReliabilityWeights) -> Result<Array2<f64>> {
    let dim = check_maps(maps)?;
    check_weights(dim, weights)?;
    let w = weights.maps();
    Ok(Array2::from_shape_fn(dim, |p| {
        let mut best = 0;
        for i in 1..4 {
            if w[i][p] > w[best][p] {
                best = i;
            }
        }
        maps[best][p]
    }))
}

/// Per pixel `Σᵢ Wᵢ·Dᵢ`.
pub fn fuse_avg(maps: &[Array2<f64>; 4], weights: &ReliabilityWeights) -> Result<Array2<f64>> {
    let dim = check_maps(maps)?;
    check_weights(dim, weights)?;
    let w = weights.maps();
    Ok(Array2::from_shape_fn(dim, |p| {
        (0..4).map(|i| w[i][p] * maps[i][p]).sum()
    }))
}

/// `d_max` where the mask is set, `d_avg` elsewhere.
pub fn fuse_final(d_max: &Array2<f64>, d_avg: &Array2<f64>, mask: &OcclusionMask) -> Result<Array2<f64>> {
    if d_max.dim() != d_avg.dim() || d_max.dim() != mask.mask.dim() {
        return Err(Error::mismatch(
            "fusion input extent",
            format!("{:?}", d_max.dim()),
            format!("{:?} / {:?}", d_avg.dim(), mask.mask.dim()),
        ));
    }
    let mut out = d_avg.clone();
    Zip::from(&mut out)
        .and(d_max)
        .and(&mask.mask)
        .for_each(|o, &m, &occluded| {
            if occluded {
                *o = m;
            }
        });
    Ok(out)
}

/// Full fusion from aligned per-quadrant disparities and logits.
pub fn fuse(maps: &[Array2<f64>; 4], logits: &[Array2<f64>; 4], lambda: f64) -> Result<FusedDepth> {
    let weights = reliability_softmax(logits)?;
    let mask = occlusion_mask(maps, lambda)?;
    let d_max = fuse_max(maps, &weights)?;
    let d_avg = fuse_avg(maps, &weights)?;
    let d_final = fuse_final(&d_max, &d_avg, &mask)?;
    Ok(FusedDepth {
        d_max,
        d_avg,
        d_final,
        mask,
        weights,
    })
}

/// Inference result on a full frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimate {
    /// Aligned per-quadrant maps; absent for a full-mode network.
    pub quadrants: Option<[ScaleMaps; 4]>,
    pub fused: Option<FusedDepth>,
    pub d_final: Array2<f64>,
}

/// Runs `network` on `lf` and fuses. Light fields with more views than the
/// network expects are center-cropped; frames are reflect-padded to a
/// multiple of 8 and the maps cropped back.
pub fn estimate_depth(network: &Network, lf: &LightField, lambda: f64) -> Result<DepthEstimate> {
    let cfg = network.config();
    let want = cfg.lf_angular();
    let got = lf.angular();
    let lf = if got == want {
        lf.clone()
    } else if got.0 >= want.0 && got.1 >= want.1 {
        log::info!(
            "cropping {}x{} views to the central {}x{} expected by the network",
            got.0,
            got.1,
            want.0,
            want.1
        );
        crop_angular(lf, want)?
    } else {
        return Err(Error::mismatch(
            "angular size",
            format!("{}x{}", want.0, want.1),
            format!("{}x{}", got.0, got.1),
        ));
    };
    let lf = match (cfg.color_mode, lf.channels()) {
        (ColorMode::Gray, 3) => lf.to_gray(),
        (ColorMode::Rgb, 1) => {
            return Err(Error::mismatch("color channels", 3, 1));
        }
        _ => lf,
    };
    let (h, w) = lf.spatial();
    let padded = lf.pad_reflect_to_multiple(8)?;
    let crop = |m: &Array2<f64>| m.slice(s![..h, ..w]).to_owned();
    match cfg.input_mode {
        InputMode::Quadrants => {
            let maps = predict_initial_maps(network, &padded)?.map(|m| ScaleMaps {
                disparity: crop(&m.disparity),
                logit: crop(&m.logit),
            });
            let disp: [Array2<f64>; 4] = std::array::from_fn(|i| maps[i].disparity.clone());
            let logits: [Array2<f64>; 4] = std::array::from_fn(|i| maps[i].logit.clone());
            let fused = fuse(&disp, &logits, lambda)?;
            Ok(DepthEstimate {
                d_final: fused.d_final.clone(),
                quadrants: Some(maps),
                fused: Some(fused),
            })
        }
        InputMode::Full => {
            let out = predict_full(network, &padded)?;
            Ok(DepthEstimate {
                d_final: crop(&out.finest().disparity),
                quadrants: None,
                fused: None,
            })
        }
    }
}
