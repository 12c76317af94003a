//! Unsupervised training objective.
//!
//! Every loss comes in a plain form and a `_with_grad` form returning
//! derivatives with respect to its map arguments. Maps are central-view
//! aligned (already back-transformed).

use ndarray::{Array2, Array5, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lf::{LightField, Quadrant};
use crate::model::{MultiScaleOutput, OutputGrads, ScaleMaps};
use crate::warp::{warp_view, warp_view_with_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Smoothness weight.
    pub beta: f64,
    /// Edge sensitivity for intensities in `[0, 1]`.
    pub gamma: f64,
    /// Weight of each supervised scale, finest first.
    pub scale_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 150.0,
            scale_weights: vec![1.0, 0.5, 0.25],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.scale_weights.is_empty()
            || self.scale_weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::InvalidArgument(
                "scale weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel convex weights over the four quadrants.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityWeights {
    maps: [Array2<f64>; 4],
}

impl ReliabilityWeights {
    /// Checks range and per-pixel normalization (within 1e-4).
    pub fn new(maps: [Array2<f64>; 4]) -> Result<Self> {
        check_aligned(&maps, "reliability weight")?;
        let (h, w) = maps[0].dim();
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0;
                for m in &maps {
                    let v = m[[r, c]];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidArgument(format!(
                            "reliability weight {v} at ({r}, {c}) outside [0, 1]"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::InvalidArgument(format!(
                        "reliability weights at ({r}, {c}) sum to {sum}"
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self {
            maps: std::array::from_fn(|_| Array2::from_elem((h, w), 0.25)),
        }
    }

    pub fn get(&self, q: Quadrant) -> &Array2<f64> {
        &self.maps[q.index()]
    }

    pub fn maps(&self) -> &[Array2<f64>; 4] {
        &self.maps
    }

    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }
}

fn check_aligned(maps: &[Array2<f64>], what: &str) -> Result<()> {
    let dim = maps[0].dim();
    for m in &maps[1..] {
        if m.dim() != dim {
            return Err(Error::mismatch(
                format!("{what} extent"),
                format!("{dim:?}"),
                format!("{:?}", m.dim()),
            ));
        }
    }
    Ok(())
}

/// Per-pixel softmax across the four logit maps.
pub fn reliability_softmax(logits: &[Array2<f64>; 4]) -> Result<ReliabilityWeights> {
    check_aligned(logits, "reliability logit")?;
    if logits.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("reliability logits".into()));
    }
    let mut maps: [Array2<f64>; 4] = std::array::from_fn(|i| logits[i].clone());
    let (h, w) = maps[0].dim();
    for r in 0..h {
        for c in 0..w {
            let top = maps.iter().map(|m| m[[r, c]]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for m in maps.iter_mut() {
                let e = (m[[r, c]] - top).exp();
                m[[r, c]] = e;
                sum += e;
            }
            for m in maps.iter_mut() {
                m[[r, c]] /= sum;
            }
        }
    }
    Ok(ReliabilityWeights { maps })
}

/// Pulls `∂L/∂W` back through the softmax to `∂L/∂logit`.
pub fn softmax_backward(weights: &ReliabilityWeights, dw: &[Array2<f64>; 4]) -> [Array2<f64>; 4] {
    let w = &weights.maps;
    let mut mean = Array2::<f64>::zeros(weights.dim());
    for i in 0..4 {
        mean.zip_mut_with(&(&w[i] * &dw[i]), |m, &x| *m += x);
    }
    std::array::from_fn(|i| &w[i] * &(&dw[i] - &mean))
}

/// Per-pixel sums of `|warp(I_u, D, u − u₀) − I_{u₀}|` over a set of views
/// and all channels.
struct PhotoSums {
    abs: Array2<f64>,
    /// `∂abs/∂D`, present on request.
    grad: Option<Array2<f64>>,
    /// Valid `(view, pixel, channel)` triples.
    count: usize,
}

fn photo_sums(
    lf: &LightField,
    disparity: ArrayView2<'_, f64>,
    views: &[(usize, usize)],
    with_grad: bool,
) -> Result<PhotoSums> {
    let (h, w) = lf.spatial();
    if disparity.dim() != (h, w) {
        return Err(Error::mismatch(
            "disparity extent",
            format!("({h}, {w})"),
            format!("{:?}", disparity.dim()),
        ));
    }
    let (u0, v0) = lf.central_index();
    let center = lf.central_view();
    let mut abs = Array2::zeros((h, w));
    let mut grad = with_grad.then(|| Array2::zeros((h, w)));
    let mut count = 0;
    for &(u, v) in views {
        if (u, v) == (u0, v0) {
            continue;
        }
        let offset = (u as f64 - u0 as f64, v as f64 - v0 as f64);
        let (warped, jac) = if with_grad {
            let (wr, j) = warp_view_with_grad(lf.view(u, v), disparity, offset)?;
            (wr, Some(j))
        } else {
            (warp_view(lf.view(u, v), disparity, offset)?, None)
        };
        count += warped.valid_count() * lf.channels();
        for r in 0..h {
            for c in 0..w {
                if !warped.validity[[r, c]] {
                    continue;
                }
                for ch in 0..lf.channels() {
                    let res = warped.image[[r, c, ch]] - center[[r, c, ch]];
                    abs[[r, c]] += res.abs();
                    if let (Some(g), Some(j)) = (grad.as_mut(), jac.as_ref()) {
                        g[[r, c]] += res.signum() * j[[r, c, ch]] * (res != 0.0) as u8 as f64;
                    }
                }
            }
        }
    }
    Ok(PhotoSums { abs, grad, count })
}

fn all_views(lf: &LightField) -> Vec<(usize, usize)> {
    let (m, n) = lf.angular();
    (0..m).flat_map(|u| (0..n).map(move |v| (u, v))).collect()
}

fn quadrant_views(lf: &LightField, q: Quadrant) -> Vec<(usize, usize)> {
    let (m, n) = lf.angular();
    all_views(lf)
        .into_iter()
        .filter(|&(u, v)| q.contains(m, n, u, v))
        .collect()
}

/// Mean absolute reconstruction error of the central view from every other
/// view, over valid pixels and channels.
pub fn photometric_loss_unconstrained(lf: &LightField, disparity: ArrayView2<'_, f64>) -> Result<f64> {
    photometric_loss_unconstrained_with_grad(lf, disparity).map(|(l, _)| l)
}

pub fn photometric_loss_unconstrained_with_grad(
    lf: &LightField,
    disparity: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let sums = photo_sums(lf, disparity, &all_views(lf), true)?;
    if sums.count == 0 {
        return Err(Error::InvalidArgument(
            "no valid pixel in any warped view".into(),
        ));
    }
    let n = sums.count as f64;
    Ok((sums.abs.sum() / n, sums.grad.expect("requested") / n))
}

/// Gradients of [`constrained_photometric_loss_with_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedGrads {
    pub disparity: [Array2<f64>; 4],
    pub weights: [Array2<f64>; 4],
}

/// `Σᵢ mean_{u ∈ Uᵢ∖u₀, x valid, c} Wᵢ(x)·|warp(I_u, Dᵢ, u − u₀) − I_{u₀}|`.
///
/// Each quadrant's term is normalized by its own valid count, so per pixel
/// the loss is a convex combination of per-quadrant residuals. Quadrants
/// with no valid sample contribute 0.
pub fn constrained_photometric_loss(
    lf: &LightField,
    disparities: &[Array2<f64>; 4],
    weights: &ReliabilityWeights,
) -> Result<f64> {
    constrained_impl(lf, disparities, weights, false).map(|(l, _)| l)
}

pub fn constrained_photometric_loss_with_grad(
    lf: &LightField,
    disparities: &[Array2<f64>; 4],
    weights: &ReliabilityWeights,
) -> Result<(f64, ConstrainedGrads)> {
    constrained_impl(lf, disparities, weights, true)
        .map(|(l, g)| (l, g.expect("gradient requested")))
}

fn constrained_impl(
    lf: &LightField,
    disparities: &[Array2<f64>; 4],
    weights: &ReliabilityWeights,
    with_grad: bool,
) -> Result<(f64, Option<ConstrainedGrads>)> {
    check_aligned(disparities, "disparity")?;
    if weights.dim() != disparities[0].dim() {
        return Err(Error::mismatch(
            "reliability weight extent",
            format!("{:?}", disparities[0].dim()),
            format!("{:?}", weights.dim()),
        ));
    }
    let (h, w) = lf.spatial();
    let mut loss = 0.0;
    let mut any_valid = false;
    let mut grads = with_grad.then(|| ConstrainedGrads {
        disparity: std::array::from_fn(|_| Array2::zeros((h, w))),
        weights: std::array::from_fn(|_| Array2::zeros((h, w))),
    });
    for q in Quadrant::ALL {
        let i = q.index();
        let sums = photo_sums(lf, disparities[i].view(), &quadrant_views(lf, q), with_grad)?;
        if sums.count == 0 {
            continue;
        }
        any_valid = true;
        let n = sums.count as f64;
        let wi = weights.get(q);
        loss += Zip::from(wi).and(&sums.abs).fold(0.0, |acc, &a, &b| acc + a * b) / n;
        if let Some(g) = grads.as_mut() {
            g.weights[i] = &sums.abs / n;
            g.disparity[i] = wi * &sums.grad.expect("requested") / n;
        }
    }
    if !any_valid {
        return Err(Error::InvalidArgument(
            "no valid pixel in any warped view".into(),
        ));
    }
    Ok((loss, grads))
}

/// Edge-aware first-order smoothness of `disparity` guided by `image`
/// (`H × W × C`): half the sum of the mean horizontal and mean vertical
/// terms `exp(−γ|∂I|)·|∂D|`, each averaged over the pixels where that
/// forward difference exists. `|∂I|` is the mean absolute channel
/// difference.
pub fn smoothness_loss(disparity: ArrayView2<'_, f64>, image: ArrayView3<'_, f64>, gamma: f64) -> Result<f64> {
    smoothness_impl(disparity, image, gamma, false).map(|(l, _)| l)
}

pub fn smoothness_loss_with_grad(
    disparity: ArrayView2<'_, f64>,
    image: ArrayView3<'_, f64>,
    gamma: f64,
) -> Result<(f64, Array2<f64>)> {
    smoothness_impl(disparity, image, gamma, true).map(|(l, g)| (l, g.expect("requested")))
}

fn smoothness_impl(
    disparity: ArrayView2<'_, f64>,
    image: ArrayView3<'_, f64>,
    gamma: f64,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let (h, w, ch) = image.dim();
    if disparity.dim() != (h, w) {
        return Err(Error::mismatch(
            "smoothness map extent",
            format!("({h}, {w})"),
            format!("{:?}", disparity.dim()),
        ));
    }
    let mut grad = with_grad.then(|| Array2::zeros((h, w)));
    let edge = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let diff: f64 = (0..ch)
            .map(|c| (image[[b.0, b.1, c]] - image[[a.0, a.1, c]]).abs())
            .sum::<f64>()
            / ch as f64;
        (-gamma * diff).exp()
    };
    let mut total = 0.0;
    // (row step, col step)
    for (dr, dc) in [(0usize, 1usize), (1, 0)] {
        if h <= dr || w <= dc {
            continue;
        }
        let pairs = ((h - dr) * (w - dc)) as f64;
        let mut sum = 0.0;
        for r in 0..h - dr {
            for c in 0..w - dc {
                let (a, b) = ((r, c), (r + dr, c + dc));
                let weight = edge(a, b);
                let delta = disparity[b] - disparity[a];
                sum += weight * delta.abs();
                if let Some(g) = grad.as_mut() {
                    let s = 0.5 * weight * delta.signum() * (delta != 0.0) as u8 as f64 / pairs;
                    g[b] += s;
                    g[a] -= s;
                }
            }
        }
        total += 0.5 * sum / pairs;
    }
    Ok((total, grad))
}

/// 2×2 average pooling of every view; odd trailing rows/columns are dropped.
pub fn downsample_lf(lf: &LightField) -> Result<LightField> {
    let (m, n, h, w, c) = lf.data().dim();
    let (h2, w2) = (h / 2, w / 2);
    let src = lf.data();
    let data = Array5::from_shape_fn((m, n, h2, w2, c), |(u, v, r, col, ch)| {
        0.25 * (src[[u, v, 2 * r, 2 * col, ch]]
            + src[[u, v, 2 * r + 1, 2 * col, ch]]
            + src[[u, v, 2 * r, 2 * col + 1, ch]]
            + src[[u, v, 2 * r + 1, 2 * col + 1, ch]])
    });
    Ok(LightField::new(data)?.with_disparity_range(lf.disparity_range()))
}

/// `levels[s]` is the light field pooled `s` times.
pub fn lf_pyramid(lf: &LightField, levels: usize) -> Result<Vec<LightField>> {
    let mut out = vec![lf.clone()];
    while out.len() < levels {
        let next = downsample_lf(out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Per-scale loss terms; `sm` holds the unweighted smoothness (0 when β = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub c_rec: Vec<f64>,
    pub sm: Vec<f64>,
}

fn check_scales(lf: &LightField, outs: &[&MultiScaleOutput], cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    let (h, w) = lf.spatial();
    for out in outs {
        if out.scales.len() < cfg.scale_weights.len() {
            return Err(Error::mismatch(
                "output scales",
                cfg.scale_weights.len(),
                out.scales.len(),
            ));
        }
        for (s, maps) in out.scales.iter().take(cfg.scale_weights.len()).enumerate() {
            let want = (h >> s, w >> s);
            if maps.disparity.dim() != want || maps.logit.dim() != want {
                return Err(Error::mismatch(
                    format!("scale {s} map extent"),
                    format!("{want:?}"),
                    format!("{:?}", maps.disparity.dim()),
                ));
            }
        }
    }
    Ok(())
}

/// Multi-scale occlusion-aware objective over four aligned quadrant
/// outputs: at each scale the constrained loss with softmax weights plus β
/// times the mean per-quadrant smoothness, combined with the scale weights.
pub fn total_loss(
    lf: &LightField,
    outputs: &[MultiScaleOutput; 4],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_impl(lf, outputs, cfg, false).map(|(b, _)| b)
}

pub fn total_loss_with_grad(
    lf: &LightField,
    outputs: &[MultiScaleOutput; 4],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, [OutputGrads; 4])> {
    total_impl(lf, outputs, cfg, true).map(|(b, g)| (b, g.expect("gradient requested")))
}

fn total_impl(
    lf: &LightField,
    outputs: &[MultiScaleOutput; 4],
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<[OutputGrads; 4]>)> {
    check_scales(lf, &outputs.iter().collect::<Vec<_>>(), cfg)?;
    let scales = cfg.scale_weights.len();
    let pyramid = lf_pyramid(lf, scales)?;
    let mut grads: Option<[OutputGrads; 4]> =
        with_grad.then(|| std::array::from_fn(|i| OutputGrads::zeros_like(&outputs[i])));
    let mut breakdown = LossBreakdown {
        total: 0.0,
        c_rec: Vec::with_capacity(scales),
        sm: Vec::with_capacity(scales),
    };
    for (s, level) in pyramid.iter().enumerate() {
        let ws = cfg.scale_weights[s];
        let disparities: [Array2<f64>; 4] =
            std::array::from_fn(|i| outputs[i].scales[s].disparity.clone());
        let logits: [Array2<f64>; 4] = std::array::from_fn(|i| outputs[i].scales[s].logit.clone());
        let weights = reliability_softmax(&logits)?;
        let (c_rec, cg) = if with_grad {
            let (l, g) = constrained_photometric_loss_with_grad(level, &disparities, &weights)?;
            (l, Some(g))
        } else {
            (constrained_photometric_loss(level, &disparities, &weights)?, None)
        };
        let mut sm = 0.0;
        let mut sm_grads: Vec<Array2<f64>> = Vec::new();
        if cfg.beta > 0.0 {
            for d in &disparities {
                let (l, g) = smoothness_impl(d.view(), level.central_view(), cfg.gamma, with_grad)?;
                sm += l / 4.0;
                sm_grads.extend(g);
            }
        }
        breakdown.c_rec.push(c_rec);
        breakdown.sm.push(sm);
        breakdown.total += ws * (c_rec + cfg.beta * sm);

        if let (Some(grads), Some(cg)) = (grads.as_mut(), cg) {
            let dlogit = softmax_backward(&weights, &cg.weights);
            for i in 0..4 {
                let target = &mut grads[i].scales[s];
                target.disparity = &cg.disparity[i] * ws;
                if let Some(g) = sm_grads.get(i) {
                    target.disparity.scaled_add(ws * cfg.beta / 4.0, g);
                }
                target.logit = &dlogit[i] * ws;
            }
        }
    }
    Ok((breakdown, grads))
}

/// Occlusion-unaware baseline: every view reconstructs the central view
/// from a single disparity map; logits are ignored.
pub fn total_loss_unconstrained(
    lf: &LightField,
    output: &MultiScaleOutput,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_unconstrained_impl(lf, output, cfg, false).map(|(b, _)| b)
}

pub fn total_loss_unconstrained_with_grad(
    lf: &LightField,
    output: &MultiScaleOutput,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads)> {
    total_unconstrained_impl(lf, output, cfg, true)
        .map(|(b, g)| (b, g.expect("gradient requested")))
}

fn total_unconstrained_impl(
    lf: &LightField,
    output: &MultiScaleOutput,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<OutputGrads>)> {
    check_scales(lf, &[output], cfg)?;
    let scales = cfg.scale_weights.len();
    let pyramid = lf_pyramid(lf, scales)?;
    let mut grads = with_grad.then(|| OutputGrads::zeros_like(output));
    let mut breakdown = LossBreakdown {
        total: 0.0,
        c_rec: Vec::with_capacity(scales),
        sm: Vec::with_capacity(scales),
    };
    for (s, level) in pyramid.iter().enumerate() {
        let ws = cfg.scale_weights[s];
        let d = output.scales[s].disparity.view();
        let (rec, rec_grad) = photometric_loss_unconstrained_with_grad(level, d)?;
        let (sm, sm_grad) = if cfg.beta > 0.0 {
            let (l, g) = smoothness_loss_with_grad(d, level.central_view(), cfg.gamma)?;
            (l, Some(g))
        } else {
            (0.0, None)
        };
        breakdown.c_rec.push(rec);
        breakdown.sm.push(sm);
        breakdown.total += ws * (rec + cfg.beta * sm);
        if let Some(g) = grads.as_mut() {
            let target: &mut ScaleMaps = &mut g.scales[s];
            target.disparity = rec_grad * ws;
            if let Some(sg) = sm_grad {
                target.disparity.scaled_add(ws * cfg.beta, &sg);
            }
        }
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lf::{synth_scene, Rect, SceneConfig, SceneLayout};
    use crate::model::HEAD_SCALES;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps4(v: [f64; 4]) -> [Array2<f64>; 4] {
        std::array::from_fn(|i| Array2::from_elem((1, 1), v[i]))
    }

    fn weights_at(w: &ReliabilityWeights) -> [f64; 4] {
        std::array::from_fn(|i| w.maps()[i][[0, 0]])
    }

    #[test]
    fn softmax_examples() {
        let eq = reliability_softmax(&maps4([0.7; 4])).unwrap();
        assert_eq!(weights_at(&eq), [0.25; 4]);
        let w = reliability_softmax(&maps4([2f64.ln(), 0.0, 0.0, 0.0])).unwrap();
        for (got, want) in weights_at(&w).iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
        let shifted = reliability_softmax(&maps4([2f64.ln() + 5.0, 5.0, 5.0, 5.0])).unwrap();
        for (a, b) in weights_at(&w).iter().zip(weights_at(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(reliability_softmax(&maps4([f64::NAN, 0.0, 0.0, 0.0])).is_err());
        // huge logits do not overflow
        let big = reliability_softmax(&maps4([1e4, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(weights_at(&big)[0], 1.0);
    }

    #[test]
    fn weights_constructor_checks_normalization() {
        assert!(ReliabilityWeights::new(maps4([0.25; 4])).is_ok());
        assert!(ReliabilityWeights::new(maps4([0.3, 0.3, 0.3, 0.3])).is_err());
        assert!(ReliabilityWeights::new(maps4([1.5, -0.5, 0.0, 0.0])).is_err());
    }

    fn plane(d: f64, h: usize, w: usize, angular: (usize, usize), seed: u64) -> LightField {
        let cfg = SceneConfig {
            height: h,
            width: w,
            angular,
            layout: SceneLayout::Plane { disparity: d },
            ..SceneConfig::default()
        };
        synth_scene(&cfg, seed).unwrap().lf
    }

    /// 3×3 views of 2×2 pixels, each view a constant gray level.
    fn constant_views(levels: [[f64; 3]; 3]) -> LightField {
        let data = Array5::from_shape_fn((3, 3, 2, 2, 1), |(u, v, _, _, _)| levels[u][v]);
        LightField::new(data).unwrap()
    }

    #[test]
    fn unconstrained_examples() {
        for d in [-2.0, 1.0, 2.0] {
            let lf = plane(d, 32, 32, (7, 7), 4);
            let loss =
                photometric_loss_unconstrained(&lf, Array2::from_elem((32, 32), d).view()).unwrap();
            assert!(loss < 1e-6, "d={d}: {loss}");
        }
        let flat = constant_views([[0.4; 3]; 3]);
        let any = array![[0.3, -1.7], [1.0, 0.0]];
        assert!(photometric_loss_unconstrained(&flat, any.view()).unwrap() < 1e-12);
        let offset = constant_views([[0.7, 0.7, 0.7], [0.7, 0.5, 0.7], [0.7, 0.7, 0.7]]);
        let loss = photometric_loss_unconstrained(&offset, Array2::zeros((2, 2)).view()).unwrap();
        assert!((loss - 0.2).abs() < 1e-12);
        // everything out of frame
        assert!(photometric_loss_unconstrained(&offset, Array2::from_elem((2, 2), 9.0).view()).is_err());
    }

    #[test]
    fn constrained_examples() {
        let lf = plane(1.0, 32, 32, (7, 7), 5);
        let gt: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::from_elem((32, 32), 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits: [Array2<f64>; 4] =
            std::array::from_fn(|_| Array2::from_shape_fn((32, 32), |_| rng.random_range(-3.0..3.0)));
        let w = reliability_softmax(&logits).unwrap();
        assert!(constrained_photometric_loss(&lf, &gt, &w).unwrap() < 1e-6);

        // per-quadrant mean residuals (0, r, r, r)
        let r = 0.1;
        let c = 0.5;
        let a = c + 1.5 * r;
        let lf = constant_views([[c, c, a], [c, c, a], [a, a, c]]);
        let zero: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((2, 2)));
        let uniform = ReliabilityWeights::uniform(2, 2);
        let loss = constrained_photometric_loss(&lf, &zero, &uniform).unwrap();
        assert!((loss - 0.75 * r).abs() < 1e-12, "{loss}");
        let only_first = ReliabilityWeights::new(std::array::from_fn(|i| {
            Array2::from_elem((2, 2), if i == 0 { 1.0 } else { 0.0 })
        }))
        .unwrap();
        assert_eq!(constrained_photometric_loss(&lf, &zero, &only_first).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        let flat = Array3::from_elem((1, 4, 1), 0.5);
        assert_eq!(smoothness_loss(Array2::from_elem((1, 4), 3.0).view(), flat.view(), 150.0).unwrap(), 0.0);
        let step = array![[0.0, 0.0, 1.0, 1.0]];
        let got = smoothness_loss(step.view(), flat.view(), 150.0).unwrap();
        assert!((got - 0.5 / 3.0).abs() < 1e-15);
        let mut edge = flat.clone();
        edge[[0, 2, 0]] = 0.6;
        edge[[0, 3, 0]] = 0.6;
        let got = smoothness_loss(step.view(), edge.view(), 150.0).unwrap();
        assert!((got - 0.5 / 3.0 * (-15.0f64).exp()).abs() < 1e-15);
        assert!(got < 1e-7);
        // vertical direction counts too
        let col = Array3::from_elem((4, 1, 3), 0.2);
        let vstep = array![[0.0], [0.0], [2.0], [2.0]];
        let got = smoothness_loss(vstep.view(), col.view(), 150.0).unwrap();
        assert!((got - 0.5 * 2.0 / 3.0).abs() < 1e-15);
    }

    fn oracle_outputs(d: f64, h: usize, w: usize, logit_seed: u64) -> [MultiScaleOutput; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(logit_seed);
        std::array::from_fn(|_| MultiScaleOutput {
            scales: (0..HEAD_SCALES)
                .map(|s| ScaleMaps {
                    disparity: Array2::from_elem((h >> s, w >> s), d / (1 << s) as f64),
                    logit: Array2::from_shape_fn((h >> s, w >> s), |_| rng.random_range(-2.0..2.0)),
                })
                .collect(),
        })
    }

    #[test]
    fn total_loss_of_oracle_outputs() {
        let cfg = LossConfig::default();
        let flat = LightField::new(Array5::from_elem((5, 5, 16, 16, 3), 0.5)).unwrap();
        let b = total_loss(&flat, &oracle_outputs(1.3, 16, 16, 0), &cfg).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.c_rec.len(), 3);

        // a shift of 2 stays integral after one pooling
        let lf = plane(2.0, 32, 32, (5, 5), 8);
        let no_smooth = LossConfig { beta: 0.0, ..cfg.clone() };
        let outs = oracle_outputs(2.0, 32, 32, 1);
        let b = total_loss(&lf, &outs, &no_smooth).unwrap();
        assert!(b.c_rec[0] < 1e-9 && b.c_rec[1] < 1e-9, "{b:?}");
        assert_eq!(b.sm, vec![0.0; 3]);
        let weighted: f64 = b.c_rec.iter().zip(&no_smooth.scale_weights).map(|(c, w)| c * w).sum();
        assert!((b.total - weighted).abs() < 1e-15);

        let mut shifted = outs.clone();
        for o in &mut shifted {
            for s in &mut o.scales {
                s.logit += 4.0;
            }
        }
        let b2 = total_loss(&lf, &shifted, &cfg).unwrap();
        let b1 = total_loss(&lf, &outs, &cfg).unwrap();
        assert!((b1.total - b2.total).abs() < 1e-12);
    }

    #[test]
    fn misaligned_scales_are_rejected() {
        let lf = plane(0.0, 16, 16, (3, 3), 1);
        let mut outs = oracle_outputs(0.0, 16, 16, 0);
        outs[2].scales[1].disparity = Array2::zeros((7, 8));
        assert!(total_loss(&lf, &outs, &LossConfig::default()).is_err());
        outs[2].scales.truncate(2);
        assert!(total_loss(&lf, &outs, &LossConfig::default()).is_err());
    }

    fn slot(
        outs: &mut [MultiScaleOutput; 4],
        i: usize,
        s: usize,
        which: usize,
        idx: (usize, usize),
    ) -> &mut f64 {
        let m = &mut outs[i].scales[s];
        if which == 0 {
            &mut m.disparity[idx]
        } else {
            &mut m.logit[idx]
        }
    }

    /// Counts coordinates whose analytic derivative matches a central
    /// difference, out of all coordinates.
    fn fd_agreement(
        outs: &mut [MultiScaleOutput; 4],
        grads: &[OutputGrads; 4],
        f: impl Fn(&[MultiScaleOutput; 4]) -> f64,
    ) -> (usize, usize) {
        let eps = 1e-3;
        let (mut ok, mut total) = (0, 0);
        for i in 0..4 {
            for s in 0..outs[i].scales.len() {
                for which in 0..2 {
                    let dim = outs[i].scales[s].disparity.dim();
                    for r in 0..dim.0 {
                        for c in 0..dim.1 {
                            let orig = *slot(outs, i, s, which, (r, c));
                            *slot(outs, i, s, which, (r, c)) = orig + eps;
                            let plus = f(outs);
                            *slot(outs, i, s, which, (r, c)) = orig - eps;
                            let minus = f(outs);
                            *slot(outs, i, s, which, (r, c)) = orig;
                            let numeric = (plus - minus) / (2.0 * eps);
                            let g = &grads[i].scales[s];
                            let analytic = if which == 0 { g.disparity[[r, c]] } else { g.logit[[r, c]] };
                            let scale = numeric.abs().max(analytic.abs());
                            total += 1;
                            if (numeric - analytic).abs() <= 1e-3 * scale || scale < 1e-10 {
                                ok += 1;
                            }
                        }
                    }
                }
            }
        }
        (ok, total)
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = SceneConfig {
            height: 8,
            width: 8,
            angular: (3, 3),
            layout: SceneLayout::Plane { disparity: 0.7 },
            ..SceneConfig::default()
        };
        let lf = synth_scene(&cfg, 2).unwrap().lf;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut outs: [MultiScaleOutput; 4] = std::array::from_fn(|_| MultiScaleOutput {
            scales: (0..HEAD_SCALES)
                .map(|s| ScaleMaps {
                    disparity: Array2::from_shape_fn((8 >> s, 8 >> s), |_| {
                        0.7 / (1 << s) as f64 + rng.random_range(-0.3..0.3)
                    }),
                    logit: Array2::from_shape_fn((8 >> s, 8 >> s), |_| rng.random_range(-1.0..1.0)),
                })
                .collect(),
        });
        let loss_cfg = LossConfig::default();
        let (_, grads) = total_loss_with_grad(&lf, &outs, &loss_cfg).unwrap();
        let (ok, total) = fd_agreement(&mut outs, &grads, |o| total_loss(&lf, o, &loss_cfg).unwrap().total);
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn unconstrained_gradient_matches_finite_differences() {
        let lf = plane(-0.6, 16, 16, (5, 5), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut out = MultiScaleOutput {
            scales: (0..HEAD_SCALES)
                .map(|s| ScaleMaps {
                    disparity: Array2::from_shape_fn((16 >> s, 16 >> s), |_| rng.random_range(-1.0..0.3)),
                    logit: Array2::zeros((16 >> s, 16 >> s)),
                })
                .collect(),
        };
        let cfg = LossConfig::default();
        let (_, g) = total_loss_unconstrained_with_grad(&lf, &out, &cfg).unwrap();
        let eps = 1e-4;
        let (mut ok, mut total) = (0, 0);
        for s in 0..HEAD_SCALES {
            let dim = out.scales[s].disparity.dim();
            for idx in [(0, 0), (dim.0 / 2, dim.1 / 3), (dim.0 - 1, dim.1 - 1), (1, dim.1 - 2)] {
                let orig = out.scales[s].disparity[idx];
                out.scales[s].disparity[idx] = orig + eps;
                let plus = total_loss_unconstrained(&lf, &out, &cfg).unwrap().total;
                out.scales[s].disparity[idx] = orig - eps;
                let minus = total_loss_unconstrained(&lf, &out, &cfg).unwrap().total;
                out.scales[s].disparity[idx] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = g.scales[s].disparity[idx];
                total += 1;
                if (numeric - analytic).abs() <= 1e-3 * numeric.abs().max(analytic.abs()).max(1e-8) {
                    ok += 1;
                }
            }
            assert!(g.scales[s].logit.iter().all(|&v| v == 0.0));
        }
        assert!(ok + 1 >= total, "{ok}/{total}");
    }

    #[test]
    fn beta_zero_reports_no_smoothness() {
        let lf = plane(0.5, 16, 16, (3, 3), 2);
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let outs = oracle_outputs(0.1, 16, 16, 2);
        let b = total_loss(&lf, &outs, &cfg).unwrap();
        assert_eq!(b.sm, vec![0.0; 3]);
        let b = total_loss_unconstrained(&lf, &outs[0], &cfg).unwrap();
        assert_eq!(b.sm, vec![0.0; 3]);
    }

    #[test]
    fn occluded_quadrant_loses_weight_under_logit_descent() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            angular: (5, 5),
            layout: SceneLayout::Occluder {
                background: -1.0,
                foreground: 1.0,
                rect: Rect { top: 10, left: 10, height: 12, width: 12 },
            },
            ..SceneConfig::default()
        };
        let scene = synth_scene(&cfg, 11).unwrap();
        let (mean_free, occluded) = relax_logits(&scene, 200);
        assert!(mean_free > 0.25, "{mean_free}");
        for (q, m) in occluded.iter().enumerate() {
            if let Some(m) = m {
                assert!(mean_free > *m, "free {mean_free} vs quadrant {} {m}", q + 1);
            }
        }
    }

    /// Gradient descent on the finest-scale logits with disparities fixed
    /// to ground truth. Returns the mean weight of occlusion-free quadrants
    /// at occluded pixels, and each quadrant's mean weight where it is
    /// occluded.
    pub(crate) fn relax_logits(
        scene: &crate::lf::SyntheticScene,
        steps: usize,
    ) -> (f64, [Option<f64>; 4]) {
        let lf = &scene.lf;
        let (h, w) = lf.spatial();
        let (m, n) = lf.angular();
        let d: [Array2<f64>; 4] = std::array::from_fn(|_| scene.gt_disparity.clone());
        let mut logits: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((h, w)));
        for _ in 0..steps {
            let weights = reliability_softmax(&logits).unwrap();
            let (_, g) = constrained_photometric_loss_with_grad(lf, &d, &weights).unwrap();
            let dl = softmax_backward(&weights, &g.weights);
            let top = dl.iter().flat_map(|a| a.iter()).fold(0.0f64, |a, b| a.max(b.abs()));
            if top == 0.0 {
                break;
            }
            for i in 0..4 {
                logits[i].scaled_add(-0.05 / top, &dl[i]);
            }
        }
        let weights = reliability_softmax(&logits).unwrap();
        let mut free_sum = 0.0;
        let mut free_n = 0usize;
        let mut occ = [(0.0, 0usize); 4];
        for r in 0..h {
            for c in 0..w {
                if !scene.gt_occlusion[[r, c]] {
                    continue;
                }
                let blocked = scene.occluding_views(r, c);
                let mut free = Vec::new();
                for q in Quadrant::ALL {
                    let hit = blocked.iter().any(|&(u, v)| q.contains(m, n, u, v));
                    let wq = weights.get(q)[[r, c]];
                    if hit {
                        occ[q.index()].0 += wq;
                        occ[q.index()].1 += 1;
                    } else {
                        free.push(wq);
                    }
                }
                if !free.is_empty() {
                    free_sum += free.iter().sum::<f64>() / free.len() as f64;
                    free_n += 1;
                }
            }
        }
        assert!(free_n > 0, "no occluded pixel with a free quadrant");
        (
            free_sum / free_n as f64,
            occ.map(|(s, k)| (k > 0).then(|| s / k as f64)),
        )
    }

    proptest! {
        #[test]
        fn softmax_weights_are_normalized(vals in proptest::collection::vec(-30.0f64..30.0, 16)) {
            let logits: [Array2<f64>; 4] = std::array::from_fn(|i| {
                Array2::from_shape_vec((2, 2), vals[4 * i..4 * i + 4].to_vec()).unwrap()
            });
            let w = reliability_softmax(&logits).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    let sum: f64 = w.maps().iter().map(|m| m[[r, c]]).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                    prop_assert!(w.maps().iter().all(|m| (0.0..=1.0).contains(&m[[r, c]])));
                }
            }
        }

        #[test]
        fn losses_are_nonnegative(seed in 0u64..500, d in -1.5f64..1.5) {
            let lf = plane(0.4, 16, 16, (3, 3), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Array2::from_shape_fn((16, 16), |_| d + rng.random_range(-0.2..0.2));
            prop_assert!(photometric_loss_unconstrained(&lf, map.view()).unwrap() >= 0.0);
            prop_assert!(smoothness_loss(map.view(), lf.central_view(), 150.0).unwrap() >= 0.0);
            let maps: [Array2<f64>; 4] = std::array::from_fn(|_| map.clone());
            prop_assert!(constrained_photometric_loss(&lf, &maps, &ReliabilityWeights::uniform(16, 16)).unwrap() >= 0.0);
        }
    }
}
