//! Shared multi-scale encoder–decoder over stacked sub-light-field views.

mod checkpoint;
pub mod layers;
mod network;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use layers::{Activation, Feature, Param};
pub use network::{Network, OutputGrads, Tape};

use crate::error::{Error, Result};
use crate::lf::{back_transform_map, generate_sub_lfs, LightField, Quadrant};

/// Number of decoder scales carrying heads (factors 1, 1/2, 1/4).
pub const HEAD_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Rgb,
    Gray,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Rgb => 3,
            ColorMode::Gray => 1,
        }
    }
}

/// What the network sees: one transformed quadrant sub-light-field at a
/// time, or the whole light field (the occlusion-unaware baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Quadrants,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_mode: InputMode,
    /// Angular extent of the stacked input: `(M₀, N₀)` per quadrant, or
    /// `(M, N)` in full mode.
    pub stack_angular: (usize, usize),
    pub color_mode: ColorMode,
    pub scale_features: [usize; 4],
    pub activation: Activation,
    /// Multiplier on the fan-in scaled init of the second convolution in
    /// every residual branch.
    pub residual_init_gain: f32,
    /// Multiplier on the fan-in scaled init of the output heads.
    pub head_init_gain: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Quadrants,
            stack_angular: (4, 4),
            color_mode: ColorMode::Rgb,
            scale_features: [64, 128, 256, 512],
            activation: Activation::LeakyRelu { slope: 0.1 },
            residual_init_gain: 0.1,
            head_init_gain: 0.1,
        }
    }
}

impl NetworkConfig {
    /// Config matching a full light field of angular size `(m, n)`.
    pub fn for_angular(m: usize, n: usize) -> Self {
        Self {
            stack_angular: (m.div_ceil(2), n.div_ceil(2)),
            ..Self::default()
        }
    }

    /// Baseline config seeing all `m × n` views at once.
    pub fn full_for_angular(m: usize, n: usize) -> Self {
        Self {
            input_mode: InputMode::Full,
            stack_angular: (m, n),
            ..Self::default()
        }
    }

    /// Angular extent of the light fields this network accepts.
    pub fn lf_angular(&self) -> (usize, usize) {
        let (a, b) = self.stack_angular;
        match self.input_mode {
            InputMode::Quadrants => (2 * a - 1, 2 * b - 1),
            InputMode::Full => (a, b),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stack_angular.0 * self.stack_angular.1 * self.color_mode.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let (m0, n0) = self.stack_angular;
        if m0 < 2 || n0 < 2 {
            return Err(Error::InvalidArgument(format!(
                "stacked angular size {m0}x{n0} must be at least 2x2"
            )));
        }
        if self.input_mode == InputMode::Full {
            crate::lf::check_angular(m0, n0)?;
        }
        if self.scale_features.contains(&0) {
            return Err(Error::InvalidArgument(
                "scale features must be positive".into(),
            ));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::InvalidArgument(format!(
                    "leaky slope {slope} outside [0, 1)"
                )));
            }
        }
        for (name, g) in [
            ("residual_init_gain", self.residual_init_gain),
            ("head_init_gain", self.head_init_gain),
        ] {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Pixels beyond this Chebyshev distance cannot influence an output.
    pub fn receptive_field_radius(&self) -> usize {
        // Each stage: 5 convolutions of radius 1 at its own resolution.
        // Encoder level s contributes 5·2ˢ, pooling adds 2ˢ − 1 per level
        // boundary (absorbed generously below), decoder levels mirror the
        // encoder with the upconv adding 2ˢ⁺¹ − 1.
        let enc: usize = (0..4).map(|s| 5usize << s).sum();
        let pools: usize = (0..3).map(|s| 1usize << s).sum();
        let dec: usize = (0..3).map(|s| (5usize << s) + (1usize << (s + 1))).sum();
        enc + pools + dec + 1
    }
}

/// Disparity (in pixels of its own scale) and reliability logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMaps {
    pub disparity: Array2<f64>,
    pub logit: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput {
    /// Index `s` holds the maps at factor `1/2ˢ`.
    pub scales: Vec<ScaleMaps>,
}

impl MultiScaleOutput {
    pub fn finest(&self) -> &ScaleMaps {
        &self.scales[0]
    }

    /// Spatially flips every map back into the central-view frame of `q`.
    pub fn back_transformed(&self, q: Quadrant) -> Self {
        Self {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleMaps {
                    disparity: back_transform_map(s.disparity.view(), q),
                    logit: back_transform_map(s.logit.view(), q),
                })
                .collect(),
        }
    }
}

/// Anything that maps a stacked sub-light-field to multi-scale maps.
pub trait Predictor {
    fn predict(&self, stack: &Feature) -> Result<MultiScaleOutput>;
}

impl Predictor for Network {
    fn predict(&self, stack: &Feature) -> Result<MultiScaleOutput> {
        self.forward(stack)
    }
}

pub fn build_network(cfg: NetworkConfig, seed: u64) -> Result<Network> {
    Network::new(cfg, seed)
}

/// Transformed, channel-stacked input for quadrant `q`.
pub fn quadrant_stack(lf: &LightField, q: Quadrant) -> Feature {
    let bundle = generate_sub_lfs(lf).transformed();
    bundle.get(q).stack_channels()
}

/// All four quadrant outputs at every scale, aligned to the central view.
pub fn predict_all_scales(
    predictor: &impl Predictor,
    lf: &LightField,
) -> Result<[MultiScaleOutput; 4]> {
    let (h, w) = lf.spatial();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "light field {h}x{w} is not a multiple of 8"
        )));
    }
    let bundle = generate_sub_lfs(lf).transformed();
    let mut out = Vec::with_capacity(4);
    for q in Quadrant::ALL {
        let stack = bundle.get(q).stack_channels();
        out.push(predictor.predict(&stack)?.back_transformed(q));
    }
    Ok(out.try_into().expect("four quadrants"))
}

/// Output of a full-mode network on the whole light field.
pub fn predict_full(predictor: &impl Predictor, lf: &LightField) -> Result<MultiScaleOutput> {
    let (h, w) = lf.spatial();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "light field {h}x{w} is not a multiple of 8"
        )));
    }
    predictor.predict(&lf.stack_channels())
}

/// Full-scale `(disparity, logit)` per quadrant, aligned to the central view.
pub fn predict_initial_maps(
    predictor: &impl Predictor,
    lf: &LightField,
) -> Result<[ScaleMaps; 4]> {
    let all = predict_all_scales(predictor, lf)?;
    Ok(all.map(|o| o.scales.into_iter().next().expect("finest scale")))
}
