use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    concat, max_pool, max_pool_backward, split, Activation, Conv3x3, Feature, Param, UpConv2x2,
};
use super::{MultiScaleOutput, NetworkConfig, ScaleMaps, HEAD_SCALES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    conv1: Conv3x3,
    conv2: Conv3x3,
}

struct ResTape {
    input: Feature,
    hidden: Feature,
    output: Feature,
}

impl ResBlock {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv3x3::new(channels, channels, rng),
            conv2: Conv3x3::new(channels, channels, rng),
        }
    }

    fn run(&self, act: Activation, x: Feature, keep: bool) -> (Feature, Option<ResTape>) {
        let hidden = act.forward(self.conv1.forward(&x));
        let mut sum = self.conv2.forward(&hidden);
        sum += &x;
        let output = act.forward(sum);
        if keep {
            (
                output.clone(),
                Some(ResTape {
                    input: x,
                    hidden,
                    output,
                }),
            )
        } else {
            (output, None)
        }
    }

    fn backward(&mut self, act: Activation, tape: &ResTape, dy: Feature) -> Feature {
        let ds = act.backward(&tape.output, dy);
        let dhidden = self.conv2.backward(&tape.hidden, &ds);
        let dpre = act.backward(&tape.hidden, dhidden);
        let mut dx = self.conv1.backward(&tape.input, &dpre);
        dx += &ds;
        dx
    }

    fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
        ]
    }
}

/// One convolution followed by two residual blocks.
#[derive(Debug, Clone, PartialEq)]
struct Stage {
    conv: Conv3x3,
    res: [ResBlock; 2],
}

struct StageTape {
    input: Feature,
    conv_out: Feature,
    res: [ResTape; 2],
}

impl Stage {
    fn new(in_channels: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv3x3::new(in_channels, channels, rng);
        let res = [ResBlock::new(channels, rng), ResBlock::new(channels, rng)];
        Self { conv, res }
    }

    fn run(&self, act: Activation, x: Feature, keep: bool) -> (Feature, Option<StageTape>) {
        let conv_out = act.forward(self.conv.forward(&x));
        let (r1, t1) = self.res[0].run(act, conv_out.clone(), keep);
        let (r2, t2) = self.res[1].run(act, r1, keep);
        let tape = keep.then(|| StageTape {
            input: x,
            conv_out,
            res: [t1.expect("kept"), t2.expect("kept")],
        });
        (r2, tape)
    }

    fn backward(&mut self, act: Activation, tape: &StageTape, dy: Feature) -> Feature {
        let d = self.res[1].backward(act, &tape.res[1], dy);
        let d = self.res[0].backward(act, &tape.res[0], d);
        let d = act.backward(&tape.conv_out, d);
        self.conv.backward(&tape.input, &d)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("conv.weight".to_string(), &self.conv.weight),
            ("conv.bias".to_string(), &self.conv.bias),
        ];
        for (i, r) in self.res.iter().enumerate() {
            out.extend(r.params().into_iter().map(|(n, p)| (format!("res{i}.{n}"), p)));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = vec![
            ("conv.weight".to_string(), &mut self.conv.weight),
            ("conv.bias".to_string(), &mut self.conv.bias),
        ];
        for (i, r) in self.res.iter_mut().enumerate() {
            out.extend(
                r.params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("res{i}.{n}"), p)),
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    depth: Conv3x3,
    reliability: Conv3x3,
}

/// Encoder–decoder with skip connections and per-scale disparity and
/// reliability heads. Index `s` of every array is the scale `1/2ˢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    encoder: [Stage; 4],
    up: [UpConv2x2; 3],
    decoder: [Stage; 3],
    heads: [Head; HEAD_SCALES],
}

/// Activations retained by a training forward pass.
pub struct Tape {
    encoder: Vec<StageTape>,
    pool_args: Vec<(Vec<u8>, (usize, usize, usize))>,
    up_inputs: Vec<Feature>,
    up_outputs: Vec<Feature>,
    decoder: Vec<StageTape>,
    head_inputs: Vec<Feature>,
}

/// `∂L/∂output` per head scale, same extents as [`MultiScaleOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub scales: Vec<ScaleMaps>,
}

impl OutputGrads {
    pub fn zeros_like(out: &MultiScaleOutput) -> Self {
        Self {
            scales: out
                .scales
                .iter()
                .map(|s| ScaleMaps {
                    disparity: Array2::zeros(s.disparity.dim()),
                    logit: Array2::zeros(s.logit.dim()),
                })
                .collect(),
        }
    }
}

impl Network {
    /// Builds a network with fan-in scaled normal weights and zero biases,
    /// deterministic in `seed`. Residual branches and heads are further
    /// scaled by the config's init gains so that initial disparities stay
    /// within a few pixels.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.scale_features;
        let encoder = [
            Stage::new(cfg.in_channels(), f[0], &mut rng),
            Stage::new(f[0], f[1], &mut rng),
            Stage::new(f[1], f[2], &mut rng),
            Stage::new(f[2], f[3], &mut rng),
        ];
        let up = [
            UpConv2x2::new(f[1], f[0], &mut rng),
            UpConv2x2::new(f[2], f[1], &mut rng),
            UpConv2x2::new(f[3], f[2], &mut rng),
        ];
        let decoder = [
            Stage::new(2 * f[0], f[0], &mut rng),
            Stage::new(2 * f[1], f[1], &mut rng),
            Stage::new(2 * f[2], f[2], &mut rng),
        ];
        let mut heads = std::array::from_fn(|s| Head {
            depth: Conv3x3::new(f[s], 1, &mut rng),
            reliability: Conv3x3::new(f[s], 1, &mut rng),
        });
        if cfg.head_init_gain != 1.0 {
            for head in &mut heads {
                for p in [&mut head.depth.weight, &mut head.reliability.weight] {
                    p.value.iter_mut().for_each(|v| *v *= cfg.head_init_gain);
                }
            }
        }
        let mut net = Self {
            cfg,
            encoder,
            up,
            decoder,
            heads,
        };
        if net.cfg.residual_init_gain != 1.0 {
            let g = net.cfg.residual_init_gain;
            for stage in net.encoder.iter_mut().chain(net.decoder.iter_mut()) {
                for r in &mut stage.res {
                    r.conv2.weight.value.iter_mut().for_each(|v| *v *= g);
                }
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Inference pass.
    pub fn forward(&self, input: &Feature) -> Result<MultiScaleOutput> {
        self.run(input, false).map(|(out, _)| out)
    }

    /// Forward pass retaining what [`Network::backward`] needs.
    pub fn forward_with_tape(&self, input: &Feature) -> Result<(MultiScaleOutput, Tape)> {
        self.run(input, true)
            .map(|(out, tape)| (out, tape.expect("tape requested")))
    }

    fn run(&self, input: &Feature, keep: bool) -> Result<(MultiScaleOutput, Option<Tape>)> {
        let (c, h, w) = input.dim();
        if c != self.cfg.in_channels() {
            return Err(Error::mismatch(
                "network input channels",
                self.cfg.in_channels(),
                c,
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "network input {h}x{w} is not a multiple of 8"
            )));
        }
        let act = self.cfg.activation;
        let mut tape = keep.then(|| Tape {
            encoder: Vec::new(),
            pool_args: Vec::new(),
            up_inputs: Vec::new(),
            up_outputs: Vec::new(),
            decoder: Vec::new(),
            head_inputs: Vec::new(),
        });

        let mut skips: Vec<Feature> = Vec::with_capacity(4);
        let mut x = input.as_standard_layout().into_owned();
        for (s, stage) in self.encoder.iter().enumerate() {
            let (y, t) = stage.run(act, x, keep);
            if let (Some(tape), Some(t)) = (tape.as_mut(), t) {
                tape.encoder.push(t);
            }
            if s < 3 {
                let (pooled, arg) = max_pool(&y);
                if let Some(tape) = tape.as_mut() {
                    tape.pool_args.push((arg, y.dim()));
                }
                skips.push(y);
                x = pooled;
            } else {
                x = y;
            }
        }

        let mut scales: Vec<Option<ScaleMaps>> = vec![None; HEAD_SCALES];
        // decoder runs coarse to fine: s = 2, 1, 0
        for s in (0..3).rev() {
            let upsampled = act.forward(self.up[s].forward(&x));
            let merged = concat(&upsampled, &skips[s]);
            if let Some(tape) = tape.as_mut() {
                tape.up_inputs.push(x);
                tape.up_outputs.push(upsampled);
            }
            let (y, t) = self.decoder[s].run(act, merged, keep);
            if let (Some(tape), Some(t)) = (tape.as_mut(), t) {
                tape.decoder.push(t);
            }
            if s < HEAD_SCALES {
                let head = &self.heads[s];
                let disparity = head.depth.forward(&y);
                let logit = head.reliability.forward(&y);
                scales[s] = Some(ScaleMaps {
                    disparity: to_map(&disparity),
                    logit: to_map(&logit),
                });
                if let Some(tape) = tape.as_mut() {
                    tape.head_inputs.push(y.clone());
                }
            }
            x = y;
        }
        let out = MultiScaleOutput {
            scales: scales.into_iter().map(|s| s.expect("every scale has a head")).collect(),
        };
        if out
            .scales
            .iter()
            .any(|s| s.disparity.iter().chain(s.logit.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok((out, tape))
    }

    /// Backpropagates output gradients, accumulating parameter gradients
    /// into `self`'s `grad` buffers.
    pub fn backward(&mut self, tape: &Tape, grads: &OutputGrads) -> Result<()> {
        if grads.scales.len() != HEAD_SCALES {
            return Err(Error::mismatch(
                "output gradient scales",
                HEAD_SCALES,
                grads.scales.len(),
            ));
        }
        let act = self.cfg.activation;
        // tape vectors are in decoder execution order (scales 2, 1, 0), so
        // scale s lives at step 2 - s; gradients flow fine to coarse
        let mut carry: Option<Feature> = None;
        let mut skip_grads: Vec<Option<Feature>> = vec![None, None, None];
        for s in 0..3 {
            let step = 2 - s;
            let mut dy = carry.take().unwrap_or_else(|| {
                Feature::zeros(tape.decoder[step].res[1].output.dim())
            });
            if s < HEAD_SCALES {
                let head_in = &tape.head_inputs[step];
                let g = &grads.scales[s];
                let head = &mut self.heads[s];
                dy += &head.depth.backward(head_in, &from_map(&g.disparity));
                dy += &head.reliability.backward(head_in, &from_map(&g.logit));
            }
            let dmerged = self.decoder[s].backward(act, &tape.decoder[step], dy);
            let up_channels = tape.up_outputs[step].dim().0;
            let (dup, dskip) = split(&dmerged, up_channels);
            skip_grads[s] = Some(dskip);
            let dup = act.backward(&tape.up_outputs[step], dup);
            carry = Some(self.up[s].backward(&tape.up_inputs[step], &dup));
        }
        let mut dx = carry.expect("decoder produced a gradient");
        for s in (0..4).rev() {
            let d = self.encoder[s].backward(act, &tape.encoder[s], dx);
            if s == 0 {
                break;
            }
            let (arg, dim) = &tape.pool_args[s - 1];
            let mut prev = max_pool_backward(&d, arg, *dim);
            prev += skip_grads[s - 1].as_ref().expect("skip gradient recorded");
            dx = prev;
        }
        Ok(())
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate() {
            out.extend(stage.params().into_iter().map(|(n, p)| (format!("enc{s}.{n}"), p)));
        }
        for (s, up) in self.up.iter().enumerate() {
            out.push((format!("up{s}.weight"), &up.weight));
            out.push((format!("up{s}.bias"), &up.bias));
        }
        for (s, stage) in self.decoder.iter().enumerate() {
            out.extend(stage.params().into_iter().map(|(n, p)| (format!("dec{s}.{n}"), p)));
        }
        for (s, head) in self.heads.iter().enumerate() {
            out.push((format!("head{s}.depth.weight"), &head.depth.weight));
            out.push((format!("head{s}.depth.bias"), &head.depth.bias));
            out.push((format!("head{s}.reliability.weight"), &head.reliability.weight));
            out.push((format!("head{s}.reliability.bias"), &head.reliability.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            out.extend(
                stage
                    .params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("enc{s}.{n}"), p)),
            );
        }
        for (s, up) in self.up.iter_mut().enumerate() {
            out.push((format!("up{s}.weight"), &mut up.weight));
            out.push((format!("up{s}.bias"), &mut up.bias));
        }
        for (s, stage) in self.decoder.iter_mut().enumerate() {
            out.extend(
                stage
                    .params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("dec{s}.{n}"), p)),
            );
        }
        for (s, head) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{s}.depth.weight"), &mut head.depth.weight));
            out.push((format!("head{s}.depth.bias"), &mut head.depth.bias));
            out.push((format!("head{s}.reliability.weight"), &mut head.reliability.weight));
            out.push((format!("head{s}.reliability.bias"), &mut head.reliability.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn to_map(x: &Feature) -> Array2<f64> {
    x.index_axis(ndarray::Axis(0), 0).mapv(|v| v as f64)
}

fn from_map(m: &Array2<f64>) -> Feature {
    m.mapv(|v| v as f32).insert_axis(ndarray::Axis(0))
}
