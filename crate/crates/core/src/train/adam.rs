use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor in the
/// network's canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, network: &Network) -> Self {
        let zeros: Vec<Vec<f32>> = network
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.len()])
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn update(&mut self, network: &mut Network) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let step_size = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((_, p), (m, v)) in network
            .params_mut()
            .into_iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = (v[i] as f64).sqrt() + eps * (1.0 - beta2.powi(t)).sqrt();
                p.value[i] -= (step_size * m[i] as f64 / denom) as f32;
            }
        }
    }

    pub(crate) fn store(&self, network: &Network, ck: &mut Checkpoint) {
        for (((name, _), m), v) in network.params().iter().zip(&self.m).zip(&self.v) {
            ck.extra.push((format!("adam_m/{name}"), m.clone()));
            ck.extra.push((format!("adam_v/{name}"), v.clone()));
        }
    }

    pub(crate) fn restore(cfg: AdamConfig, step: u64, ck: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(cfg, &ck.network);
        adam.step = step;
        for (i, (name, p)) in ck.network.params().iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam_{kind}/{name}");
                let data = ck
                    .extra(&key)
                    .ok_or_else(|| Error::malformed("checkpoint", format!("missing {key}")))?;
                if data.len() != p.len() {
                    return Err(Error::malformed("checkpoint", format!("{key} has wrong length")));
                }
                slot.copy_from_slice(data);
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, NetworkConfig};

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let cfg = NetworkConfig {
            scale_features: [2, 2, 2, 2],
            ..NetworkConfig::default()
        };
        let mut net = build_network(cfg, 0).unwrap();
        let before = net.clone();
        for (i, (_, p)) in net.params_mut().into_iter().enumerate() {
            for (k, g) in p.grad.iter_mut().enumerate() {
                *g = if (i + k) % 2 == 0 { 3.0 } else { -0.01 };
            }
        }
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &net);
        adam.update(&mut net);
        for ((i, (_, a)), (_, b)) in net.params().into_iter().enumerate().zip(before.params()) {
            for k in 0..a.len() {
                let want = if (i + k) % 2 == 0 { -1e-3 } else { 1e-3 };
                let moved = (a.value[k] - b.value[k]) as f64;
                assert!((moved - want).abs() < 1e-5, "{moved} vs {want}");
            }
        }
    }
}
