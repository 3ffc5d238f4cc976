use serde::{Deserialize, Serialize};

use super::Grads;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the step counter; serialized into
/// checkpoints so training can resume bit-compatibly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    /// Fresh optimizer for the given parameter tensors.
    pub fn new(config: AdamConfig, params: &[&[f32]]) -> Self {
        let zeros: Grads = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            config,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    pub fn update(&mut self, params: Vec<&mut Vec<f32>>, grads: &Grads) -> Result<()> {
        contract!(
            params.len() == grads.len() && params.len() == self.state.m.len(),
            "optimizer state does not match network"
        );
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.m) {
            contract!(
                p.len() == g.len() && p.len() == m.len(),
                "parameter/gradient length mismatch"
            );
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear, Network};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn adam_reduces_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new().with("fc", Layer::Linear(Linear::new(2, 1, &mut rng)));
        let x = Tensor::from_vec(&[4, 2], vec![1., 0., 0., 1., 1., 1., -1., 2.]).unwrap();
        let target = [2.0f32, -1.0, 1.0, -4.0];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &net.params(),
        );
        let loss = |net: &Network| -> f32 {
            let y = net.forward(&x).unwrap();
            y.data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let start = loss(&net);
        for _ in 0..300 {
            let (y, trace) = net.forward_trace(&x).unwrap();
            let g = Tensor::from_vec(
                &[4, 1],
                y.data().iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect(),
            )
            .unwrap();
            let mut grads = net.zero_grads();
            net.backward(&trace, &g, Some(&mut grads), false).unwrap();
            opt.update(net.params_mut(), &grads).unwrap();
        }
        assert!(loss(&net) < 0.01 * start);
    }
}
