//! Minimal feed-forward network engine with explicit backward passes.
//!
//! Networks are flat lists of named [`Layer`]s. A training forward pass
//! returns a [`Trace`] holding whatever each layer needs for its backward
//! pass; [`Network::backward`] then produces the input gradient and, when
//! asked, accumulates parameter gradients. Everything runs single-threaded
//! in a fixed order, so identical inputs give bit-identical results.

mod layers;
mod optim;

pub use layers::{Conv2d, Layer, Linear};
pub use optim::{Adam, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, SaicError};
use crate::tensor::Tensor;
use layers::Cache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<NamedLayer>,
}

/// Per-layer caches from a training forward pass.
pub struct Trace {
    caches: Vec<Cache>,
}

/// Parameter gradients, one buffer per parameter tensor.
pub type Grads = Vec<Vec<f32>>;

impl Network {
    pub fn new() -> Self {
        Network { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.layers.push(NamedLayer {
            name: name.into(),
            layer,
        });
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: Layer) -> Self {
        self.push(name, layer);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.layer.collect_params(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.layer.collect_params_mut(&mut out);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// CRC-32 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params() {
            for v in p {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l
                .layer
                .output_shape(&s)
                .map_err(|e| SaicError::Contract(format!("layer '{}': {e}", l.name)))?;
        }
        Ok(s)
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.layer.forward(&h, false)?.0;
        }
        Ok(h)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_trace(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (next, cache) = l.layer.forward(&h, true)?;
            h = next;
            caches.push(cache.expect("training forward always caches"));
        }
        Ok((h, Trace { caches }))
    }

    /// Backward pass. Accumulates into `grads` when given and returns the
    /// gradient with respect to the network input when `need_input_grad`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        mut grads: Option<&mut Grads>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        contract!(
            trace.caches.len() == self.layers.len(),
            "trace has {} entries for {} layers",
            trace.caches.len(),
            self.layers.len()
        );
        let counts: Vec<usize> = self.layers.iter().map(|l| l.layer.param_tensors()).collect();
        let mut offset: usize = counts.iter().sum();
        let mut g = grad_out.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            offset -= counts[idx];
            let slot = grads
                .as_deref_mut()
                .map(|gs| &mut gs[offset..offset + counts[idx]]);
            let want = idx > 0 || need_input_grad;
            match l.layer.backward(&trace.caches[idx], &g, slot, want)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// Splits the network after the layer called `name`.
    pub fn split_after(&self, name: &str) -> Result<(Network, Network)> {
        let idx = self
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| SaicError::Config(format!("no layer named '{name}'")))?;
        Ok((
            Network {
                layers: self.layers[..=idx].to_vec(),
            },
            Network {
                layers: self.layers[idx + 1..].to_vec(),
            },
        ))
    }
}

/// Numerically stable softmax over each row of a `[B, C]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows`] given its output `probs`.
pub fn softmax_rows_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (_, c) = probs.dims2()?;
    let mut dx = grad_out.clone();
    for (g, p) in dx.data_mut().chunks_mut(c).zip(probs.data().chunks(c)) {
        let dot: f64 = g.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
        for (gv, &pv) in g.iter_mut().zip(p) {
            *gv = pv * (*gv - dot as f32);
        }
    }
    Ok(dx)
}
