//! Dense row-major `f32` tensors.
//!
//! Image-like data is stored NCHW. The type is deliberately small: shape
//! bookkeeping plus a flat buffer, with the numerical work done by the layer
//! implementations in [`crate::nn`].

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        contract!(
            n == data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// `(B, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        contract!(
            self.shape.len() == 4,
            "expected a 4-D tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// `(B, F)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        contract!(
            self.shape.len() == 2,
            "expected a 2-D tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        contract!(
            n == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `indices` of the leading dimension, in the given order.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Concatenates along the leading dimension.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        contract!(!parts.is_empty(), "concat of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            contract!(
                &p.shape[1..] == tail,
                "concat shape mismatch: {:?} vs {:?}",
                p.shape,
                parts[0].shape
            );
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
