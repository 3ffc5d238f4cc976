//! Training objectives: pixel-level (TDIC), feature-level (APIC) and
//! semantic-level (SAIC). All squared norms use mean-per-element reduction.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, SaicError};
use crate::gsw::SemanticWeights;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Pixel MSE.
    Tdic,
    /// Unweighted feature-map MSE.
    Apic,
    /// Channel-weighted feature-map MSE.
    Saic,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Tdic => "TDIC",
            LossKind::Apic => "APIC",
            LossKind::Saic => "SAIC",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = SaicError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdic" | "pixel" => Ok(LossKind::Tdic),
            "apic" | "feature" => Ok(LossKind::Apic),
            "saic" | "semantic" => Ok(LossKind::Saic),
            other => Err(SaicError::Config(format!(
                "unknown loss '{other}', expected tdic, apic or saic"
            ))),
        }
    }
}

/// Objective plus the weights it needs.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub kind: LossKind,
    pub weights: Option<SemanticWeights>,
}

impl LossConfig {
    pub fn new(kind: LossKind, weights: Option<SemanticWeights>) -> Result<Self> {
        match (kind, &weights) {
            (LossKind::Saic, None) => Err(SaicError::Config(
                "the SAIC loss needs semantic weights".into(),
            )),
            _ => Ok(LossConfig { kind, weights }),
        }
    }

    /// Checks the weights against the task network's channel count.
    pub fn validate_channels(&self, k: usize) -> Result<()> {
        if let (LossKind::Saic, Some(w)) = (self.kind, &self.weights) {
            if w.k != k {
                return Err(SaicError::Config(format!(
                    "semantic weights have {} channels, task network has {k}",
                    w.k
                )));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    contract!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Mean over the batch of per-image mean squared pixel error.
pub fn pixel_loss(x: &Tensor, recon: &Tensor) -> Result<f64> {
    same_shape(x, recon, "pixel loss")?;
    let b = x.batch();
    Ok((0..b).map(|i| mean_sq(x.item(i), recon.item(i))).sum::<f64>() / b as f64)
}

/// [`pixel_loss`] and its gradient with respect to `recon`.
pub fn pixel_loss_grad(x: &Tensor, recon: &Tensor) -> Result<(f64, Tensor)> {
    let loss = pixel_loss(x, recon)?;
    let scale = 2.0 / recon.len() as f32;
    let mut g = recon.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv = scale * (*gv - xv);
    }
    Ok((loss, g))
}

fn per_map_msd(f: &Tensor, f2: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (b, k, m, n) = f.dims4()?;
    same_shape(f, f2, "feature loss")?;
    let mn = m * n;
    let msd = f
        .data()
        .chunks(mn)
        .zip(f2.data().chunks(mn))
        .map(|(a, c)| mean_sq(a, c))
        .collect();
    Ok((b, k, msd))
}

/// Mean over batch and channels of per-map mean squared error.
pub fn feature_loss(f: &Tensor, f2: &Tensor) -> Result<f64> {
    let (b, k, msd) = per_map_msd(f, f2)?;
    Ok(msd.iter().sum::<f64>() / (b * k) as f64)
}

pub fn feature_loss_grad(f: &Tensor, f2: &Tensor) -> Result<(f64, Tensor)> {
    let loss = feature_loss(f, f2)?;
    let scale = 2.0 / f2.len() as f32;
    let mut g = f2.clone();
    for (gv, &fv) in g.data_mut().iter_mut().zip(f.data()) {
        *gv = scale * (*gv - fv);
    }
    Ok((loss, g))
}

/// `(1/B) Σ_b Σ_k w'_k · msd(f_k^b', f_k^b) / K`.
pub fn semantic_loss(f: &Tensor, f2: &Tensor, weights: &[f32]) -> Result<f64> {
    let (b, k, msd) = per_map_msd(f, f2)?;
    contract!(
        weights.len() == k,
        "{} semantic weights for {k} feature channels",
        weights.len()
    );
    let total: f64 = msd
        .iter()
        .enumerate()
        .map(|(i, &d)| weights[i % k] as f64 * d)
        .sum();
    Ok(total / (b * k) as f64)
}

pub fn semantic_loss_grad(f: &Tensor, f2: &Tensor, weights: &[f32]) -> Result<(f64, Tensor)> {
    let loss = semantic_loss(f, f2, weights)?;
    let (_, k, m, n) = f.dims4()?;
    let mn = m * n;
    let scale = 2.0 / f2.len() as f32;
    let mut g = f2.clone();
    for (plane_idx, (gp, fp)) in g
        .data_mut()
        .chunks_mut(mn)
        .zip(f.data().chunks(mn))
        .enumerate()
    {
        let w = weights[plane_idx % k] * scale;
        for (gv, &fv) in gp.iter_mut().zip(fp) {
            *gv = w * (*gv - fv);
        }
    }
    Ok((loss, g))
}
