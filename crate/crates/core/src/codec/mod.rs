//! Encoder, binary quantizer and decoder, plus exact rate accounting.
//!
//! The encoder is three stride-2 convolutions ending in a sigmoid, so the
//! latent has `H/8 × W/8` spatial size and values in `[0, 1]`. The quantizer
//! maps `e > 0.5` to 1 and everything else to 0; during training gradients
//! pass through it unchanged. The decoder mirrors the encoder with nearest
//! upsampling and ends in a sigmoid. Rate is set solely by the number of
//! latent channels.

pub mod bitstream;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{Conv2d, Grads, Layer, Network, Trace};
use crate::tensor::Tensor;

pub use bitstream::Bitstream;

/// Spatial downsampling factor between image and latent.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        LatentShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

/// Bits per pixel as an exact ratio `bits / pixels`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Bpp {
    pub bits: u64,
    pub pixels: u64,
}

impl Bpp {
    pub fn new(bits: u64, pixels: u64) -> Self {
        Bpp { bits, pixels }
    }

    pub fn of(latent: LatentShape, height: usize, width: usize) -> Self {
        Bpp::new(latent.len() as u64, (height * width) as u64)
    }

    /// Exact comparison with `num / den`.
    pub fn equals_ratio(&self, num: u64, den: u64) -> bool {
        self.bits as u128 * den as u128 == num as u128 * self.pixels as u128
    }

    pub fn as_f64(&self) -> f64 {
        self.bits as f64 / self.pixels as f64
    }
}

impl PartialEq for Bpp {
    fn eq(&self, other: &Self) -> bool {
        self.equals_ratio(other.bits, other.pixels)
    }
}

impl Eq for Bpp {}

impl fmt::Display for Bpp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

/// Elementwise binary quantizer: 1 where `e > 0.5`, else 0.
pub fn quantize(e: &Tensor) -> Tensor {
    e.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Straight-through backward of [`quantize`]: identity.
pub fn quantize_backward(grad_q: &Tensor) -> Tensor {
    grad_q.clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `(height, width)`, both multiples of 8.
    pub image_size: (usize, usize),
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Channel width of the first encoder stage; deeper stages use twice this.
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_size: (96, 96),
            image_channels: 3,
            latent_channels: 8,
            width: 32,
        }
    }
}

impl CodecConfig {
    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(
            self.latent_channels,
            self.image_size.0 / DOWNSAMPLE,
            self.image_size.1 / DOWNSAMPLE,
        )
    }

    pub fn bpp(&self) -> Bpp {
        Bpp::of(self.latent_shape(), self.image_size.0, self.image_size.1)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        contract!(
            h >= DOWNSAMPLE && w >= DOWNSAMPLE && h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0,
            "codec image size {h}x{w} must be a positive multiple of {DOWNSAMPLE}"
        );
        contract!(
            self.image_channels == 1 || self.image_channels == 3,
            "codec image channels must be 1 or 3"
        );
        contract!(self.latent_channels >= 1, "latent needs at least one channel");
        contract!(self.width >= 1, "codec width must be positive");
        Ok(())
    }
}

/// Encoder/decoder pair (θ2, θ3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecNetwork {
    pub config: CodecConfig,
    pub encoder: Network,
    pub decoder: Network,
}

/// Everything a training step needs to backpropagate through the codec.
pub struct CodecTrace {
    enc: Trace,
    dec: Trace,
    pub latent: Tensor,
    pub quantized: Tensor,
}

impl CodecNetwork {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w, l) = (config.image_channels, config.width, config.latent_channels);
        let conv = |i, o, s, rng: &mut ChaCha8Rng| Layer::Conv2d(Conv2d::new(i, o, 3, s, 1, rng));
        let encoder = Network::new()
            .with("enc1", conv(c, w, 2, &mut rng))
            .with("enc1_act", Layer::Relu)
            .with("enc2", conv(w, 2 * w, 2, &mut rng))
            .with("enc2_act", Layer::Relu)
            .with("enc3", conv(2 * w, l, 2, &mut rng))
            .with("enc3_act", Layer::Sigmoid);
        let decoder = Network::new()
            .with("dec1", conv(l, 2 * w, 1, &mut rng))
            .with("dec1_act", Layer::Relu)
            .with("dec1_up", Layer::Upsample2x)
            .with("dec2", conv(2 * w, w, 1, &mut rng))
            .with("dec2_act", Layer::Relu)
            .with("dec2_up", Layer::Upsample2x)
            .with("dec3", conv(w, w, 1, &mut rng))
            .with("dec3_act", Layer::Relu)
            .with("dec3_up", Layer::Upsample2x)
            .with("dec4", conv(w, c, 1, &mut rng))
            .with("dec4_act", Layer::Sigmoid);
        Ok(CodecNetwork {
            config,
            encoder,
            decoder,
        })
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape()
    }

    pub fn bpp(&self) -> Bpp {
        self.config.bpp()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        contract!(
            (c, h, w)
                == (
                    self.config.image_channels,
                    self.config.image_size.0,
                    self.config.image_size.1
                ),
            "codec expects {}x{}x{} images, got {c}x{h}x{w}",
            self.config.image_channels,
            self.config.image_size.0,
            self.config.image_size.1
        );
        Ok(())
    }

    fn check_latent(&self, q: &Tensor) -> Result<()> {
        let (_, c, h, w) = q.dims4()?;
        let s = self.latent_shape();
        contract!(
            (c, h, w) == (s.channels, s.height, s.width),
            "decoder expects latent {s}, got ({c},{h},{w})"
        );
        Ok(())
    }

    /// Real-valued latent `e` in `[0, 1]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.forward(x)
    }

    /// Reconstruction from a binary latent, clamped to `[0, 1]`.
    pub fn decode(&self, q: &Tensor) -> Result<Tensor> {
        self.check_latent(q)?;
        Ok(self.decoder.forward(q)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// `D(Q(E(x)))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&quantize(&self.encode(x)?))
    }

    /// Training forward pass through encoder, quantizer and decoder.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, CodecTrace)> {
        self.check_input(x)?;
        let (latent, enc) = self.encoder.forward_trace(x)?;
        let quantized = quantize(&latent);
        let (recon, dec) = self.decoder.forward_trace(&quantized)?;
        Ok((
            recon,
            CodecTrace {
                enc,
                dec,
                latent,
                quantized,
            },
        ))
    }

    /// Gradients of θ2 followed by θ3 given `d loss / d x'`. The quantizer
    /// is crossed with the straight-through rule. Also returns
    /// `d loss / d q` (equal to `d loss / d e`).
    pub fn backward(&self, trace: &CodecTrace, grad_recon: &Tensor) -> Result<(Grads, Tensor)> {
        let mut dec_grads = self.decoder.zero_grads();
        let grad_q = self
            .decoder
            .backward(&trace.dec, grad_recon, Some(&mut dec_grads), true)?
            .expect("input gradient requested");
        let grad_e = quantize_backward(&grad_q);
        let mut enc_grads = self.encoder.zero_grads();
        self.encoder
            .backward(&trace.enc, &grad_e, Some(&mut enc_grads), false)?;
        enc_grads.extend(dec_grads);
        Ok((enc_grads, grad_q))
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.encoder.checksum().to_le_bytes());
        h.update(&self.decoder.checksum().to_le_bytes());
        h.finalize()
    }

    /// Bitstreams for every image of `x`.
    pub fn compress(&self, x: &Tensor) -> Result<Vec<Bitstream>> {
        let q = quantize(&self.encode(x)?);
        let (h, w) = self.config.image_size;
        (0..q.batch())
            .map(|b| Bitstream::from_latent(q.item(b), self.latent_shape(), h, w))
            .collect()
    }

    pub fn decompress(&self, streams: &[Bitstream]) -> Result<Tensor> {
        let s = self.latent_shape();
        contract!(!streams.is_empty(), "no bitstreams to decode");
        let mut data = Vec::with_capacity(streams.len() * s.len());
        for bs in streams {
            contract!(
                bs.latent == s,
                "bitstream latent {} does not match codec latent {s}",
                bs.latent
            );
            contract!(
                (bs.height as usize, bs.width as usize) == self.config.image_size,
                "bitstream image size {}x{} does not match codec {:?}",
                bs.height,
                bs.width,
                self.config.image_size
            );
            data.extend(bs.latent_values());
        }
        self.decode(&Tensor::from_vec(
            &[streams.len(), s.channels, s.height, s.width],
            data,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CodecNetwork {
        CodecNetwork::new(
            CodecConfig {
                image_size: (16, 16),
                image_channels: 3,
                latent_channels: 4,
                width: 4,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn operating_points_are_exact() {
        for (c, num, den) in [(8, 1, 8), (16, 1, 4), (32, 1, 2)] {
            let cfg = CodecConfig {
                latent_channels: c,
                ..Default::default()
            };
            assert_eq!(cfg.latent_shape(), LatentShape::new(c, 12, 12));
            assert!(cfg.bpp().equals_ratio(num, den));
        }
        assert_eq!(CodecConfig::default().latent_shape().len(), 1152);
        assert_eq!(CodecConfig::default().bpp().as_f64(), 0.125);
    }

    #[test]
    fn quantizer_threshold() {
        let e = Tensor::from_vec(&[1, 4], vec![0.7, 0.5, 0.2, 0.500001]).unwrap();
        assert_eq!(quantize(&e).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn round_trip_shapes_and_ranges() {
        let codec = small();
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| (i % 97) as f32 / 97.0).collect())
            .unwrap();
        let e = codec.encode(&x).unwrap();
        assert_eq!(e.shape(), &[2, 4, 2, 2]);
        assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let r = codec.reconstruct(&x).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let zeros = Tensor::zeros(&[1, 4, 2, 2]);
        let d1 = codec.decode(&zeros).unwrap();
        let d2 = codec.decode(&zeros).unwrap();
        assert!(d1.all_finite());
        assert_eq!(d1, d2);
        assert!(codec.decode(&Tensor::zeros(&[1, 5, 2, 2])).is_err());
        assert!(codec.encode(&Tensor::zeros(&[1, 3, 24, 24])).is_err());
    }

    #[test]
    fn compress_decompress_matches_reconstruct() {
        let codec = small();
        let x = Tensor::full(&[2, 3, 16, 16], 0.3);
        let streams = codec.compress(&x).unwrap();
        assert_eq!(streams.len(), 2);
        let bytes = streams[0].to_bytes().unwrap();
        let back = Bitstream::from_bytes(&bytes).unwrap();
        let y = codec.decompress(&[back.clone(), back]).unwrap();
        let r = codec.reconstruct(&x).unwrap();
        assert_eq!(y.item(0), r.item(0));
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let codec = small();
        let x = Tensor::full(&[1, 3, 16, 16], 0.4);
        let (recon, trace) = codec.forward_train(&x).unwrap();
        let g = recon.map(|v| 2.0 * v);
        let (_, grad_q) = codec.backward(&trace, &g).unwrap();
        assert_eq!(quantize_backward(&grad_q), grad_q);
    }
}
