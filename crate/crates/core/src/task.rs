//! Frozen downstream classifier split into a feature extractor and a head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, SaicError};
use crate::nn::{softmax_rows, softmax_rows_backward, Conv2d, Layer, Linear, Network, Trace};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which head output the perceptual results (and GSW gradients) refer to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    /// Post-softmax confidence scores.
    #[default]
    Softmax,
    /// Raw pre-softmax scores.
    Logits,
}

impl std::str::FromStr for ScoreSpace {
    type Err = SaicError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(ScoreSpace::Softmax),
            "logits" => Ok(ScoreSpace::Logits),
            other => Err(SaicError::Config(format!("unknown score space '{other}'"))),
        }
    }
}

/// Input layout `(channels, height, width)`.
pub type InputShape = (usize, usize, usize);

/// Known classifier architectures.
pub const ARCHITECTURES: &[&str] = &["small-resnet", "small-vgg", "toy"];

/// Builds an untrained classifier. Layer names are stable and used as
/// split points.
pub fn build_architecture(
    arch: &str,
    input: InputShape,
    num_classes: usize,
    seed: u64,
) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, _, _) = input;
    let mut conv =
        |i, o, s| Layer::Conv2d(Conv2d::new(i, o, 3, s, 1, &mut rng));
    let net = match arch {
        "small-resnet" => {
            let c1 = conv(c, 16, 2);
            let c2 = conv(16, 32, 2);
            let b1 = Layer::Residual(vec![conv(32, 32, 1), Layer::Relu, conv(32, 32, 1)]);
            Network::new()
                .with("conv1", c1)
                .with("conv1_relu", Layer::Relu)
                .with("conv2", c2)
                .with("conv2_relu", Layer::Relu)
                .with("block1", b1)
                .with("block1_relu", Layer::Relu)
                .with("pool", Layer::GlobalAvgPool)
        }
        "small-vgg" => {
            let c1 = conv(c, 16, 1);
            let c2 = conv(16, 16, 2);
            let c3 = conv(16, 32, 1);
            let c4 = conv(32, 32, 2);
            Network::new()
                .with("conv1", c1)
                .with("conv1_relu", Layer::Relu)
                .with("conv2", c2)
                .with("conv2_relu", Layer::Relu)
                .with("conv3", c3)
                .with("conv3_relu", Layer::Relu)
                .with("conv4", c4)
                .with("conv4_relu", Layer::Relu)
                .with("pool", Layer::GlobalAvgPool)
        }
        "toy" => {
            let c1 = conv(c, 4, 2);
            let h1 = conv(4, 4, 1);
            Network::new()
                .with("feat", c1)
                .with("feat_act", Layer::Tanh)
                .with("head_conv", h1)
                .with("head_act", Layer::Tanh)
                .with("pool", Layer::GlobalAvgPool)
        }
        other => {
            return Err(SaicError::Config(format!(
                "unknown architecture '{other}', expected one of {ARCHITECTURES:?}"
            )))
        }
    };
    let pooled = net.output_shape(&[1, input.0, input.1, input.2])?[1];
    let fc = Layer::Linear(Linear::new(pooled, num_classes, &mut rng));
    Ok(net.with("fc", fc))
}

/// Layer after which features are taken by default: the output of the last
/// convolutional stage.
pub fn default_split_layer(arch: &str) -> Result<&'static str> {
    match arch {
        "small-resnet" => Ok("block1_relu"),
        "small-vgg" => Ok("conv4_relu"),
        "toy" => Ok("feat_act"),
        other => Err(SaicError::Config(format!("unknown architecture '{other}'"))),
    }
}

/// Classifier weights as written by the task-training command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskCheckpoint {
    pub format_version: u32,
    pub arch: String,
    pub input_shape: InputShape,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub network: Network,
    /// Test accuracy recorded at training time, if measured.
    pub documented_accuracy: Option<f64>,
    pub seed: u64,
    pub steps: u64,
}

impl TaskCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)
            .map_err(|e| SaicError::Format(format!("serializing task checkpoint: {e}")))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SaicError::io(path, e))?;
        let ck: TaskCheckpoint = serde_json::from_slice(&bytes).map_err(|e| {
            SaicError::Format(format!("{} is not a task checkpoint: {e}", path.display()))
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(SaicError::Format(format!(
                "task checkpoint version {} is not supported",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SaicError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| SaicError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SaicError::io(path, e))
}

/// A frozen classifier `head ∘ features`. Parameters are private and no
/// method mutates them.
#[derive(Clone, Debug)]
pub struct TaskNetwork {
    arch: String,
    split_layer: String,
    input_shape: InputShape,
    num_classes: usize,
    feature_shape: (usize, usize, usize),
    features: Network,
    head: Network,
}

impl TaskNetwork {
    /// Splits a full classifier after `split_layer`. The features must be
    /// 4-D and the head must map them to `[B, num_classes]`.
    pub fn from_network(
        arch: &str,
        network: &Network,
        split_layer: &str,
        input_shape: InputShape,
    ) -> Result<Self> {
        let (features, head) = network.split_after(split_layer)?;
        let (c, h, w) = input_shape;
        let fshape = features.output_shape(&[1, c, h, w])?;
        if fshape.len() != 4 {
            return Err(SaicError::Config(format!(
                "split layer '{split_layer}' produces non-spatial output {fshape:?}; \
                 choose a convolutional stage"
            )));
        }
        if head.is_empty() {
            return Err(SaicError::Config(format!(
                "split layer '{split_layer}' leaves no head to produce perceptual results"
            )));
        }
        let out = head.output_shape(&fshape)?;
        if out.len() != 2 {
            return Err(SaicError::Config(format!(
                "classifier head produces {out:?}, expected [B, classes]"
            )));
        }
        Ok(TaskNetwork {
            arch: arch.to_string(),
            split_layer: split_layer.to_string(),
            input_shape,
            num_classes: out[1],
            feature_shape: (fshape[1], fshape[2], fshape[3]),
            features,
            head,
        })
    }

    /// Loads a checkpoint and splits it; `split_layer = None` uses the
    /// architecture default.
    pub fn load_checkpoint(path: &Path, split_layer: Option<&str>) -> Result<Self> {
        let ck = TaskCheckpoint::load(path)?;
        Self::from_checkpoint(&ck, split_layer)
    }

    pub fn from_checkpoint(ck: &TaskCheckpoint, split_layer: Option<&str>) -> Result<Self> {
        let reference = build_architecture(&ck.arch, ck.input_shape, ck.num_classes, 0)?;
        let names: Vec<&str> = reference.layer_names().collect();
        let got: Vec<&str> = ck.network.layer_names().collect();
        let shapes = |n: &Network| n.params().iter().map(|p| p.len()).collect::<Vec<_>>();
        if names != got || shapes(&reference) != shapes(&ck.network) {
            return Err(SaicError::Format(format!(
                "checkpoint weights do not match architecture '{}'",
                ck.arch
            )));
        }
        let split = match split_layer {
            Some(s) => s.to_string(),
            None => default_split_layer(&ck.arch)?.to_string(),
        };
        Self::from_network(&ck.arch, &ck.network, &split, ck.input_shape)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn split_layer(&self) -> &str {
        &self.split_layer
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(K, M, N)`
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.features.checksum().to_le_bytes());
        h.update(&self.head.checksum().to_le_bytes());
        h.finalize()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        contract!(
            (c, h, w) == self.input_shape,
            "task network expects input {:?}, got ({c},{h},{w})",
            self.input_shape
        );
        Ok(())
    }

    fn check_features(&self, f: &Tensor) -> Result<()> {
        let (_, k, m, n) = f.dims4()?;
        contract!(
            (k, m, n) == self.feature_shape,
            "head expects features {:?}, got ({k},{m},{n})",
            self.feature_shape
        );
        Ok(())
    }

    /// `F(θ1, x)`, shape `[B, K, M, N]`.
    pub fn feature_maps(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.features.forward(x)
    }

    /// Feature maps plus the trace needed by [`Self::features_backward`].
    pub fn feature_maps_trace(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        self.features.forward_trace(x)
    }

    /// `d loss / d x` from `d loss / d F`. Parameters are not touched.
    pub fn features_backward(&self, trace: &Trace, grad_features: &Tensor) -> Result<Tensor> {
        Ok(self
            .features
            .backward(trace, grad_features, None, true)?
            .expect("input gradient requested"))
    }

    pub fn head_scores(&self, features: &Tensor, space: ScoreSpace) -> Result<Tensor> {
        self.check_features(features)?;
        let logits = self.head.forward(features)?;
        match space {
            ScoreSpace::Logits => Ok(logits),
            ScoreSpace::Softmax => softmax_rows(&logits),
        }
    }

    /// Perceptual results `y`: post-softmax confidence scores `[B, C]`.
    pub fn perceive(&self, x: &Tensor) -> Result<Tensor> {
        self.perceive_in(x, ScoreSpace::Softmax)
    }

    pub fn perceive_in(&self, x: &Tensor, space: ScoreSpace) -> Result<Tensor> {
        self.head_scores(&self.feature_maps(x)?, space)
    }

    /// Top-1 class per image.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.perceive_in(x, ScoreSpace::Logits)?))
    }

    /// `∂(Σ_b y_b^c) / ∂F` for every element of `features`.
    pub fn score_gradient(
        &self,
        features: &Tensor,
        class: usize,
        space: ScoreSpace,
    ) -> Result<Tensor> {
        self.check_features(features)?;
        contract!(
            class < self.num_classes,
            "class {class} out of range for {} classes",
            self.num_classes
        );
        let (logits, trace) = self.head.forward_trace(features)?;
        let b = logits.batch();
        let mut onehot = Tensor::zeros(&[b, self.num_classes]);
        for i in 0..b {
            onehot.data_mut()[i * self.num_classes + class] = 1.0;
        }
        let grad_logits = match space {
            ScoreSpace::Logits => onehot,
            ScoreSpace::Softmax => softmax_rows_backward(&softmax_rows(&logits)?, &onehot)?,
        };
        Ok(self
            .head
            .backward(&trace, &grad_logits, None, true)?
            .expect("input gradient requested"))
    }
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let c = scores.item_len();
    scores
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet() -> TaskNetwork {
        let net = build_architecture("small-resnet", (3, 32, 32), 10, 1).unwrap();
        TaskNetwork::from_network("small-resnet", &net, "block1_relu", (3, 32, 32)).unwrap()
    }

    #[test]
    fn feature_shape_and_perceive_decomposition() {
        let t = resnet();
        assert_eq!(t.feature_shape(), (32, 8, 8));
        let x = Tensor::from_vec(
            &[2, 3, 32, 32],
            (0..6144).map(|i| ((i * 13) % 101) as f32 / 101.0).collect(),
        )
        .unwrap();
        let f = t.feature_maps(&x).unwrap();
        assert_eq!(f.shape(), &[2, 32, 8, 8]);
        let y = t.perceive(&x).unwrap();
        assert_eq!(y, t.head_scores(&f, ScoreSpace::Softmax).unwrap());
        for row in y.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(t.predict(&x).unwrap().iter().all(|&c| c < 10));
    }

    #[test]
    fn duplicate_images_give_identical_features() {
        let t = resnet();
        let one = Tensor::full(&[1, 3, 32, 32], 0.25);
        let two = Tensor::concat(&[&one, &one]).unwrap();
        let f = t.feature_maps(&two).unwrap();
        assert_eq!(f.item(0), f.item(1));
        let zero = t.feature_maps(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(zero.all_finite());
    }

    #[test]
    fn split_at_linear_layer_is_config_error() {
        let net = build_architecture("small-resnet", (3, 32, 32), 10, 1).unwrap();
        for bad in ["fc", "pool"] {
            assert!(matches!(
                TaskNetwork::from_network("small-resnet", &net, bad, (3, 32, 32)),
                Err(SaicError::Config(_))
            ));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        let net = build_architecture("small-vgg", (3, 16, 16), 4, 9).unwrap();
        let ck = TaskCheckpoint {
            format_version: CHECKPOINT_VERSION,
            arch: "small-vgg".into(),
            input_shape: (3, 16, 16),
            num_classes: 4,
            class_names: vec![],
            network: net,
            documented_accuracy: None,
            seed: 9,
            steps: 0,
        };
        ck.save(&path).unwrap();
        let a = TaskNetwork::load_checkpoint(&path, None).unwrap();
        let b = TaskNetwork::load_checkpoint(&path, None).unwrap();
        let probe = Tensor::full(&[1, 3, 16, 16], 0.6);
        assert_eq!(a.perceive(&probe).unwrap(), b.perceive(&probe).unwrap());
        assert_eq!(a.checksum(), b.checksum());

        let mut wrong = ck.clone();
        wrong.arch = "small-resnet".into();
        assert!(matches!(
            TaskNetwork::from_checkpoint(&wrong, None),
            Err(SaicError::Format(_))
        ));
        fs::write(&path, b"{not json").unwrap();
        assert!(TaskNetwork::load_checkpoint(&path, None).is_err());
    }
}
