//! Python bindings. Images and feature maps cross the boundary as flat
//! row-major float lists plus an explicit shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use saic::codec::{self, Bitstream, Bpp, LatentShape};
use saic::evaluation;
use saic::gsw;
use saic::losses;
use saic::si::{self, PairedResults, SiConfig};
use saic::task::TaskNetwork;
use saic::trainer::CodecCheckpoint;
use saic::{SaicError, Tensor};

fn err(e: SaicError) -> PyErr {
    match e {
        SaicError::Config(_) | SaicError::Contract(_) => PyValueError::new_err(e.to_string()),
        SaicError::Training(_) | SaicError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        SaicError::Format(_) | SaicError::Io { .. } | SaicError::Image { .. } => {
            PyOSError::new_err(e.to_string())
        }
    }
}

fn tensor(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::from_vec(&shape, data).map_err(err)
}

/// Binary quantizer: 1.0 where the value exceeds 0.5, else 0.0.
#[pyfunction]
fn quantize(values: Vec<f32>) -> PyResult<Vec<f32>> {
    let n = values.len();
    Ok(codec::quantize(&tensor(values, vec![n])?).into_vec())
}

/// Exact rate of a `(channels, h, w)` binary latent on a `height x width`
/// image: `(bits, pixels, bpp)`.
#[pyfunction]
fn bpp(latent: (usize, usize, usize), height: usize, width: usize) -> (u64, u64, f64) {
    let b = Bpp::of(LatentShape::new(latent.0, latent.1, latent.2), height, width);
    (b.bits, b.pixels, b.as_f64())
}

/// Serializes a binary latent into `.saic` bytes.
#[pyfunction]
fn encode_bitstream<'py>(
    py: Python<'py>,
    bits: Vec<f32>,
    latent: (usize, usize, usize),
    height: usize,
    width: usize,
) -> PyResult<Bound<'py, PyBytes>> {
    let shape = LatentShape::new(latent.0, latent.1, latent.2);
    let bs = Bitstream::from_latent(&bits, shape, height, width).map_err(err)?;
    Ok(PyBytes::new(py, &bs.to_bytes().map_err(err)?))
}

/// Parses `.saic` bytes into `(height, width, (c, h, w), bits)`.
#[pyfunction]
fn decode_bitstream(data: &[u8]) -> PyResult<(u16, u16, (usize, usize, usize), Vec<u8>)> {
    let bs = Bitstream::from_bytes(data).map_err(err)?;
    let l = bs.latent;
    Ok((bs.height, bs.width, (l.channels, l.height, l.width), bs.bits))
}

/// `W' = r * softmax(tau * W)`.
#[pyfunction]
#[pyo3(signature = (raw, tau, r=None))]
fn map_weights(raw: Vec<f64>, tau: f64, r: Option<f64>) -> PyResult<Vec<f64>> {
    let r = r.unwrap_or(raw.len() as f64);
    gsw::map_weights(&raw, tau, r).map_err(err)
}

#[pyfunction]
fn pixel_loss(x: Vec<f32>, y: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    losses::pixel_loss(&tensor(x, shape.clone())?, &tensor(y, shape)?).map_err(err)
}

#[pyfunction]
fn feature_loss(f: Vec<f32>, g: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    losses::feature_loss(&tensor(f, shape.clone())?, &tensor(g, shape)?).map_err(err)
}

#[pyfunction]
fn semantic_loss(f: Vec<f32>, g: Vec<f32>, shape: Vec<usize>, weights: Vec<f32>) -> PyResult<f64> {
    losses::semantic_loss(&tensor(f, shape.clone())?, &tensor(g, shape)?, &weights).map_err(err)
}

#[pyfunction]
fn psnr(x: Vec<f32>, y: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    evaluation::psnr(&tensor(x, shape.clone())?, &tensor(y, shape)?).map_err(err)
}

#[pyfunction]
fn ssim(x: Vec<f32>, y: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    evaluation::ssim(&tensor(x, shape.clone())?, &tensor(y, shape)?).map_err(err)
}

/// `(accuracy, macro_f1)`.
#[pyfunction]
fn classification_metrics(pred: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<(f64, f64)> {
    evaluation::classification_metrics(&pred, &labels, classes).map_err(err)
}

/// CLUB semantic information between paired perceptual results, each a
/// flat `n x classes` list. Fits on even rows, estimates on odd rows.
#[pyfunction]
#[pyo3(signature = (y, y_prime, classes, epochs=200, seed=0))]
fn estimate_si<'py>(
    py: Python<'py>,
    y: Vec<f32>,
    y_prime: Vec<f32>,
    classes: usize,
    epochs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    if classes == 0 {
        return Err(PyValueError::new_err("classes must be positive"));
    }
    let n = y.len() / classes;
    let ids = (0..n).map(|i| i.to_string()).collect();
    let pairs = PairedResults::new(ids, classes, y, y_prime).map_err(err)?;
    let cfg = SiConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let est = py.detach(|| si::fit_and_estimate(&pairs, &cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("si", est.si)?;
    d.set_item("positive", est.positive)?;
    d.set_item("negative", est.negative)?;
    d.set_item("n", est.n)?;
    d.set_item("negative_mode", est.negative_mode)?;
    Ok(d)
}

/// Trained codec loaded from a checkpoint file.
#[pyclass(name = "Codec", module = "saic", frozen)]
struct PyCodec {
    ck: CodecCheckpoint,
}

impl PyCodec {
    fn input_tensor(&self, pixels: Vec<f32>) -> PyResult<Tensor> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        if pixels.is_empty() || pixels.len() % per != 0 {
            return Err(PyValueError::new_err(format!(
                "expected a multiple of {per} pixel values, got {}",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        tensor(pixels, vec![n, c, h, w])
    }
}

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCodec {
            ck: CodecCheckpoint::load(&path).map_err(err)?,
        })
    }

    /// `(channels, height, width)` of input images.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = &self.ck.codec.config;
        (c.image_channels, c.image_size.0, c.image_size.1)
    }

    #[getter]
    fn latent_shape(&self) -> (usize, usize, usize) {
        let l = self.ck.codec.latent_shape();
        (l.channels, l.height, l.width)
    }

    #[getter]
    fn bpp(&self) -> f64 {
        self.ck.bpp()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.ck.step
    }

    /// One `.saic` byte string per image of a flat NCHW batch.
    fn compress<'py>(&self, py: Python<'py>, pixels: Vec<f32>) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let x = self.input_tensor(pixels)?;
        let streams = py.detach(|| self.ck.codec.compress(&x)).map_err(err)?;
        streams
            .iter()
            .map(|s| Ok(PyBytes::new(py, &s.to_bytes().map_err(err)?)))
            .collect()
    }

    /// Flat NCHW reconstruction of a list of `.saic` byte strings.
    fn decompress(&self, py: Python<'_>, streams: Vec<Vec<u8>>) -> PyResult<Vec<f32>> {
        let parsed = streams
            .iter()
            .map(|b| Bitstream::from_bytes(b))
            .collect::<saic::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(py
            .detach(|| self.ck.codec.decompress(&parsed))
            .map_err(err)?
            .into_vec())
    }

    fn reconstruct(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = self.input_tensor(pixels)?;
        Ok(py.detach(|| self.ck.codec.reconstruct(&x)).map_err(err)?.into_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Codec(image={:?}, latent={:?}, bpp={})",
            self.image_shape(),
            self.latent_shape(),
            self.ck.codec.bpp()
        )
    }
}

/// Frozen classifier split into feature extractor and head.
#[pyclass(name = "TaskNetwork", module = "saic", frozen)]
struct PyTask {
    net: TaskNetwork,
}

impl PyTask {
    fn input_tensor(&self, pixels: Vec<f32>) -> PyResult<Tensor> {
        let (c, h, w) = self.net.input_shape();
        let per = c * h * w;
        if pixels.is_empty() || pixels.len() % per != 0 {
            return Err(PyValueError::new_err(format!(
                "expected a multiple of {per} pixel values, got {}",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        tensor(pixels, vec![n, c, h, w])
    }
}

#[pymethods]
impl PyTask {
    #[staticmethod]
    #[pyo3(signature = (path, split_layer=None))]
    fn load(path: PathBuf, split_layer: Option<String>) -> PyResult<Self> {
        Ok(PyTask {
            net: TaskNetwork::load_checkpoint(&path, split_layer.as_deref()).map_err(err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    #[getter]
    fn feature_shape(&self) -> (usize, usize, usize) {
        self.net.feature_shape()
    }

    #[getter]
    fn split_layer(&self) -> String {
        self.net.split_layer().to_string()
    }

    /// Flat `n x classes` softmax perceptual results.
    fn perceive(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = self.input_tensor(pixels)?;
        Ok(py.detach(|| self.net.perceive(&x)).map_err(err)?.into_vec())
    }

    fn predict(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<usize>> {
        let x = self.input_tensor(pixels)?;
        py.detach(|| self.net.predict(&x)).map_err(err)
    }

    fn feature_maps(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = self.input_tensor(pixels)?;
        Ok(py.detach(|| self.net.feature_maps(&x)).map_err(err)?.into_vec())
    }
}

#[pymodule]
#[pyo3(name = "saic")]
fn saic_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(bpp, m)?)?;
    m.add_function(wrap_pyfunction!(encode_bitstream, m)?)?;
    m.add_function(wrap_pyfunction!(decode_bitstream, m)?)?;
    m.add_function(wrap_pyfunction!(map_weights, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(feature_loss, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_si, m)?)?;
    m.add_class::<PyCodec>()?;
    m.add_class::<PyTask>()?;
    Ok(())
}
