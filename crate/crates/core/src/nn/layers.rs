use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with explicit row/column strides
/// for `a` and `b` so transposed operands need no copy. `c` is contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels · kernel · kernel]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, img: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let l = oh * ow;
        for c in 0..self.in_channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let seg = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, img: &mut [f32]) {
        let k = self.kernel;
        let l = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, keep_cols: bool) -> Result<(Tensor, Option<Vec<f32>>)> {
        let (b, c, h, w) = x.dims4()?;
        contract!(
            c == self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            c
        );
        contract!(
            h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel,
            "conv input {}x{} smaller than kernel {}",
            h,
            w,
            self.kernel
        );
        let (oh, ow) = self.output_size(h, w);
        let l = oh * ow;
        let rows = self.col_rows();
        let mut out = Tensor::zeros(&[b, self.out_channels, oh, ow]);
        let mut all_cols = if keep_cols {
            vec![0.0; b * rows * l]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; rows * l] };
        for i in 0..b {
            let cols: &mut [f32] = if keep_cols {
                &mut all_cols[i * rows * l..(i + 1) * rows * l]
            } else {
                &mut scratch
            };
            self.im2col(x.item(i), h, w, oh, ow, cols);
            let y = out.item_mut(i);
            for (co, row) in y.chunks_mut(l).enumerate() {
                row.fill(self.bias[co]);
            }
            gemm(
                self.out_channels,
                rows,
                l,
                &self.weight,
                rows,
                1,
                cols,
                l,
                1,
                1.0,
                y,
            );
        }
        Ok((out, keep_cols.then_some(all_cols)))
    }

    fn backward(
        &self,
        cols: &[f32],
        in_shape: [usize; 4],
        grad_out: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let [b, _, h, w] = in_shape;
        let (gb, gc, oh, ow) = grad_out.dims4()?;
        contract!(
            gb == b && gc == self.out_channels,
            "conv backward shape mismatch"
        );
        let l = oh * ow;
        let rows = self.col_rows();
        if let Some((gw, gbias)) = grads {
            for i in 0..b {
                let dy = grad_out.item(i);
                let ci = &cols[i * rows * l..(i + 1) * rows * l];
                // dW += dY · colsᵀ
                gemm(self.out_channels, l, rows, dy, l, 1, ci, 1, l, 1.0, gw);
                for (co, row) in dy.chunks(l).enumerate() {
                    gbias[co] += row.iter().sum::<f32>();
                }
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(&in_shape);
        let mut dcols = vec![0.0; rows * l];
        for i in 0..b {
            // dcols = Wᵀ · dY
            gemm(
                rows,
                self.out_channels,
                l,
                &self.weight,
                1,
                rows,
                grad_out.item(i),
                l,
                1,
                0.0,
                &mut dcols,
            );
            self.col2im(&dcols, h, w, oh, ow, dx.item_mut(i));
        }
        Ok(Some(dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, (1.0 / in_features as f32).sqrt()).unwrap();
        Linear {
            in_features,
            out_features,
            weight: (0..in_features * out_features)
                .map(|_| normal.sample(rng))
                .collect(),
            bias: vec![0.0; out_features],
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f) = x.dims2()?;
        contract!(
            f == self.in_features,
            "linear expects {} features, got {}",
            self.in_features,
            f
        );
        let mut out = Tensor::zeros(&[b, self.out_features]);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            b,
            f,
            self.out_features,
            x.data(),
            f,
            1,
            &self.weight,
            1,
            f,
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }

    fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
    ) -> Result<Tensor> {
        let (b, f) = input.dims2()?;
        let o = self.out_features;
        if let Some((gw, gb)) = grads {
            gemm(o, b, f, grad_out.data(), 1, o, input.data(), f, 1, 1.0, gw);
            for row in grad_out.data().chunks(o) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut dx = Tensor::zeros(&[b, f]);
        gemm(b, o, f, grad_out.data(), o, 1, &self.weight, f, 1, 0.0, dx.data_mut());
        Ok(dx)
    }
}

/// Building blocks of every network in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    Sigmoid,
    Tanh,
    /// Nearest-neighbour ×2 upsampling.
    Upsample2x,
    /// `[B, C, H, W] -> [B, C]`
    GlobalAvgPool,
    /// `y = x + body(x)`
    Residual(Vec<Layer>),
}

pub(crate) enum Cache {
    Conv { cols: Vec<f32>, in_shape: [usize; 4] },
    Linear { input: Tensor },
    Output(Tensor),
    Shape(Vec<usize>),
    Residual(Vec<Cache>),
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer {
    pub fn param_tensors(&self) -> usize {
        match self {
            Layer::Conv2d(_) | Layer::Linear(_) => 2,
            Layer::Residual(body) => body.iter().map(Layer::param_tensors).sum(),
            _ => 0,
        }
    }

    pub(crate) fn collect_params<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        match self {
            Layer::Conv2d(c) => {
                out.push(&c.weight);
                out.push(&c.bias);
            }
            Layer::Linear(l) => {
                out.push(&l.weight);
                out.push(&l.bias);
            }
            Layer::Residual(body) => body.iter().for_each(|l| l.collect_params(out)),
            _ => {}
        }
    }

    pub(crate) fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        match self {
            Layer::Conv2d(c) => {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            Layer::Linear(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            Layer::Residual(body) => body.iter_mut().for_each(|l| l.collect_params_mut(out)),
            _ => {}
        }
    }

    /// Output shape for an input of shape `shape`.
    pub fn output_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        Ok(match self {
            Layer::Conv2d(c) => {
                contract!(shape.len() == 4, "conv needs 4-D input, got {:?}", shape);
                contract!(
                    shape[1] == c.in_channels,
                    "conv expects {} channels, got {}",
                    c.in_channels,
                    shape[1]
                );
                let (oh, ow) = c.output_size(shape[2], shape[3]);
                vec![shape[0], c.out_channels, oh, ow]
            }
            Layer::Linear(l) => {
                contract!(
                    shape.len() == 2 && shape[1] == l.in_features,
                    "linear expects [B, {}], got {:?}",
                    l.in_features,
                    shape
                );
                vec![shape[0], l.out_features]
            }
            Layer::Upsample2x => {
                contract!(shape.len() == 4, "upsample needs 4-D input");
                vec![shape[0], shape[1], shape[2] * 2, shape[3] * 2]
            }
            Layer::GlobalAvgPool => {
                contract!(shape.len() == 4, "pooling needs 4-D input");
                vec![shape[0], shape[1]]
            }
            Layer::Residual(body) => {
                let mut s = shape.to_vec();
                for l in body {
                    s = l.output_shape(&s)?;
                }
                contract!(s == shape, "residual body changes shape {:?} -> {:?}", shape, s);
                s
            }
            Layer::Relu | Layer::Sigmoid | Layer::Tanh => shape.to_vec(),
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Option<Cache>)> {
        Ok(match self {
            Layer::Conv2d(c) => {
                let in_shape = {
                    let (b, ch, h, w) = x.dims4()?;
                    [b, ch, h, w]
                };
                let (y, cols) = c.forward(x, train)?;
                (y, cols.map(|cols| Cache::Conv { cols, in_shape }))
            }
            Layer::Linear(l) => (
                l.forward(x)?,
                train.then(|| Cache::Linear { input: x.clone() }),
            ),
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                let cache = train.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Sigmoid => {
                let y = x.map(sigmoid);
                let cache = train.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Tanh => {
                let y = x.map(f32::tanh);
                let cache = train.then(|| Cache::Output(y.clone()));
                (y, cache)
            }
            Layer::Upsample2x => {
                let (b, c, h, w) = x.dims4()?;
                let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
                let src = x.data();
                let dst = y.data_mut();
                for p in 0..b * c {
                    let s = &src[p * h * w..(p + 1) * h * w];
                    let d = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for iy in 0..2 * h {
                        for ix in 0..2 * w {
                            d[iy * 2 * w + ix] = s[(iy / 2) * w + ix / 2];
                        }
                    }
                }
                (y, train.then(|| Cache::Shape(x.shape().to_vec())))
            }
            Layer::GlobalAvgPool => {
                let (b, c, h, w) = x.dims4()?;
                let hw = h * w;
                let data = x
                    .data()
                    .chunks(hw)
                    .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
                    .collect();
                (
                    Tensor::from_vec(&[b, c], data)?,
                    train.then(|| Cache::Shape(x.shape().to_vec())),
                )
            }
            Layer::Residual(body) => {
                let mut h = x.clone();
                let mut caches = Vec::with_capacity(body.len());
                for l in body {
                    let (next, cache) = l.forward(&h, train)?;
                    h = next;
                    if let Some(c) = cache {
                        caches.push(c);
                    }
                }
                contract!(h.shape() == x.shape(), "residual body changed shape");
                for (o, i) in h.data_mut().iter_mut().zip(x.data()) {
                    *o += i;
                }
                (h, train.then_some(Cache::Residual(caches)))
            }
        })
    }

    /// Backpropagates `grad_out`. Parameter gradients are accumulated into
    /// `grads` (one slot per parameter tensor, same order as
    /// [`Layer::collect_params`]) when given. Returns the input gradient
    /// unless `need_input_grad` is false.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        grad_out: &Tensor,
        grads: Option<&mut [Vec<f32>]>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        Ok(match (self, cache) {
            (Layer::Conv2d(c), Cache::Conv { cols, in_shape }) => {
                let g = grads.map(|g| {
                    let (w, b) = g.split_at_mut(1);
                    (w[0].as_mut_slice(), b[0].as_mut_slice())
                });
                c.backward(cols, *in_shape, grad_out, g, need_input_grad)?
            }
            (Layer::Linear(l), Cache::Linear { input }) => {
                let g = grads.map(|g| {
                    let (w, b) = g.split_at_mut(1);
                    (w[0].as_mut_slice(), b[0].as_mut_slice())
                });
                Some(l.backward(input, grad_out, g)?)
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = grad_out.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Some(g)
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut g = grad_out.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                Some(g)
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = grad_out.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                Some(g)
            }
            (Layer::Upsample2x, Cache::Shape(s)) => {
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = Tensor::zeros(s);
                let src = grad_out.data();
                let dst = dx.data_mut();
                for p in 0..b * c {
                    let g = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dst[p * h * w..(p + 1) * h * w];
                    for iy in 0..2 * h {
                        for ix in 0..2 * w {
                            d[(iy / 2) * w + ix / 2] += g[iy * 2 * w + ix];
                        }
                    }
                }
                Some(dx)
            }
            (Layer::GlobalAvgPool, Cache::Shape(s)) => {
                let hw = s[2] * s[3];
                let mut dx = Tensor::zeros(s);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
                    plane.fill(g / hw as f32);
                }
                Some(dx)
            }
            (Layer::Residual(body), Cache::Residual(caches)) => {
                let mut g = grad_out.clone();
                let mut grads = grads;
                let mut offsets = Vec::with_capacity(body.len());
                let mut off = 0;
                for l in body {
                    offsets.push(off);
                    off += l.param_tensors();
                }
                for (idx, l) in body.iter().enumerate().rev() {
                    let n = l.param_tensors();
                    let slot = grads
                        .as_deref_mut()
                        .map(|gs| &mut gs[offsets[idx]..offsets[idx] + n]);
                    g = l
                        .backward(&caches[idx], &g, slot, true)?
                        .expect("input gradient requested");
                }
                for (gv, &o) in g.data_mut().iter_mut().zip(grad_out.data()) {
                    *gv += o;
                }
                Some(g)
            }
            _ => {
                return Err(crate::error::SaicError::Contract(
                    "layer cache does not match layer kind".into(),
                ))
            }
        })
    }
}
