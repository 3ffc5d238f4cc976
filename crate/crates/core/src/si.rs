//! Semantic information between perceptual results of original and
//! compressed images, estimated with CLUB.
//!
//! A small network maps `y` to the mean and log-variance of a diagonal
//! Gaussian `q(y'|y)`, fitted by maximum likelihood. The estimate is
//! `E_{p(y,y')}[log q(y'|y)] − E_{p(y)}E_{p(y')}[log q(y'|y)]`, the first
//! term over aligned pairs and the second over all cross pairs (or random
//! derangements for large `N`). Values are in nats.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{contract, Result, SaicError};
use crate::nn::{Adam, AdamConfig, Layer, Linear, Network};
use crate::task::TaskNetwork;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Largest `N` for which the cross term averages over all `N²` pairs.
pub const FULL_PAIRWISE_MAX: usize = 2000;
/// Derangements per row used above [`FULL_PAIRWISE_MAX`].
pub const DERANGEMENTS: usize = 10;

/// Aligned perceptual results: row `i` of `y` and `y_prime` come from the
/// same source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResults {
    pub ids: Vec<String>,
    pub classes: usize,
    /// `[N × C]` row-major.
    pub y: Vec<f32>,
    pub y_prime: Vec<f32>,
}

impl PairedResults {
    pub fn new(ids: Vec<String>, classes: usize, y: Vec<f32>, y_prime: Vec<f32>) -> Result<Self> {
        contract!(classes >= 1, "need at least one score per row");
        contract!(
            y.len() == ids.len() * classes && y_prime.len() == y.len(),
            "paired results: {} ids, {} and {} values for {classes} classes",
            ids.len(),
            y.len(),
            y_prime.len()
        );
        Ok(PairedResults {
            ids,
            classes,
            y,
            y_prime,
        })
    }

    /// From two `[N, C]` tensors with positional ids.
    pub fn from_tensors(y: &Tensor, y_prime: &Tensor) -> Result<Self> {
        let (n, c) = y.dims2()?;
        contract!(y.shape() == y_prime.shape(), "paired results shape mismatch");
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::new(ids, c, y.data().to_vec(), y_prime.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f32], &[f32]) {
        let c = self.classes;
        (&self.y[i * c..(i + 1) * c], &self.y_prime[i * c..(i + 1) * c])
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let c = self.classes;
        let mut out = PairedResults {
            ids: Vec::with_capacity(rows.len()),
            classes: c,
            y: Vec::with_capacity(rows.len() * c),
            y_prime: Vec::with_capacity(rows.len() * c),
        };
        for &i in rows {
            out.ids.push(self.ids[i].clone());
            let (a, b) = self.row(i);
            out.y.extend_from_slice(a);
            out.y_prime.extend_from_slice(b);
        }
        out
    }

    /// Columnar text: `id`, `y_0..y_{C-1}`, `yp_0..yp_{C-1}`, tab separated.
    pub fn to_tsv(&self) -> String {
        let c = self.classes;
        let mut s = String::from("id");
        for k in 0..c {
            write!(s, "\ty_{k}").unwrap();
        }
        for k in 0..c {
            write!(s, "\typ_{k}").unwrap();
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&self.ids[i]);
            let (a, b) = self.row(i);
            for v in a.iter().chain(b) {
                write!(s, "\t{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| SaicError::Format("empty paired-results file".into()))?;
        let cols = header.split('\t').count();
        if cols < 3 || (cols - 1) % 2 != 0 || !header.starts_with("id") {
            return Err(SaicError::Format(format!("bad paired-results header '{header}'")));
        }
        let c = (cols - 1) / 2;
        let (mut ids, mut y, mut yp) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != cols {
                return Err(SaicError::Format(format!(
                    "line {}: {} columns, expected {cols}",
                    ln + 2,
                    fields.len()
                )));
            }
            ids.push(fields[0].to_string());
            for (k, f) in fields[1..].iter().enumerate() {
                let v: f32 = f.parse().map_err(|_| {
                    SaicError::Format(format!("line {}: '{f}' is not a number", ln + 2))
                })?;
                if k < c {
                    y.push(v);
                } else {
                    yp.push(v);
                }
            }
        }
        Self::new(ids, c, y, yp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::task::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SaicError::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiConfig {
    /// Hidden width as a multiple of `C`.
    pub hidden_mult: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Fraction of fitting pairs held out for early stopping.
    pub holdout_fraction: f64,
    /// Log-variance is `bound · tanh(raw)`, so `σ² ∈ [e^-bound, e^bound]`
    /// in standardized units.
    pub log_var_bound: f32,
    pub seed: u64,
}

impl Default for SiConfig {
    fn default() -> Self {
        SiConfig {
            hidden_mult: 4,
            epochs: 200,
            batch_size: 256,
            lr: 3e-3,
            patience: 20,
            holdout_fraction: 0.1,
            log_var_bound: 1.0,
            seed: 0,
        }
    }
}

/// Diagonal Gaussian `q(y'|y)` on standardized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub classes: usize,
    pub network: Network,
    pub y_mean: Vec<f32>,
    pub y_std: Vec<f32>,
    pub yp_mean: Vec<f32>,
    pub yp_std: Vec<f32>,
    pub log_var_bound: f32,
    pub epochs_run: usize,
    pub train_nll: Vec<f64>,
}

fn column_stats(v: &[f32], c: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (v.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for row in v.chunks(c) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for row in v.chunks(c) {
        for ((s, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (x as f64 - m).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|s| ((s / n).sqrt()).max(1e-6) as f32)
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

fn standardize(v: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    let c = mean.len();
    v.iter()
        .enumerate()
        .map(|(i, &x)| (x - mean[i % c]) / std[i % c])
        .collect()
}

impl ConditionalModel {
    /// `(μ, log σ²)` rows for standardized inputs.
    fn predict_std(&self, y_std: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
        let out = self.network.forward(y_std)?;
        let c = self.classes;
        let mut mu = Vec::with_capacity(out.batch() * c);
        let mut lv = Vec::with_capacity(out.batch() * c);
        for row in out.data().chunks(2 * c) {
            mu.extend_from_slice(&row[..c]);
            lv.extend(row[c..].iter().map(|&s| self.log_var_bound * s.tanh()));
        }
        Ok((mu, lv))
    }

    fn std_y(&self, y: &[f32]) -> Result<Tensor> {
        let n = y.len() / self.classes;
        Tensor::from_vec(&[n, self.classes], standardize(y, &self.y_mean, &self.y_std))
    }

    /// Predicted mean and variance of `y'` in original units.
    pub fn predict(&self, y: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let (mu, lv) = self.predict_std(&self.std_y(y)?)?;
        let c = self.classes;
        let mean = mu
            .iter()
            .enumerate()
            .map(|(i, m)| m * self.yp_std[i % c] + self.yp_mean[i % c])
            .collect();
        let var = lv
            .iter()
            .enumerate()
            .map(|(i, s)| s.exp() * self.yp_std[i % c].powi(2))
            .collect();
        Ok((mean, var))
    }

    /// Mean Gaussian log-likelihood of aligned pairs (standardized units).
    pub fn mean_log_likelihood(&self, pairs: &PairedResults) -> Result<f64> {
        let (mu, lv) = self.predict_std(&self.std_y(&pairs.y)?)?;
        let yp = standardize(&pairs.y_prime, &self.yp_mean, &self.yp_std);
        let c = self.classes;
        let total: f64 = (0..pairs.len())
            .map(|i| log_q(&yp[i * c..(i + 1) * c], &mu[i * c..(i + 1) * c], &lv[i * c..(i + 1) * c]))
            .sum();
        Ok(total / pairs.len() as f64)
    }
}

fn log_q(yp: &[f32], mu: &[f32], lv: &[f32]) -> f64 {
    yp.iter()
        .zip(mu)
        .zip(lv)
        .map(|((&y, &m), &s)| {
            let d = (y - m) as f64;
            -0.5 * (LN_2PI + s as f64 + d * d / (s as f64).exp())
        })
        .sum()
}

/// Maximum-likelihood fit of `q(y'|y)` with early stopping.
pub fn fit_conditional(pairs: &PairedResults, cfg: &SiConfig) -> Result<ConditionalModel> {
    let n = pairs.len();
    if n < 2 {
        return Err(SaicError::Contract(format!(
            "CLUB fitting needs at least 2 pairs, got {n}"
        )));
    }
    let c = pairs.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (y_mean, y_std) = column_stats(&pairs.y, c);
    let (yp_mean, yp_std) = column_stats(&pairs.y_prime, c);
    let first = pairs.row(0);
    if (1..n).all(|i| pairs.row(i) == first) {
        warn!("all {n} paired rows are identical; variance will sit at its lower bound");
    }
    let ys = standardize(&pairs.y, &y_mean, &y_std);
    let yps = standardize(&pairs.y_prime, &yp_mean, &yp_std);

    let hidden = cfg.hidden_mult.max(1) * c;
    let mut network = Network::new()
        .with("fc1", Layer::Linear(Linear::new(c, hidden, &mut rng)))
        .with("act1", Layer::Relu)
        .with("fc2", Layer::Linear(Linear::new(hidden, hidden, &mut rng)))
        .with("act2", Layer::Relu)
        .with("out", Layer::Linear(Linear::new(hidden, 2 * c, &mut rng)));
    let bound = cfg.log_var_bound;
    contract!(bound > 0.0 && bound.is_finite(), "log_var_bound must be positive");

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let gather = |rows: &[usize], src: &[f32]| -> Vec<f32> {
        rows.iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect()
    };
    let nll_of = |net: &Network, rows: &[usize]| -> Result<f64> {
        let x = Tensor::from_vec(&[rows.len(), c], gather(rows, &ys))?;
        let t = gather(rows, &yps);
        let out = net.forward(&x)?;
        let mut total = 0.0;
        for (i, row) in out.data().chunks(2 * c).enumerate() {
            let lv: Vec<f32> = row[c..].iter().map(|&s| bound * s.tanh()).collect();
            total -= log_q(&t[i * c..(i + 1) * c], &row[..c], &lv);
        }
        Ok(total / rows.len() as f64)
    };

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &network.params(),
    );
    let mut best = (f64::INFINITY, network.clone(), 0usize);
    let mut history = Vec::new();
    let bs = cfg.batch_size.max(1);
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(bs) {
            let x = Tensor::from_vec(&[chunk.len(), c], gather(chunk, &ys))?;
            let t = gather(chunk, &yps);
            let (out, trace) = network.forward_trace(&x)?;
            let mut grad = Tensor::zeros(out.shape());
            let scale = 1.0 / chunk.len() as f32;
            for (i, (row, g)) in out
                .data()
                .chunks(2 * c)
                .zip(grad.data_mut().chunks_mut(2 * c))
                .enumerate()
            {
                for k in 0..c {
                    let th = row[c + k].tanh();
                    let inv_var = (-bound * th).exp();
                    let d = t[i * c + k] - row[k];
                    g[k] = -d * inv_var * scale;
                    g[c + k] = 0.5 * (1.0 - d * d * inv_var) * bound * (1.0 - th * th) * scale;
                }
            }
            let mut grads = network.zero_grads();
            network.backward(&trace, &grad, Some(&mut grads), false)?;
            adam.update(network.params_mut(), &grads)?;
        }
        epochs_run = epoch + 1;
        let train_nll = nll_of(&network, &train)?;
        history.push(train_nll);
        let monitor = if hold.is_empty() {
            train_nll
        } else {
            nll_of(&network, hold)?
        };
        if !monitor.is_finite() {
            return Err(SaicError::Numerical(format!(
                "CLUB fit produced non-finite likelihood at epoch {epoch}"
            )));
        }
        if monitor < best.0 {
            best = (monitor, network.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    Ok(ConditionalModel {
        classes: c,
        network: best.1,
        y_mean,
        y_std,
        yp_mean,
        yp_std,
        log_var_bound: bound,
        epochs_run,
        train_nll: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiEstimate {
    /// Nats.
    pub si: f64,
    /// Mean log-likelihood of aligned pairs.
    pub positive: f64,
    /// Mean log-likelihood of cross pairs.
    pub negative: f64,
    pub n: usize,
    /// `"full"` or `"derangement"`.
    pub negative_mode: String,
    pub negative_samples: usize,
}

/// Random permutation without fixed points (Sattolo's cycle).
fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

pub fn estimate_si(model: &ConditionalModel, pairs: &PairedResults, seed: u64) -> Result<SiEstimate> {
    let n = pairs.len();
    let c = pairs.classes;
    contract!(n >= 2, "SI estimation needs at least 2 pairs");
    contract!(
        c == model.classes,
        "model was fitted on {} scores, pairs have {c}",
        model.classes
    );
    let (mu, lv) = model.predict_std(&model.std_y(&pairs.y)?)?;
    let yp = standardize(&pairs.y_prime, &model.yp_mean, &model.yp_std);
    let row = |v: &[f32], i: usize| -> Vec<f32> { v[i * c..(i + 1) * c].to_vec() };

    let aligned: Vec<f64> = (0..n)
        .map(|i| log_q(&yp[i * c..(i + 1) * c], &mu[i * c..(i + 1) * c], &lv[i * c..(i + 1) * c]))
        .collect();
    let bad: Vec<usize> = aligned
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(SaicError::Numerical(format!(
            "non-finite log-likelihood in rows {bad:?}"
        )));
    }
    let positive = aligned.iter().sum::<f64>() / n as f64;

    let (negative, mode, samples) = if n <= FULL_PAIRWISE_MAX {
        let mut total = 0.0;
        for i in 0..n {
            let (m, s) = (row(&mu, i), row(&lv, i));
            for j in 0..n {
                total += log_q(&yp[j * c..(j + 1) * c], &m, &s);
            }
        }
        (total / (n * n) as f64, "full", n * n)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..DERANGEMENTS {
            let p = derangement(n, &mut rng);
            for i in 0..n {
                let j = p[i];
                total += log_q(&yp[j * c..(j + 1) * c], &mu[i * c..(i + 1) * c], &lv[i * c..(i + 1) * c]);
            }
        }
        (total / (n * DERANGEMENTS) as f64, "derangement", n * DERANGEMENTS)
    };
    if !negative.is_finite() {
        return Err(SaicError::Numerical("non-finite cross-pair log-likelihood".into()));
    }
    Ok(SiEstimate {
        si: positive - negative,
        positive,
        negative,
        n,
        negative_mode: mode.into(),
        negative_samples: samples,
    })
}

/// Fit on even rows, estimate on odd rows.
pub fn fit_and_estimate(pairs: &PairedResults, cfg: &SiConfig) -> Result<SiEstimate> {
    let even: Vec<usize> = (0..pairs.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..pairs.len()).step_by(2).collect();
    let model = fit_conditional(&pairs.subset(&even), cfg)?;
    estimate_si(&model, &pairs.subset(&odd), cfg.seed)
}

/// Perceptual results of originals and of `transform(x)` over `batches`.
pub fn collect_pairs(
    task: &TaskNetwork,
    batches: impl IntoIterator<Item = Result<ImageBatch>>,
    transform: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<PairedResults> {
    let c = task.num_classes();
    let (mut ids, mut y, mut yp) = (Vec::new(), Vec::new(), Vec::new());
    for batch in batches {
        let batch = batch?;
        y.extend_from_slice(task.perceive(&batch.pixels)?.data());
        yp.extend_from_slice(task.perceive(&transform(&batch.pixels)?)?.data());
        ids.extend(batch.ids);
    }
    PairedResults::new(ids, c, y, yp)
}
