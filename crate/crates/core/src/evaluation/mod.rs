//! Pixel, task and semantic metrics, plus the rate and τ experiment grids.

pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::codec::CodecNetwork;
use crate::data::{Dataset, Split};
use crate::error::{contract, Result, SaicError};
use crate::gsw::SemanticWeights;
use crate::losses::{feature_loss, LossKind};
use crate::si::{fit_and_estimate, PairedResults, SiConfig, SiEstimate};
use crate::task::{argmax_rows, write_atomic, TaskNetwork};
use crate::tensor::Tensor;
use crate::trainer::{finetune, CodecCheckpoint, Stage, TrainConfig};
use plot::{line_chart, Series, XScale};

pub const PSNR_CAP: f64 = 100.0;
const LOSSLESS_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "TDIC")]
    Tdic,
    #[serde(rename = "APIC")]
    Apic,
    #[serde(rename = "SAIC")]
    Saic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Tdic => "TDIC",
            Method::Apic => "APIC",
            Method::Saic => "SAIC",
        }
    }

    /// Method a codec checkpoint was trained for.
    pub fn of_checkpoint(ck: &CodecCheckpoint) -> Method {
        match (ck.config.stage, ck.config.loss) {
            (Stage::Pretrain, _) | (_, LossKind::Tdic) => Method::Tdic,
            (_, LossKind::Apic) => Method::Apic,
            (_, LossKind::Saic) => Method::Saic,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = SaicError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" | "identity" => Ok(Method::Original),
            "tdic" => Ok(Method::Tdic),
            "apic" => Ok(Method::Apic),
            "saic" => Ok(Method::Saic),
            other => Err(SaicError::Config(format!("unknown method '{other}'"))),
        }
    }
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    contract!(
        x.shape() == y.shape(),
        "metric inputs differ in shape: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    contract!(!x.is_empty(), "metric inputs are empty");
    Ok(())
}

fn image_mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

fn psnr_of_mse(mse: f64) -> f64 {
    if mse < LOSSLESS_MSE {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean over images of per-image MSE.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let b = x.batch();
    Ok((0..b).map(|i| image_mse(x.item(i), y.item(i))).sum::<f64>() / b as f64)
}

/// Mean over images of per-image PSNR with unit peak.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let b = x.batch();
    Ok((0..b)
        .map(|i| psnr_of_mse(image_mse(x.item(i), y.item(i))))
        .sum::<f64>()
        / b as f64)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// SSIM of one `h × w` plane with values in `[0, 1]`.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size);
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, _, _) = filter_valid(&fa, h, w, &win);
    let (mu_b, _, _) = filter_valid(&fb, h, w, &win);
    let (aa, _, _) = filter_valid(&prod(&fa, &fa), h, w, &win);
    let (bb, _, _) = filter_valid(&prod(&fb, &fb), h, w, &win);
    let (ab, _, _) = filter_valid(&prod(&fa, &fb), h, w, &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean over images of the channel-averaged SSIM.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..b {
        let (xa, ya) = (x.item(i), y.item(i));
        let per_image: f64 = (0..c)
            .map(|ch| {
                let r = ch * plane..(ch + 1) * plane;
                ssim_plane(&xa[r.clone()], &ya[r], h, w)
            })
            .sum::<f64>()
            / c as f64;
        total += per_image;
    }
    Ok(total / b as f64)
}

/// Top-1 accuracy and macro-F1. Classes that neither occur in `labels` nor
/// are ever predicted do not enter the F1 average.
pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    contract!(!labels.is_empty(), "task metrics need at least one image");
    contract!(pred.len() == labels.len(), "{} predictions for {} labels", pred.len(), labels.len());
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        contract!(y < classes && p < classes, "class index out of range");
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let acc = tp.iter().sum::<usize>() as f64 / labels.len() as f64;
    let scores: Vec<f64> = (0..classes)
        .filter(|&k| tp[k] + fp[k] + fn_[k] > 0)
        .map(|k| 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64)
        .collect();
    let f1 = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((acc, f1))
}

/// Accuracy and macro-F1 of the task network on `images`.
pub fn task_metrics(task: &TaskNetwork, images: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    contract!(images.batch() == labels.len() || labels.is_empty(), "image/label count mismatch");
    contract!(!labels.is_empty(), "task metrics need at least one image");
    let pred = task.predict(images)?;
    classification_metrics(&pred, labels, task.num_classes())
}

/// CRC-32 of `text` as eight hex digits.
pub fn fingerprint(text: &str) -> String {
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    /// Absent for the uncompressed row.
    pub bpp: Option<f64>,
    pub bpp_exact: Option<String>,
    pub psnr: f64,
    /// PSNR hit the cap.
    pub lossless: bool,
    pub mse: f64,
    pub ssim: f64,
    pub acc: f64,
    pub f1: f64,
    pub si: Option<SiEstimate>,
    pub feature_mse: f64,
    pub images: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    pub batch_size: usize,
    /// CLUB settings, or `None` to skip SI.
    pub si: Option<SiConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            batch_size: 64,
            si: Some(SiConfig::default()),
        }
    }
}

/// Metrics of `codec` (or of the originals when `codec` is `None`) on a split.
pub fn evaluate(
    method: Method,
    codec: Option<&CodecNetwork>,
    task: &TaskNetwork,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    match (method, codec) {
        (Method::Original, Some(_)) => {
            return Err(SaicError::Config("the original row takes no codec".into()))
        }
        (m, None) if m != Method::Original => {
            return Err(SaicError::Config(format!("{m} evaluation needs a codec checkpoint")))
        }
        _ => {}
    }
    let n = data.len(opts.split);
    contract!(n > 0, "the {:?} split is empty", opts.split);
    let (mut mse_sum, mut psnr_sum, mut ssim_sum, mut fmse_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut pred, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ids, mut y, mut yp) = (Vec::new(), Vec::new(), Vec::new());
    for batch in data.batches(opts.split, opts.batch_size) {
        let batch = batch?;
        let b = batch.len() as f64;
        let recon = match codec {
            Some(c) => c.reconstruct(&batch.pixels)?,
            None => batch.pixels.clone(),
        };
        mse_sum += mse(&batch.pixels, &recon)? * b;
        psnr_sum += psnr(&batch.pixels, &recon)? * b;
        ssim_sum += ssim(&batch.pixels, &recon)? * b;
        fmse_sum += feature_loss(&task.feature_maps(&batch.pixels)?, &task.feature_maps(&recon)?)? * b;
        let scores = task.perceive(&recon)?;
        pred.extend(argmax_rows(&scores));
        labels.extend_from_slice(&batch.labels);
        if opts.si.is_some() {
            y.extend_from_slice(task.perceive(&batch.pixels)?.data());
            yp.extend_from_slice(scores.data());
            ids.extend(batch.ids);
        }
    }
    let (acc, f1) = classification_metrics(&pred, &labels, task.num_classes())?;
    let si = match &opts.si {
        Some(cfg) => {
            let pairs = PairedResults::new(ids, task.num_classes(), y, yp)?;
            Some(fit_and_estimate(&pairs, cfg)?)
        }
        None => None,
    };
    let nf = n as f64;
    let mse_v = mse_sum / nf;
    let psnr_v = psnr_sum / nf;
    let print = format!(
        "{}|{:08x}|{:08x}|{:?}|{n}|{}",
        method,
        codec.map(|c| c.checksum()).unwrap_or(0),
        task.checksum(),
        opts.split,
        serde_json::to_string(&opts.si).unwrap_or_default()
    );
    Ok(MetricsReport {
        method,
        bpp: codec.map(|c| c.bpp().as_f64()),
        bpp_exact: codec.map(|c| c.bpp().to_string()),
        psnr: psnr_v,
        lossless: psnr_v >= PSNR_CAP,
        mse: mse_v,
        ssim: ssim_sum / nf,
        acc,
        f1,
        si,
        feature_mse: fmse_sum / nf,
        images: n,
        fingerprint: fingerprint(&print),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

pub const REPORT_COLUMNS: &str =
    "method\tbpp\tpsnr\tlossless\tmse\tssim\tacc\tf1\tsi\tfeature_mse\timages\tfingerprint";

fn report_cells(r: &MetricsReport) -> String {
    format!(
        "{}\t{}\t{:.4}\t{}\t{:.8}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.8}\t{}\t{}",
        r.method,
        opt(r.bpp),
        r.psnr,
        r.lossless,
        r.mse,
        r.ssim,
        r.acc,
        r.f1,
        opt(r.si.as_ref().map(|s| s.si)),
        r.feature_mse,
        r.images,
        r.fingerprint
    )
}

/// One row per report, tab separated, with a header line.
pub fn reports_to_tsv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(REPORT_COLUMNS);
    s.push('\n');
    for r in reports {
        s.push_str(&report_cells(r));
        s.push('\n');
    }
    s
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)
        .map_err(|e| SaicError::Format(format!("serializing report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
    let tsv = dir.join(format!("{stem}.tsv"));
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&tsv, reports_to_tsv(reports).as_bytes())?;
    write_atomic(&json, &to_json(&reports)?)?;
    Ok(vec![tsv, json])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    /// Nominal rate for the table when the checkpoint is missing.
    pub bpp: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: Method,
    pub bpp: f64,
    pub checkpoint: String,
    /// `"ok"`, `"absent"` or an error message.
    pub status: String,
    pub report: Option<MetricsReport>,
}

/// Evaluates every cell; missing or unreadable checkpoints are recorded and
/// skipped.
pub fn rate_sweep(
    cells: &[SweepCell],
    task: &TaskNetwork,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<RateRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut row = RateRow {
            method: cell.method,
            bpp: cell.bpp,
            checkpoint: cell.checkpoint.display().to_string(),
            status: "ok".into(),
            report: None,
        };
        if cell.method == Method::Original {
            row.report = Some(evaluate(Method::Original, None, task, data, opts)?);
            rows.push(row);
            continue;
        }
        if !cell.checkpoint.exists() {
            warn!("{} at {} bpp: checkpoint {} missing", cell.method, cell.bpp, row.checkpoint);
            row.status = "absent".into();
            rows.push(row);
            continue;
        }
        match CodecCheckpoint::load(&cell.checkpoint)
            .and_then(|ck| evaluate(cell.method, Some(&ck.codec), task, data, opts))
        {
            Ok(r) => {
                row.bpp = r.bpp.unwrap_or(cell.bpp);
                row.report = Some(r);
            }
            Err(e) => {
                warn!("{} at {} bpp failed: {e}", cell.method, cell.bpp);
                row.status = e.to_string();
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn rate_sweep_tsv(rows: &[RateRow]) -> String {
    let mut s = format!("status\tnominal_bpp\t{REPORT_COLUMNS}\n");
    for r in rows {
        match &r.report {
            Some(rep) => writeln!(s, "{}\t{}\t{}", r.status, r.bpp, report_cells(rep)).unwrap(),
            None => writeln!(
                s,
                "{}\t{}\t{}\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-",
                r.status.replace(['\t', '\n'], " "),
                r.bpp,
                r.method
            )
            .unwrap(),
        }
    }
    s
}

fn series_by_method(rows: &[RateRow], value: impl Fn(&MetricsReport) -> f64) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let (Some(rep), true) = (&r.report, r.method != Method::Original) else {
            continue;
        };
        let label = r.method.to_string();
        let point = (r.bpp, value(rep));
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                label,
                points: vec![point],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Table, JSON and plots for a rate sweep.
pub fn write_rate_sweep(dir: &Path, rows: &[RateRow]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("rate_sweep.tsv", rate_sweep_tsv(rows).as_bytes())?;
    put("rate_sweep.json", &to_json(&rows)?)?;
    let charts: [(&str, &str, fn(&MetricsReport) -> f64); 3] = [
        ("rate_sweep_feature_mse.svg", "feature MSE", |r| r.feature_mse),
        ("rate_sweep_acc.svg", "accuracy", |r| r.acc),
        ("rate_sweep_psnr.svg", "PSNR (dB)", |r| r.psnr),
    ];
    for (file, label, f) in charts {
        let svg = line_chart(
            &format!("{label} vs rate"),
            "bpp",
            label,
            XScale::Categorical,
            &series_by_method(rows, f),
        );
        put(file, svg.as_bytes())?;
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    /// `"ok"` or an error message.
    pub status: String,
    pub final_loss: Option<f64>,
    pub report: Option<MetricsReport>,
}

/// One SAIC fine-tune per τ from the same pre-trained codec, with weights
/// remapped from the same raw channel scores and identical schedule/seed.
pub fn tau_sweep(
    pretrained: &CodecCheckpoint,
    task: &TaskNetwork,
    raw_weights: &SemanticWeights,
    taus: &[f64],
    data: &Dataset,
    train: &TrainConfig,
    opts: &EvalOptions,
    on_checkpoint: &mut dyn FnMut(f64, &CodecCheckpoint) -> Result<()>,
) -> Result<Vec<TauPoint>> {
    contract!(!taus.is_empty(), "the τ sweep needs at least one value");
    let cfg = TrainConfig {
        loss: LossKind::Saic,
        ..train.clone()
    };
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        info!("τ sweep: τ = {tau}");
        let run = || -> Result<(CodecCheckpoint, MetricsReport)> {
            let w = raw_weights.remap(tau, raw_weights.r)?;
            let ck = finetune(pretrained, task, Some(&w), data, &cfg, &mut |_, _| {})?;
            let rep = evaluate(Method::Saic, Some(&ck.codec), task, data, opts)?;
            Ok((ck, rep))
        };
        match run() {
            Ok((ck, rep)) => {
                on_checkpoint(tau, &ck)?;
                points.push(TauPoint {
                    tau,
                    status: "ok".into(),
                    final_loss: Some(ck.final_loss),
                    report: Some(rep),
                });
            }
            Err(e) => {
                warn!("τ = {tau} failed: {e}");
                points.push(TauPoint {
                    tau,
                    status: e.to_string(),
                    final_loss: None,
                    report: None,
                });
            }
        }
    }
    Ok(points)
}

pub fn tau_sweep_tsv(points: &[TauPoint]) -> String {
    let mut s = String::from("tau\tstatus\tsi\tacc\tf1\tfeature_mse\tfinal_loss\n");
    for p in points {
        let rep = p.report.as_ref();
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.tau,
            p.status.replace(['\t', '\n'], " "),
            opt(rep.and_then(|r| r.si.as_ref().map(|s| s.si))),
            opt(rep.map(|r| r.acc)),
            opt(rep.map(|r| r.f1)),
            rep.map(|r| format!("{:.8}", r.feature_mse)).unwrap_or_else(|| "-".into()),
            p.final_loss.map(|v| format!("{v:.8}")).unwrap_or_else(|| "-".into()),
        )
        .unwrap();
    }
    s
}

/// Curve table, JSON and plots for a τ sweep.
pub fn write_tau_sweep(dir: &Path, points: &[TauPoint]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("tau_sweep.tsv", tau_sweep_tsv(points).as_bytes())?;
    put("tau_sweep.json", &to_json(&points)?)?;
    let curve = |f: fn(&MetricsReport) -> Option<f64>| -> Vec<(f64, f64)> {
        points
            .iter()
            .filter_map(|p| p.report.as_ref().and_then(f).map(|v| (p.tau, v)))
            .collect()
    };
    for (file, label, f) in [
        ("tau_sweep_si.svg", "SI (nats)", (|r: &MetricsReport| r.si.as_ref().map(|s| s.si)) as fn(&MetricsReport) -> Option<f64>),
        ("tau_sweep_acc.svg", "accuracy", |r: &MetricsReport| Some(r.acc)),
    ] {
        let svg = line_chart(
            &format!("{label} vs τ"),
            "τ",
            label,
            XScale::Categorical,
            &[Series {
                label: "SAIC".into(),
                points: curve(f),
            }],
        );
        put(file, svg.as_bytes())?;
    }
    Ok(written)
}
