use std::collections::BTreeSet;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use saic::codec::bitstream::{Bitstream, FILE_EXTENSION};
use saic::codec::CodecNetwork;
use saic::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
use saic::data::{load_image, save_image, Split};
use saic::evaluation::{
    evaluate as eval_method, rate_sweep, reports_to_tsv, tau_sweep, write_rate_sweep,
    write_reports, write_tau_sweep, Method, SweepCell,
};
use saic::gsw::{compute_semantic_weights, SemanticWeights};
use saic::losses::LossKind;
use saic::si::{collect_pairs, fit_and_estimate, SiConfig};
use saic::task::TaskNetwork;
use saic::trainer::{continue_training, finetune as finetune_codec, pretrain, train_task_network};
use saic::trainer::{CodecCheckpoint, LineLog};
use saic::{Result, SaicError, Tensor};

use crate::context::{Context, PRETRAIN, WEIGHTS};

const LOG_EVERY: u64 = 100;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn make_dataset(root: &Path, per_class: usize, size: usize, channels: usize, seed: u64) -> Result<()> {
    if per_class == 0 || size == 0 || !(channels == 1 || channels == 3) {
        return Err(SaicError::Config(
            "make-dataset needs --per-class ≥ 1, --size ≥ 1 and --channels 1 or 3".into(),
        ));
    }
    let n = saic::synthetic::write_dataset(root, per_class, size, channels, seed)?;
    println!("wrote {n} images ({size}x{size}, {channels} channels) to {}", root.display());
    Ok(())
}

pub fn train_task(ctx: &Context) -> Result<()> {
    let data = ctx.dataset()?;
    let mut log = LineLog::new(BufWriter::new(ctx.log_file("task")?), LOG_EVERY);
    let ck = train_task_network(&data, &ctx.cfg.task_train_config(), &mut |s, l| log.record(s, l))?;
    let path = ctx.cfg.task_checkpoint_path();
    ck.save(&path)?;
    match ck.documented_accuracy {
        Some(a) => println!("task network saved to {} (test accuracy {:.4})", path.display(), a),
        None => println!("task network saved to {}", path.display()),
    }
    Ok(())
}

pub fn train_codec(ctx: &Context) -> Result<()> {
    let data = ctx.dataset()?;
    let codec = CodecNetwork::new(ctx.cfg.codec_config(), ctx.cfg.seed)?;
    let mut log = LineLog::new(BufWriter::new(ctx.log_file("pretrain")?), LOG_EVERY);
    let ck = pretrain(codec, &data, &ctx.cfg.pretrain_config(), &mut |s, l| log.record(s, l))?;
    let path = ctx.path(PRETRAIN);
    ck.save(&path)?;
    println!(
        "pre-trained codec saved to {} ({} steps, final loss {:.6}, {} bpp)",
        path.display(),
        ck.step,
        ck.final_loss,
        ck.codec.bpp()
    );
    Ok(())
}

fn compute_weights(ctx: &Context, task: &TaskNetwork, tau: Option<f64>) -> Result<SemanticWeights> {
    let data = ctx.dataset()?;
    let mut gsw = ctx.cfg.gsw_config();
    if let Some(t) = tau {
        gsw.tau = t;
    }
    let calibration = data.calibration_batches(ctx.cfg.eval_batch_size)?;
    let w = compute_semantic_weights(task, &calibration, &gsw, ctx.cfg.seed)?;
    w.save(&ctx.path(WEIGHTS))?;
    info!("semantic weights cached in {}", ctx.path(WEIGHTS).display());
    Ok(w)
}

/// Cached weights when they belong to this task network, otherwise freshly
/// computed ones; remapped to `tau` if given.
fn cached_or_computed(ctx: &Context, task: &TaskNetwork, tau: Option<f64>) -> Result<SemanticWeights> {
    let path = ctx.path(WEIGHTS);
    if path.exists() {
        let w = SemanticWeights::load(&path)?;
        let same_task = w
            .calibration
            .as_ref()
            .is_some_and(|c| c.task_checksum == task.checksum());
        if same_task && w.k == task.feature_shape().0 {
            let tau = tau.unwrap_or_else(|| ctx.cfg.gsw_config().tau);
            return if tau == w.tau { Ok(w) } else { w.remap(tau, w.r) };
        }
        warn!("{} was computed for another task network; recomputing", path.display());
    } else {
        info!("no cached semantic weights; computing them first");
    }
    compute_weights(ctx, task, tau)
}

pub fn weights(ctx: &Context, tau: Option<f64>, top_k: usize) -> Result<()> {
    let task = ctx.task()?;
    let w = compute_weights(ctx, &task, tau)?;
    println!(
        "K = {}, tau = {}, r = {}, variance(W') = {:.6e}",
        w.k,
        w.tau,
        w.r,
        w.mapped_variance()
    );
    println!("rank\tchannel\tW'\tW");
    for (rank, (ch, v)) in w.top_k(top_k).into_iter().enumerate() {
        println!("{}\t{ch}\t{v:.6}\t{:.6e}", rank + 1, w.raw[ch]);
    }
    println!("cached in {}", ctx.path(WEIGHTS).display());
    Ok(())
}

pub fn finetune(
    ctx: &Context,
    loss: Option<&str>,
    uniform: bool,
    weights_file: Option<&Path>,
    tau: Option<f64>,
) -> Result<()> {
    let kind: LossKind = match loss {
        Some(s) => s.parse()?,
        None => ctx.cfg.loss,
    };
    if kind != LossKind::Saic && (uniform || weights_file.is_some() || tau.is_some()) {
        return Err(SaicError::Config(format!(
            "--uniform-weights, --weights and --tau only apply to --loss saic, not {kind}"
        )));
    }
    if uniform && (weights_file.is_some() || tau.is_some()) {
        return Err(SaicError::Config(
            "--uniform-weights cannot be combined with --weights or --tau".into(),
        ));
    }
    let pre = ctx.pretrained()?;
    let data = ctx.dataset()?;
    let stem = Context::finetune_name(kind, uniform);
    let stem = stem.trim_end_matches(".json");
    let mut log = LineLog::new(BufWriter::new(ctx.log_file(stem)?), LOG_EVERY);
    let mut observer = |s, l| log.record(s, l);
    let ck = if kind == LossKind::Tdic {
        continue_training(&pre, None, &data, ctx.cfg.finetune_steps, &mut observer)?
    } else {
        let task = ctx.task()?;
        let w = match (kind, uniform, weights_file) {
            (LossKind::Apic, ..) => None,
            (_, true, _) => Some(SemanticWeights::uniform(task.feature_shape().0)?),
            (_, false, Some(p)) => {
                let w = SemanticWeights::load(p)?;
                Some(match tau {
                    Some(t) => w.remap(t, w.r)?,
                    None => w,
                })
            }
            (_, false, None) => Some(cached_or_computed(ctx, &task, tau)?),
        };
        if let Some(w) = &w {
            info!("semantic weights: tau = {}, r = {}, variance {:.3e}", w.tau, w.r, w.mapped_variance());
        }
        let cfg = ctx.cfg.finetune_config(kind);
        finetune_codec(&pre, &task, w.as_ref(), &data, &cfg, &mut observer)?
    };
    let path = ctx.path(&format!("{stem}.json"));
    ck.save(&path)?;
    println!(
        "{kind} codec saved to {} (final loss {:.6e})",
        path.display(),
        ck.final_loss
    );
    Ok(())
}

/// Codec used by compress/decompress when no checkpoint is given.
fn default_codec_path(ctx: &Context) -> Result<PathBuf> {
    let mut candidates = vec![ctx.path(&Context::finetune_name(ctx.cfg.loss, false))];
    candidates.push(ctx.path(PRETRAIN));
    candidates.into_iter().find(|p| p.exists()).ok_or_else(|| {
        SaicError::Config(format!(
            "no codec checkpoint in {}; run `saic train-codec` (and `saic finetune`) first or pass --checkpoint",
            ctx.out.display()
        ))
    })
}

fn load_codec(ctx: &Context, checkpoint: Option<&Path>) -> Result<CodecCheckpoint> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_codec_path(ctx)?,
    };
    info!("codec checkpoint {}", path.display());
    CodecCheckpoint::load(&path)
}

/// Files given directly plus the matching entries of given directories, sorted.
fn expand_inputs(inputs: &[PathBuf], extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let matches = |p: &Path| {
        p.extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .is_some_and(|e| extensions.contains(&e.as_str()))
    };
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| SaicError::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches(p))
                .collect();
            found.sort();
            files.extend(found);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            return Err(SaicError::Config(format!("input {} does not exist", input.display())));
        }
    }
    if files.is_empty() {
        return Err(SaicError::Config(format!(
            "no input files with extension {}",
            extensions.join("/")
        )));
    }
    Ok(files)
}

/// Output paths `<dir>/<stem>.<ext>`, refusing stem collisions.
fn output_paths(files: &[PathBuf], dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut seen = BTreeSet::new();
    files
        .iter()
        .map(|f| {
            let stem = f
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            if !seen.insert(stem.clone()) {
                return Err(SaicError::Config(format!(
                    "two inputs share the name '{stem}'; compress them separately"
                )));
            }
            Ok(dir.join(format!("{stem}.{ext}")))
        })
        .collect()
}

pub fn compress(
    ctx: &Context,
    inputs: &[PathBuf],
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    resize: bool,
) -> Result<()> {
    let ck = load_codec(ctx, checkpoint)?;
    let codec = &ck.codec;
    let (h, w) = codec.config.image_size;
    let c = codec.config.image_channels;
    let files = expand_inputs(inputs, &IMAGE_EXTENSIONS)?;
    let dir = match out {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| SaicError::io(d, e))?;
            d.to_path_buf()
        }
        None => ctx.subdir("bitstreams")?,
    };
    let targets = output_paths(&files, &dir, FILE_EXTENSION)?;
    let bpp = codec.bpp();
    let (mut flipped, mut total_bits, mut unstable) = (0usize, 0usize, 0usize);
    for (file, target) in files.iter().zip(&targets) {
        let pixels = load_image(file, (h, w), c, resize)?;
        let x = Tensor::from_vec(&[1, c, h, w], pixels)?;
        let stream = codec.compress(&x)?.remove(0);
        stream.write(target)?;
        // Fixed-point check: the reconstruction must map back to the same bits.
        let again = codec.compress(&codec.decompress(std::slice::from_ref(&stream))?)?.remove(0);
        let diff = stream.bits.iter().zip(&again.bits).filter(|(a, b)| a != b).count();
        flipped += diff;
        total_bits += stream.bits.len();
        unstable += (diff > 0) as usize;
        let bytes = std::fs::metadata(target).map_err(|e| SaicError::io(target, e))?.len();
        println!(
            "{} -> {} ({} bytes, {}/{} = {} bpp)",
            file.display(),
            target.display(),
            bytes,
            bpp.bits,
            bpp.pixels,
            bpp
        );
    }
    let rate = flipped as f64 / total_bits.max(1) as f64;
    println!(
        "compressed {} images at exactly {}/{} = {} bpp; fixed-point violations: {flipped}/{total_bits} bits ({rate:.6}), {unstable} images",
        files.len(),
        bpp.bits,
        bpp.pixels,
        bpp
    );
    if flipped > 0 {
        warn!("re-compressing reconstructions changed {flipped} bits");
    }
    Ok(())
}

pub fn decompress(
    ctx: &Context,
    inputs: &[PathBuf],
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ck = load_codec(ctx, checkpoint)?;
    let codec = &ck.codec;
    let files = expand_inputs(inputs, &[FILE_EXTENSION])?;
    let dir = match out {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| SaicError::io(d, e))?;
            d.to_path_buf()
        }
        None => ctx.subdir("reconstructions")?,
    };
    let targets = output_paths(&files, &dir, "png")?;
    let (h, w) = codec.config.image_size;
    for (file, target) in files.iter().zip(&targets) {
        let stream = Bitstream::read(file)?;
        if (stream.height as usize, stream.width as usize) != (h, w) {
            return Err(SaicError::Format(format!(
                "{} encodes a {}x{} image but the codec works on {h}x{w}",
                file.display(),
                stream.height,
                stream.width
            )));
        }
        let x = codec.decompress(std::slice::from_ref(&stream))?;
        save_image(target, x.item(0), codec.config.image_channels, h, w)?;
        println!("{} -> {}", file.display(), target.display());
    }
    Ok(())
}

/// Checkpoint evaluated for a method in this run.
fn method_checkpoint(ctx: &Context, method: Method) -> Result<Option<PathBuf>> {
    let (path, cmd) = match method {
        Method::Original => return Ok(None),
        Method::Tdic => {
            let own = ctx.path(&Context::finetune_name(LossKind::Tdic, false));
            if own.exists() {
                return Ok(Some(own));
            }
            (ctx.path(PRETRAIN), "saic train-codec".to_string())
        }
        Method::Apic => (
            ctx.path(&Context::finetune_name(LossKind::Apic, false)),
            "saic finetune --loss apic".into(),
        ),
        Method::Saic => (
            ctx.path(&Context::finetune_name(LossKind::Saic, false)),
            "saic finetune --loss saic".into(),
        ),
    };
    if !path.exists() {
        return Err(SaicError::Config(format!(
            "{method} needs {}; run `{cmd}` first",
            path.display()
        )));
    }
    Ok(Some(path))
}

pub fn evaluate(ctx: &Context, methods: &[String], with_si: bool) -> Result<()> {
    let methods = methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    let checkpoints = methods
        .iter()
        .map(|&m| method_checkpoint(ctx, m))
        .collect::<Result<Vec<_>>>()?;
    let task = ctx.task()?;
    let data = ctx.dataset()?;
    let opts = ctx.cfg.eval_options(with_si);
    let mut reports = Vec::new();
    for (&method, ck) in methods.iter().zip(&checkpoints) {
        info!("evaluating {method}");
        let ck = ck.as_deref().map(CodecCheckpoint::load).transpose()?;
        reports.push(eval_method(method, ck.as_ref().map(|c| &c.codec), &task, &data, &opts)?);
    }
    let dir = ctx.subdir("reports")?;
    let written = write_reports(&dir, "evaluate", &reports)?;
    print!("{}", reports_to_tsv(&reports));
    println!("report written to {}", written[0].display());
    Ok(())
}

pub fn si(ctx: &Context, method: &str, checkpoint: Option<&Path>) -> Result<()> {
    let method: Method = method.parse()?;
    let path = match checkpoint {
        Some(p) => Some(p.to_path_buf()),
        None => method_checkpoint(ctx, method)?,
    };
    let codec = path.as_deref().map(CodecCheckpoint::load).transpose()?.map(|c| c.codec);
    let task = ctx.task()?;
    let data = ctx.dataset()?;
    let transform = |x: &Tensor| -> Result<Tensor> {
        match &codec {
            Some(c) => c.reconstruct(x),
            None => Ok(x.clone()),
        }
    };
    let pairs = collect_pairs(&task, data.batches(Split::Test, ctx.cfg.eval_batch_size), &transform)?;
    let dir = ctx.subdir("reports")?;
    let name = method.name().to_ascii_lowercase();
    let pairs_path = dir.join(format!("si_pairs_{name}.tsv"));
    pairs.save(&pairs_path)?;
    let cfg = SiConfig {
        epochs: ctx.cfg.si_epochs,
        seed: ctx.cfg.seed,
        ..Default::default()
    };
    let est = fit_and_estimate(&pairs, &cfg)?;
    let json_path = dir.join(format!("si_{name}.json"));
    let json = serde_json::to_vec_pretty(&est)
        .map_err(|e| SaicError::Format(format!("serializing SI estimate: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| SaicError::io(&json_path, e))?;
    println!(
        "{method}: SI = {:.6} nats (positive {:.6}, negative {:.6}, n = {}, {} negatives)",
        est.si, est.positive, est.negative, est.n, est.negative_mode
    );
    println!("pairs written to {}", pairs_path.display());
    Ok(())
}

pub fn sweep(ctx: &Context, taus: &[f64], runs: &[PathBuf], with_si: bool) -> Result<()> {
    if taus.is_empty() == runs.is_empty() {
        return Err(SaicError::Config(
            "sweep needs exactly one of --tau <list> or --runs <dirs>".into(),
        ));
    }
    let task = ctx.task()?;
    let data = ctx.dataset()?;
    let opts = ctx.cfg.eval_options(with_si);
    let dir = ctx.subdir("sweep")?;
    if !taus.is_empty() {
        let pre = ctx.pretrained()?;
        let raw = cached_or_computed(ctx, &task, None)?;
        let train = ctx.cfg.finetune_config(LossKind::Saic);
        let mut save = |tau: f64, ck: &CodecCheckpoint| ck.save(&dir.join(format!("saic_tau_{tau}.json")));
        let points = tau_sweep(&pre, &task, &raw, taus, &data, &train, &opts, &mut save)?;
        let written = write_tau_sweep(&dir, &points)?;
        print!("{}", saic::evaluation::tau_sweep_tsv(&points));
        println!("{}-point curve written to {}", points.len(), written[0].display());
        return Ok(());
    }
    let mut cells = vec![SweepCell {
        method: Method::Original,
        bpp: f64::NAN,
        checkpoint: PathBuf::new(),
    }];
    for run in runs {
        let nominal = match ExperimentConfig::load(&run.join(RESOLVED_CONFIG_FILE)) {
            Ok(c) => c.target_bpp,
            Err(e) => {
                warn!("{}: {e}", run.display());
                f64::NAN
            }
        };
        for (method, file) in [
            (Method::Tdic, "finetune_tdic.json"),
            (Method::Apic, "finetune_apic.json"),
            (Method::Saic, "finetune_saic.json"),
        ] {
            cells.push(SweepCell {
                method,
                bpp: nominal,
                checkpoint: run.join(file),
            });
        }
    }
    let rows = rate_sweep(&cells, &task, &data, &opts)?;
    let written = write_rate_sweep(&dir, &rows)?;
    print!("{}", saic::evaluation::rate_sweep_tsv(&rows));
    println!("rate sweep written to {}", written[0].display());
    Ok(())
}
