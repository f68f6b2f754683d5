//! One function per subcommand. Each writes only to the paths it is given and
//! logs JSON lines on stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use idxdiff_core::codec::{
    self, compress, fit, prepare_dataset, read_archive, verify_with, write_loss_csv, CodecModel, EpochLog, FitOptions,
    IndexImageDataset,
};
use idxdiff_core::conditioning::extra_param_count;
use idxdiff_core::denoiser::total_param_count;
use idxdiff_core::diffusion::Sampler;
use idxdiff_core::embedding::param_count;
use idxdiff_core::image::{format_psnr, psnr_from_mse, Image};
use idxdiff_core::latent::{BackendKind, ExternalLatents, LatentBackend, TinyAutoencoder};
use idxdiff_core::ledger::{comparison_report, dl_unicorn, read_baselines, write_report_csv, LabeledReport, RAW_BITS_PER_PIXEL};
use idxdiff_core::quantizer::QuantSpec;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::log::emit;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError { problems: vec![msg.into()] }.into()
}

pub fn prepare(image_dir: &Path, out_manifest: &Path, seed: u64) -> Result<()> {
    let ds = prepare_dataset(image_dir, seed)?;
    ds.write_manifest(out_manifest)?;
    emit("prepare", "prepared", json!({
        "images": ds.len(),
        "image_side": ds.image_side(),
        "seed": seed,
        "manifest": out_manifest.display().to_string(),
    }));
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<IndexImageDataset> {
    if config.manifest.is_empty() {
        return Err(config_error("`manifest` is required"));
    }
    Ok(IndexImageDataset::load(Path::new(&config.manifest))?)
}

fn build_backend(config: &RunConfig, ds: &IndexImageDataset, command: &str) -> Result<LatentBackend> {
    Ok(match config.backend_kind() {
        BackendKind::PixelIdentity => LatentBackend::PixelIdentity,
        BackendKind::TinyAutoencoder => {
            let (ae, mse) = TinyAutoencoder::train(&ds.images, config.autoencoder_options())?;
            emit(command, "autoencoder", json!({ "train_mse": mse, "train_psnr": format_psnr(psnr_from_mse(mse)) }));
            LatentBackend::Tiny(ae)
        }
        BackendKind::ExternalLatents => {
            LatentBackend::External(ExternalLatents::open(Path::new(&config.external_dir), &config.external_command)?)
        }
    })
}

fn log_epoch(command: &str, run: &str, e: &EpochLog) {
    emit(command, "epoch", json!({
        "run": run,
        "epoch": e.epoch,
        "lr": e.lr,
        "steps": e.steps,
        "mean_loss": e.mean_loss,
        "seconds": e.seconds,
    }));
}

/// Trains one model for `config` on `ds`.
pub fn fit_run(config: &RunConfig, ds: &IndexImageDataset, command: &str) -> Result<(CodecModel, Vec<EpochLog>)> {
    let backend = build_backend(config, ds, command)?;
    let latent_shape = backend.latent_shape(ds.image_side());
    let denoiser = config.denoiser_config(latent_shape, ds.len() as u64);
    denoiser.validate().map_err(|e| config_error(e.to_string()))?;
    let opts = FitOptions { train: config.train_options(), target_std: config.latent_std, init_seed: config.init_seed as u64 };
    let run = config.resolved_run_name(ds.len());
    let out = fit(ds, backend, denoiser, config.schedule()?, &opts, |e| log_epoch(command, &run, e))?;
    Ok(out)
}

pub fn train(config_path: &Path) -> Result<PathBuf> {
    let config = RunConfig::load(config_path)?;
    let ds = load_dataset(&config)?;
    let dir = config.run_dir(ds.len());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let (model, log) = fit_run(&config, &ds, "train")?;
    let ckpt = dir.join("model.idxt");
    model.save_checkpoint(&ckpt)?;
    let loss = fs::File::create(dir.join("loss.csv"))?;
    write_loss_csv(&log, loss)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    emit("train", "trained", json!({
        "run": config.resolved_run_name(ds.len()),
        "checkpoint": ckpt.display().to_string(),
        "params": model.denoiser.param_count(),
        "final_loss": log.last().map(|e| e.mean_loss),
        "normalizer_scale": model.normalizer.scale,
    }));
    Ok(ckpt)
}

pub fn pack(checkpoint: &Path, out_archive: &Path, e_bits: u8, m_bits: u8) -> Result<()> {
    let spec = QuantSpec::new(e_bits, m_bits)?;
    let model = CodecModel::load_checkpoint(checkpoint)?;
    let s = compress(&model, spec, out_archive)?;
    emit("pack", "packed", json!({
        "archive": out_archive.display().to_string(),
        "e_bits": e_bits,
        "m_bits": m_bits,
        "params": s.num_params,
        "model_bits": s.num_params as u64 * spec.total_bits() as u64,
        "blob_bits": s.bits.blob_bits,
        "header_bits": s.bits.header_bits,
        "total_bits": s.bits.total_bits,
        "num_images": s.report.num_images,
        "index_bits": s.report.index_or_code_bits,
        "bpp": s.report.bpp,
        "compression_ratio": s.report.compression_ratio,
    }));
    Ok(())
}

pub fn decode(archive: &Path, index: u64, seed: u64, sampler: Sampler, out_png: &Path) -> Result<()> {
    codec::decompress_file(archive, index, seed, sampler, out_png)?;
    emit("decode", "decoded", json!({
        "archive": archive.display().to_string(),
        "index": index,
        "seed": seed,
        "sampler": sampler.to_string(),
        "output": out_png.display().to_string(),
    }));
    Ok(())
}

/// Runs `scorer <decoded> <original>` and parses the first number it prints.
fn run_scorer(scorer: &str, decoded: &Path, original: &Path) -> Result<f64> {
    let mut parts = scorer.split_whitespace();
    let program = parts.next().context("empty scorer command")?;
    let out = Command::new(program)
        .args(parts)
        .arg(decoded)
        .arg(original)
        .output()
        .with_context(|| format!("running scorer `{scorer}`"))?;
    if !out.status.success() {
        bail!(idxdiff_core::Error::External(format!("scorer exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .with_context(|| format!("scorer printed no number: {text:?}"))
}

#[derive(Serialize)]
struct VerifyRow {
    index: u64,
    image_id: String,
    psnr: String,
    mse: f64,
    nearest_index: u64,
    matched: bool,
    score: Option<f64>,
}

pub struct VerifyArgs<'a> {
    pub archive: &'a Path,
    pub manifest: &'a Path,
    pub seed: u64,
    pub sampler: Sampler,
    pub out_csv: Option<&'a Path>,
    pub scorer: Option<&'a str>,
    pub work_dir: Option<&'a Path>,
}

pub fn verify(args: &VerifyArgs) -> Result<codec::VerifyReport> {
    let bytes = fs::read(args.archive).with_context(|| format!("reading {}", args.archive.display()))?;
    let archive = codec::decode_archive(&bytes)?;
    let model = CodecModel::from_archive(&archive)?;
    let ds = IndexImageDataset::load(args.manifest)?;
    let mut scores = Vec::new();
    if args.scorer.is_some() && args.work_dir.is_none() {
        return Err(config_error("--scorer needs --work-dir for the decoded images"));
    }
    if let Some(dir) = args.work_dir {
        fs::create_dir_all(dir)?;
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let report = verify_with(&ds, bytes.len() as u64 * 8, model.num_images(), |y| {
        let img = model.decompress(y, args.seed, args.sampler)?;
        if let (Some(scorer), Some(dir)) = (args.scorer, args.work_dir) {
            let png = dir.join(format!("{y}.png"));
            img.save_png(&png)?;
            let pos = ds.position_of(y).expect("verify checked the index");
            let original = base.join(&ds.rows[pos].filename);
            let s = run_scorer(scorer, &png, &original).map_err(|e| idxdiff_core::Error::External(format!("{e:#}")))?;
            scores.push(s);
        }
        Ok(img)
    })?;
    if let Some(path) = args.out_csv {
        let mut w = csv::Writer::from_path(path)?;
        for (i, r) in report.per_index.iter().enumerate() {
            w.serialize(VerifyRow {
                index: r.index,
                image_id: r.image_id.clone(),
                psnr: format_psnr(r.psnr),
                mse: r.mse,
                nearest_index: r.nearest_index,
                matched: r.matched,
                score: scores.get(i).copied(),
            })?;
        }
        w.flush()?;
    }
    let mean_score = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    emit("verify", "verified", json!({
        "archive": args.archive.display().to_string(),
        "num_images": report.per_index.len(),
        "matched": report.matched,
        "matching_accuracy": report.matching_accuracy,
        "mean_psnr": format_psnr(report.mean_psnr),
        "mean_mse": report.mean_mse,
        "bpp": report.bpp,
        "total_bits": report.report.total_bits,
        "mean_score": mean_score,
    }));
    Ok(report)
}

pub fn report(archives: &[PathBuf], baselines: &[PathBuf], m_values: &[u64], pixels_per_image: Option<u64>, out_csv: &Path) -> Result<()> {
    let mut reports = Vec::new();
    let mut ppi = pixels_per_image;
    for path in archives {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let a = codec::decode_archive(&bytes)?;
        let side = a.header.image_side as u64;
        let this_ppi = side * side;
        if *ppi.get_or_insert(this_ppi) != this_ppi {
            return Err(config_error(format!("{} has {side}x{side} images; all inputs must share one image size", path.display())));
        }
        let r = dl_unicorn(a.header.num_images as u64, bytes.len() as f64 * 8.0, this_ppi)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push(LabeledReport { label, report: r });
    }
    let ppi = match (ppi, baselines.is_empty()) {
        (Some(p), _) => p,
        (None, true) => return Err(config_error("nothing to report: give archives and/or baseline CSVs")),
        (None, false) => return Err(config_error("--pixels-per-image is required when no archive is given")),
    };
    for path in baselines {
        let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
        reports.extend(read_baselines(f, ppi)?);
    }
    let rows = comparison_report(&reports, RAW_BITS_PER_PIXEL * ppi as f64, m_values)?;
    write_report_csv(&rows, fs::File::create(out_csv)?)?;
    for r in &rows {
        emit("report", "row", serde_json::to_value(r)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Embedding,
    Conditioning,
    Quantization,
    Normalization,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "embedding" => Axis::Embedding,
            "conditioning" => Axis::Conditioning,
            "quantization" => Axis::Quantization,
            "normalization" => Axis::Normalization,
            other => return Err(config_error(format!("unknown axis `{other}` (embedding, conditioning, quantization, normalization)"))),
        })
    }
}

/// `5:10`, `e5m10` or a bare mantissa width (exponent from the base config).
pub fn parse_quant(value: &str, default_e: u8) -> Result<QuantSpec> {
    let v = value.trim().to_ascii_lowercase();
    let (e, m) = if let Some((e, m)) = v.split_once(':') {
        (e.parse::<u8>().ok(), m.parse::<u8>().ok())
    } else if let Some(rest) = v.strip_prefix('e') {
        match rest.split_once('m') {
            Some((e, m)) => (e.parse().ok(), m.parse().ok()),
            None => (None, None),
        }
    } else {
        (Some(default_e), v.parse().ok())
    };
    match (e, m) {
        (Some(e), Some(m)) => Ok(QuantSpec::new(e, m).map_err(|err| config_error(format!("`{value}`: {err}")))?),
        _ => Err(config_error(format!("`{value}` is not a quantization setting (e:m, eXmY or m)"))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub trainable_params: Option<usize>,
    pub total_params: Option<usize>,
    pub model_bits: Option<u64>,
    pub bpp: Option<f64>,
    pub mean_psnr: Option<String>,
    pub matching_accuracy: Option<f64>,
    pub failure: String,
}

struct Evaluated {
    model_bits: u64,
    bpp: f64,
    mean_psnr: f64,
    accuracy: f64,
}

fn evaluate(model: &CodecModel, ds: &IndexImageDataset, spec: QuantSpec, archive_path: &Path, config: &RunConfig) -> Result<Evaluated> {
    let summary = compress(model, spec, archive_path)?;
    let receiver = CodecModel::from_archive(&read_archive(archive_path)?)?;
    let sampler = config.sampler();
    let seed = config.noise_seed as u64;
    let r = verify_with(ds, summary.bits.total_bits, receiver.num_images(), |y| receiver.decompress(y, seed, sampler))?;
    Ok(Evaluated {
        model_bits: summary.num_params as u64 * spec.total_bits() as u64,
        bpp: r.bpp,
        mean_psnr: r.mean_psnr,
        accuracy: r.matching_accuracy,
    })
}

fn slug(value: &str) -> String {
    value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// Trains (or for quantization, packs) one run per value, holding the rest of
/// `config` fixed. Failed runs keep their row with the error in `failure`.
pub fn ablate(config_path: &Path, axis: Axis, values: &[String], out_dir: &Path) -> Result<Vec<AblationRow>> {
    let base = RunConfig::load(config_path)?;
    if values.is_empty() {
        return Err(config_error("--values is empty"));
    }
    let ds = load_dataset(&base)?;
    fs::create_dir_all(out_dir)?;
    let axis_name = format!("{axis:?}").to_ascii_lowercase();
    // Parse everything up front so a typo fails before any training.
    let mut variants = Vec::new();
    for v in values {
        let mut c = base.clone();
        match axis {
            Axis::Embedding => c.embedding = v.clone(),
            Axis::Conditioning => c.conditioning = v.clone(),
            Axis::Normalization => {
                c.latent_std = v.trim().parse().map_err(|_| config_error(format!("`{v}` is not a standard deviation")))?
            }
            Axis::Quantization => {
                let spec = parse_quant(v, base.e_bits as u8)?;
                c.e_bits = spec.e_bits() as i64;
                c.m_bits = spec.m_bits() as i64;
            }
        }
        c.validate()?;
        variants.push((v.clone(), c));
    }
    let shared = if axis == Axis::Quantization { Some(fit_run(&base, &ds, "ablate")) } else { None };
    let mut rows = Vec::new();
    for (value, c) in variants {
        let run_dir = out_dir.join(slug(&value));
        let outcome = (|| -> Result<(usize, usize, Evaluated)> {
            fs::create_dir_all(&run_dir)?;
            let trained;
            let model = match &shared {
                Some(Ok((m, _))) => m,
                Some(Err(e)) => bail!("{e:#}"),
                None => {
                    let (m, log) = fit_run(&c, &ds, "ablate")?;
                    write_loss_csv(&log, fs::File::create(run_dir.join("loss.csv"))?)?;
                    trained = m;
                    &trained
                }
            };
            let cfg = model.denoiser.config();
            let axis_params = match axis {
                Axis::Embedding => param_count(&cfg.embedding_spec()).trainable,
                Axis::Conditioning => cfg.depth * extra_param_count(&cfg.conditioning_spec()),
                _ => total_param_count(cfg),
            };
            let eval = evaluate(model, &ds, c.quant_spec(), &run_dir.join("archive.ldur"), &c)?;
            Ok((axis_params, total_param_count(cfg), eval))
        })();
        let row = match outcome {
            Ok((axis_params, total, e)) => AblationRow {
                axis: axis_name.clone(),
                value: value.clone(),
                trainable_params: Some(axis_params),
                total_params: Some(total),
                model_bits: Some(e.model_bits),
                bpp: Some(e.bpp),
                mean_psnr: Some(format_psnr(e.mean_psnr)),
                matching_accuracy: Some(e.accuracy),
                failure: String::new(),
            },
            Err(e) => AblationRow {
                axis: axis_name.clone(),
                value: value.clone(),
                trainable_params: None,
                total_params: None,
                model_bits: None,
                bpp: None,
                mean_psnr: None,
                matching_accuracy: None,
                failure: format!("{e:#}"),
            },
        };
        emit("ablate", "run", serde_json::to_value(&row)?);
        rows.push(row);
        // Rewrite after every run so partial results survive an interruption.
        let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Writes `count` seeded synthetic images as PNGs (for demos and smoke tests).
pub fn synth(out_dir: &Path, count: usize, side: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (i, img) in idxdiff_core::image::synthetic_images(count, side, seed).iter().enumerate() {
        img.save_png(&out_dir.join(format!("img{i:04}.png")))?;
    }
    emit("synth", "written", json!({ "dir": out_dir.display().to_string(), "count": count, "side": side, "seed": seed }));
    Ok(())
}

/// Loads an image, for callers that only need the metric helpers.
pub fn load_image(path: &Path) -> Result<Image> {
    Ok(Image::load(path)?)
}
