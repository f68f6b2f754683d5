//! End-to-end pipeline: fit a model to an index ↔ image set, pack it into an
//! archive, and decode images back from an index.

pub mod archive;
pub mod dataset;
pub mod train;

use std::path::Path;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, TensorMap};
use crate::denoiser::{build, Denoiser, DenoiserConfig};
use crate::diffusion::{linear_schedule, sample, NoiseSchedule, Sampler};
use crate::error::{invalid, Error, Result};
use crate::image::{mse, psnr_from_mse, Image};
use crate::latent::{fit_normalizer, BackendKind, LatentBackend, LatentNormalizer};
use crate::ledger::{dl_unicorn, DLReport};
use crate::nn::gaussian;
use crate::quantizer::{quantize_model, QuantSpec};

pub use archive::{decode_archive, encode_archive, Archive, ArchiveBits, ArchiveHeader};
pub use dataset::{assign_indices, prepare_dataset, IndexImageDataset, ManifestRow};
pub use train::{lr_at_epoch, train, write_loss_csv, EpochLog, TrainOptions};

/// Everything a receiver needs to turn an index into an image.
pub struct CodecModel {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub normalizer: LatentNormalizer,
    pub backend: LatentBackend,
    pub image_side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub train: TrainOptions,
    /// Standard deviation the latents are scaled to before training.
    pub target_std: f64,
    pub init_seed: u64,
}

/// Encodes the dataset, fits the normalizer and trains a fresh denoiser.
pub fn fit(
    dataset: &IndexImageDataset,
    backend: LatentBackend,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    opts: &FitOptions,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(CodecModel, Vec<EpochLog>)> {
    let side = dataset.image_side();
    let expected = backend.latent_shape(side);
    if config.latent_shape != expected {
        return Err(invalid(format!("config latent shape {:?} but backend produces {expected:?}", config.latent_shape)));
    }
    if config.num_images != dataset.len() as u64 {
        return Err(invalid(format!("config is for {} images, dataset has {}", config.num_images, dataset.len())));
    }
    let raw = backend.encode(&dataset.images, &dataset.ids())?;
    let normalizer = fit_normalizer(&raw, opts.target_std)?;
    let latents = normalizer.normalize(&raw)?;
    let denoiser = build(config, opts.init_seed, DType::F32)?;
    let log = train(&denoiser, &latents, &dataset.indices(), &schedule, &opts.train, on_epoch)?;
    Ok((CodecModel { denoiser, schedule, normalizer, backend, image_side: side }, log))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DenoiserConfig,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    normalizer_scale: f32,
    image_side: usize,
    backend: BackendKind,
    backend_state: Vec<u8>,
}

impl CodecModel {
    pub fn num_images(&self) -> u64 {
        self.denoiser.config().num_images
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: *self.denoiser.config(),
            steps: self.schedule.steps(),
            beta_start: self.schedule.beta_start(),
            beta_end: self.schedule.beta_end(),
            normalizer_scale: self.normalizer.scale,
            image_side: self.image_side,
            backend: self.backend.kind(),
            backend_state: self.backend.to_bytes()?,
        };
        write_checkpoint(path, &serde_json::to_string(&meta)?, &self.denoiser.params().export()?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (meta, weights) = read_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::CorruptArchive(format!("checkpoint metadata: {e}")))?;
        Self::assemble(
            meta.config,
            linear_schedule(meta.steps, meta.beta_start, meta.beta_end)?,
            LatentNormalizer { scale: meta.normalizer_scale },
            LatentBackend::from_bytes(meta.backend, &meta.backend_state)?,
            meta.image_side,
            &weights,
        )
    }

    fn assemble(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        normalizer: LatentNormalizer,
        backend: LatentBackend,
        image_side: usize,
        weights: &TensorMap,
    ) -> Result<Self> {
        let denoiser = build(config, 0, DType::F32)?;
        denoiser.params().import(weights)?;
        Ok(CodecModel { denoiser, schedule, normalizer, backend, image_side })
    }

    /// Quantizes the weights and lays out the archive. Also returns the
    /// dequantized weights the receiver will see.
    pub fn pack(&self, spec: QuantSpec) -> Result<(Archive, TensorMap)> {
        let (weights, dequantized) = quantize_model(&self.denoiser.params().export()?, spec)?;
        let header = ArchiveHeader {
            num_images: u32::try_from(self.num_images()).map_err(|_| invalid("more than 2^32 images"))?,
            image_side: self.image_side as u32,
            backend: self.backend.kind(),
            steps: self.schedule.steps() as u32,
            beta_start: self.schedule.beta_start(),
            beta_end: self.schedule.beta_end(),
            config: *self.denoiser.config(),
            normalizer_scale: self.normalizer.scale,
        };
        Ok((Archive { header, backend_state: self.backend.to_bytes()?, weights }, dequantized))
    }

    /// Rebuilds the receiver-side model from archive contents alone.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let h = &archive.header;
        let weights = archive.weights.unpack()?;
        Self::assemble(
            h.config,
            linear_schedule(h.steps as usize, h.beta_start, h.beta_end).map_err(|e| Error::CorruptArchive(e.to_string()))?,
            LatentNormalizer { scale: h.normalizer_scale },
            LatentBackend::from_bytes(h.backend, &archive.backend_state)?,
            h.image_side as usize,
            &weights,
        )
        .map_err(|e| match e {
            Error::InvalidArgument(m) | Error::InvalidValue(m) => Error::CorruptArchive(m),
            Error::ShapeMismatch { expected, actual } => {
                Error::CorruptArchive(format!("tensor shape {actual:?} where {expected:?} was expected"))
            }
            other => other,
        })
    }

    /// Runs the reverse process for index `y` and decodes the latent.
    /// Initial noise comes from ChaCha8 stream 0 of `seed`; sampler noise from stream 1.
    pub fn decompress(&self, y: u64, seed: u64, sampler: Sampler) -> Result<Image> {
        let m = self.num_images();
        if y >= m {
            return Err(Error::IndexOutOfRange { index: y, count: m });
        }
        let [c, h, w] = self.denoiser.config().latent_shape;
        let noise = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), &[1, c, h, w], DType::F32, self.denoiser.params().device())?;
        let z = sample(|x, t| self.denoiser.forward(x, &[t], &[y]), &noise, &self.schedule, sampler, seed)?;
        let raw = self.normalizer.denormalize(&z)?;
        self.backend
            .decode(&raw)?
            .pop()
            .ok_or_else(|| Error::External("backend returned no image".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressSummary {
    pub bits: ArchiveBits,
    pub num_params: usize,
    pub spec: QuantSpec,
    pub report: DLReport,
}

/// Writes the archive for `model` at `spec` and accounts its description length.
pub fn compress(model: &CodecModel, spec: QuantSpec, path: &Path) -> Result<CompressSummary> {
    let (archive, _) = model.pack(spec)?;
    let bytes = encode_archive(&archive)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let bits = archive.bits()?;
    let ppi = (model.image_side * model.image_side) as u64;
    let report = dl_unicorn(model.num_images(), bits.total_bits as f64, ppi)?;
    Ok(CompressSummary { bits, num_params: archive.weights.num_values, spec, report })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

/// Decodes `y` from an archive file and writes a PNG. Nothing is written on error.
pub fn decompress_file(archive: &Path, y: u64, seed: u64, sampler: Sampler, out_png: &Path) -> Result<Image> {
    let model = CodecModel::from_archive(&read_archive(archive)?)?;
    let img = model.decompress(y, seed, sampler)?;
    img.save_png(out_png)?;
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexResult {
    pub index: u64,
    pub image_id: String,
    pub mse: f64,
    pub psnr: f64,
    /// Index of the dataset image closest (MSE) to the decoded one.
    pub nearest_index: u64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub per_index: Vec<IndexResult>,
    pub mean_psnr: f64,
    pub mean_mse: f64,
    pub matched: usize,
    pub matching_accuracy: f64,
    pub bpp: f64,
    pub report: DLReport,
}

/// Decodes every index exactly as a receiver would and scores it against the
/// dataset. Decoded images are 8-bit quantized as in the written PNGs.
pub fn verify(
    model: &CodecModel,
    dataset: &IndexImageDataset,
    archive_bits: u64,
    seed: u64,
    sampler: Sampler,
) -> Result<VerifyReport> {
    verify_with(dataset, archive_bits, model.num_images(), |y| model.decompress(y, seed, sampler))
}

/// [`verify`] over an arbitrary decoder, e.g. one that applies an external scorer.
pub fn verify_with(
    dataset: &IndexImageDataset,
    archive_bits: u64,
    num_images: u64,
    mut decode: impl FnMut(u64) -> Result<Image>,
) -> Result<VerifyReport> {
    if num_images != dataset.len() as u64 {
        return Err(invalid(format!("archive holds {num_images} images, dataset has {}", dataset.len())));
    }
    let mut per_index = Vec::with_capacity(dataset.len());
    for y in 0..num_images {
        let pos = dataset.position_of(y).ok_or_else(|| Error::Lookup(format!("no image has index {y}")))?;
        let decoded = decode(y)?.quantized_8bit();
        let mut best = (f64::INFINITY, 0u64);
        for (img, row) in dataset.images.iter().zip(&dataset.rows) {
            let d = mse(&decoded, img)?;
            if d < best.0 {
                best = (d, row.index);
            }
        }
        let own = mse(&decoded, &dataset.images[pos])?;
        per_index.push(IndexResult {
            index: y,
            image_id: dataset.rows[pos].image_id.clone(),
            mse: own,
            psnr: psnr_from_mse(own),
            nearest_index: best.1,
            matched: best.1 == y,
        });
    }
    let n = per_index.len() as f64;
    let matched = per_index.iter().filter(|r| r.matched).count();
    let report = dl_unicorn(num_images, archive_bits as f64, dataset.pixels_per_image())?;
    Ok(VerifyReport {
        mean_psnr: per_index.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_mse: per_index.iter().map(|r| r.mse).sum::<f64>() / n,
        matched,
        matching_accuracy: matched as f64 / n,
        bpp: report.bpp,
        report,
        per_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditioningKind;
    use crate::embedding::EmbeddingKind;
    use crate::image::synthetic_images;

    fn small_model(m: usize) -> (IndexImageDataset, CodecModel) {
        let imgs = synthetic_images(m, 8, 2);
        let ids = (0..m).map(|i| format!("s{i}")).collect();
        let ds = IndexImageDataset::from_images(imgs, ids, 5).unwrap();
        let config = DenoiserConfig {
            depth: 1,
            hidden_size: 16,
            num_heads: 2,
            patch_size: 4,
            latent_shape: [3, 8, 8],
            embedding: EmbeddingKind::Grf,
            num_images: m as u64,
            embedding_seed: 1,
            conditioning: ConditioningKind::Cag,
            mlp_ratio: 2.0,
        };
        let opts = FitOptions {
            train: TrainOptions { epochs: 2, lr: 1e-3, halve_every: 1, batch_size: 4, repeats_per_epoch: 2, seed: 3 },
            target_std: 1.0 / 3.0,
            init_seed: 4,
        };
        let (model, _) = fit(&ds, LatentBackend::PixelIdentity, config, NoiseSchedule::default_for(8).unwrap(), &opts, |_| {}).unwrap();
        (ds, model)
    }

    #[test]
    fn checkpoint_and_lossless_archive_agree() {
        let (ds, model) = small_model(4);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.idxt");
        model.save_checkpoint(&ckpt).unwrap();
        let reloaded = CodecModel::load_checkpoint(&ckpt).unwrap();
        let path = dir.path().join("a.ldur");
        let summary = compress(&reloaded, QuantSpec::FULL, &path).unwrap();
        let receiver = CodecModel::from_archive(&read_archive(&path).unwrap()).unwrap();
        assert_eq!(receiver.denoiser.params().export().unwrap(), model.denoiser.params().export().unwrap());
        let a = verify(&model, &ds, summary.bits.total_bits, 0, Sampler::default()).unwrap();
        let b = verify(&receiver, &ds, summary.bits.total_bits, 0, Sampler::default()).unwrap();
        assert_eq!(a, b);
        let expected_bpp = (4.0 * 2.0 + summary.bits.total_bits as f64) / (4.0 * 64.0);
        assert!((a.bpp - expected_bpp).abs() < 1e-9);
    }

    #[test]
    fn decompress_checks_index_and_is_deterministic() {
        let (_, model) = small_model(3);
        assert!(matches!(model.decompress(3, 0, Sampler::default()), Err(Error::IndexOutOfRange { .. })));
        let a = model.decompress(1, 7, Sampler::default()).unwrap();
        assert_eq!(a, model.decompress(1, 7, Sampler::default()).unwrap());
        let b = model.decompress(1, 7, Sampler::Ddpm).unwrap();
        assert_eq!(b, model.decompress(1, 7, Sampler::Ddpm).unwrap());
    }

    #[test]
    fn blob_size_at_16_bits() {
        let (_, model) = small_model(2);
        let (archive, _) = model.pack(QuantSpec::new(5, 10).unwrap()).unwrap();
        let p = model.denoiser.param_count();
        assert_eq!(archive.weights.num_values, p);
        assert_eq!(archive.weights.blob.len(), (p * 16).div_ceil(8));
    }

    #[test]
    fn mismatched_config_rejected() {
        let imgs = synthetic_images(2, 8, 2);
        let ds = IndexImageDataset::from_images(imgs, vec!["a".into(), "b".into()], 0).unwrap();
        let config = DenoiserConfig {
            depth: 1,
            hidden_size: 8,
            num_heads: 2,
            patch_size: 4,
            latent_shape: [3, 16, 16],
            embedding: EmbeddingKind::Grf,
            num_images: 2,
            embedding_seed: 1,
            conditioning: ConditioningKind::Icc,
            mlp_ratio: 2.0,
        };
        let opts = FitOptions { train: TrainOptions::default(), target_std: 1.0 / 3.0, init_seed: 0 };
        assert!(fit(&ds, LatentBackend::PixelIdentity, config, NoiseSchedule::default_for(4).unwrap(), &opts, |_| {}).is_err());
    }
}
