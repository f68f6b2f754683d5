//! Image ↔ latent backends and the global-scale latent normalizer.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, TensorData, TensorMap};
use crate::denoiser::{patchify, unpatchify};
use crate::error::{invalid, Error, Result};
use crate::image::{stack, unstack, Image};
use crate::nn::{mse, Init, Linear, ParamStore};

pub const DEFAULT_TARGET_STD: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentNormalizer {
    /// Multiplier applied to raw latents.
    pub scale: f32,
}

/// `scale = target_std / std(latents)`, with the standard deviation taken
/// over every element of the dataset.
pub fn fit_normalizer(latents: &Tensor, target_std: f64) -> Result<LatentNormalizer> {
    if !(target_std > 0.0 && target_std.is_finite()) {
        return Err(invalid(format!("target std must be positive, got {target_std}")));
    }
    let values = latents.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.is_empty() {
        return Err(Error::Degenerate("no latents to fit a normalizer on".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Degenerate(format!("latent variance is {var}")));
    }
    Ok(LatentNormalizer { scale: (target_std / var.sqrt()) as f32 })
}

impl LatentNormalizer {
    pub const IDENTITY: LatentNormalizer = LatentNormalizer { scale: 1.0 };

    pub fn normalize(&self, latents: &Tensor) -> Result<Tensor> {
        Ok((latents * self.scale as f64)?)
    }

    pub fn denormalize(&self, latents: &Tensor) -> Result<Tensor> {
        Ok((latents / self.scale as f64)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    PixelIdentity,
    TinyAutoencoder,
    ExternalLatents,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::PixelIdentity, BackendKind::TinyAutoencoder, BackendKind::ExternalLatents];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::CorruptArchive(format!("unknown backend kind {code}")))
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::PixelIdentity => "pixel",
            BackendKind::TinyAutoencoder => "tiny-ae",
            BackendKind::ExternalLatents => "external",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pixel" | "pixel-identity" => Ok(BackendKind::PixelIdentity),
            "tiny-ae" | "tiny-autoencoder" => Ok(BackendKind::TinyAutoencoder),
            "external" | "external-latents" => Ok(BackendKind::ExternalLatents),
            other => Err(invalid(format!("unknown backend `{other}` (pixel, tiny-ae, external)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderOptions {
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderOptions {
    fn default() -> Self {
        AutoencoderOptions { latent_channels: 8, hidden: 64, steps: 3000, batch_size: 256, lr: 2e-3, seed: 0 }
    }
}

/// Patch-wise autoencoder: a stride-2, kernel-2 convolution expressed as an
/// MLP over 2x2 RGB patches (12 values) to `latent_channels`, and back.
pub struct TinyAutoencoder {
    latent_channels: usize,
    hidden: usize,
    encoder: Option<(ParamStore, Linear, Linear)>,
    decoder_store: ParamStore,
    dec1: Linear,
    dec2: Linear,
}

const AE_PATCH: usize = 2;
const AE_IN: usize = 3 * AE_PATCH * AE_PATCH;

#[derive(Serialize, Deserialize)]
struct AutoencoderMeta {
    latent_channels: usize,
    hidden: usize,
}

fn ae_decoder(store: &mut ParamStore, c: usize, hidden: usize) -> Result<(Linear, Linear)> {
    Ok((
        Linear::new(store, "dec.fc1", c, hidden, Init::Xavier)?,
        Linear::new(store, "dec.fc2", hidden, AE_IN, Init::Xavier)?,
    ))
}

impl TinyAutoencoder {
    /// Fits the autoencoder to the patches of `images`; returns it with the
    /// final training MSE.
    pub fn train(images: &[Image], opts: AutoencoderOptions) -> Result<(Self, f64)> {
        if opts.latent_channels == 0 || opts.hidden == 0 || opts.batch_size == 0 {
            return Err(invalid("autoencoder sizes must be positive"));
        }
        let x = stack(images, &Device::Cpu)?;
        let (_, _, h, w) = x.dims4()?;
        if h % AE_PATCH != 0 || w % AE_PATCH != 0 {
            return Err(invalid(format!("image size {h}x{w} is not divisible by {AE_PATCH}")));
        }
        let patches = patchify(&x, AE_PATCH)?.reshape(((), AE_IN))?;
        let rows = patches.dim(0)?;
        let mut enc_store = ParamStore::new(opts.seed, DType::F32);
        let enc1 = Linear::new(&mut enc_store, "enc.fc1", AE_IN, opts.hidden, Init::Xavier)?;
        let enc2 = Linear::new(&mut enc_store, "enc.fc2", opts.hidden, opts.latent_channels, Init::Xavier)?;
        let mut dec_store = ParamStore::new(opts.seed.wrapping_add(1), DType::F32);
        let (dec1, dec2) = ae_decoder(&mut dec_store, opts.latent_channels, opts.hidden)?;
        let mut vars = enc_store.vars();
        vars.extend(dec_store.vars());
        let mut opt = AdamW::new(vars, ParamsAdamW { lr: opts.lr, weight_decay: 0.0, ..Default::default() })?;
        let ae = TinyAutoencoder {
            latent_channels: opts.latent_channels,
            hidden: opts.hidden,
            encoder: Some((enc_store, enc1, enc2)),
            decoder_store: dec_store,
            dec1,
            dec2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<u32> = (0..rows as u32).collect();
        let mut cursor = rows;
        for step in 0..opts.steps {
            // Cosine decay keeps the last steps fine-grained.
            let progress = step as f64 / opts.steps as f64;
            opt.set_learning_rate(opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            if cursor + opts.batch_size > rows {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = opts.batch_size.min(rows);
            let ids = Tensor::from_slice(&order[cursor..cursor + take], take, &Device::Cpu)?;
            cursor += take;
            let batch = patches.index_select(&ids, 0)?;
            let loss = mse(&ae.decode_rows(&ae.encode_rows(&batch)?)?, &batch)?;
            opt.backward_step(&loss)?;
        }
        let final_mse = mse(&ae.decode_rows(&ae.encode_rows(&patches)?)?, &patches)?.to_scalar::<f32>()? as f64;
        Ok((ae, final_mse))
    }

    fn encode_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let (_, e1, e2) = self.encoder.as_ref().ok_or_else(|| invalid("autoencoder was loaded decoder-only"))?;
        e2.forward(&e1.forward(rows)?.silu()?)
    }

    fn decode_rows(&self, rows: &Tensor) -> Result<Tensor> {
        self.dec2.forward(&self.dec1.forward(rows)?.silu()?)
    }

    pub fn latent_shape(&self, image_side: usize) -> [usize; 3] {
        [self.latent_channels, image_side / AE_PATCH, image_side / AE_PATCH]
    }

    /// `(N, 3, s, s)` → `(N, c, s/2, s/2)`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = images.dims4()?;
        let z = self.encode_rows(&patchify(images, AE_PATCH)?)?;
        let shape = [self.latent_channels, h / AE_PATCH, w / AE_PATCH];
        unpatchify(&z.reshape((n, (h / AE_PATCH) * (w / AE_PATCH), self.latent_channels))?, 1, shape)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = latents.dims4()?;
        let rows = self.decode_rows(&patchify(&latents.to_dtype(DType::F32)?, 1)?)?;
        unpatchify(&rows, AE_PATCH, [3, h * AE_PATCH, w * AE_PATCH])
    }

    /// Decoder weights in checkpoint format; this is all a receiver needs.
    pub fn decoder_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&AutoencoderMeta { latent_channels: self.latent_channels, hidden: self.hidden })?;
        encode_checkpoint(&meta, &self.decoder_store.export()?)
    }

    pub fn from_decoder_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode_checkpoint(bytes)?;
        let meta: AutoencoderMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::CorruptArchive(format!("autoencoder metadata: {e}")))?;
        let mut store = ParamStore::new(0, DType::F32);
        let (dec1, dec2) = ae_decoder(&mut store, meta.latent_channels, meta.hidden)
            .map_err(|e| Error::CorruptArchive(e.to_string()))?;
        store.import(&tensors).map_err(|e| Error::CorruptArchive(e.to_string()))?;
        Ok(TinyAutoencoder {
            latent_channels: meta.latent_channels,
            hidden: meta.hidden,
            encoder: None,
            decoder_store: store,
            dec1,
            dec2,
        })
    }
}

/// Latents precomputed by an outside encoder, one checkpoint file per image
/// (tensor `latent`), listed in `manifest.csv` with columns `image_id,file`.
/// Decoding runs `command <latent file> <output png>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalLatents {
    pub dir: Option<PathBuf>,
    pub latent_shape: [usize; 3],
    pub command: String,
}

#[derive(Deserialize)]
struct ExternalRow {
    image_id: String,
    file: String,
}

impl ExternalLatents {
    pub const MANIFEST: &'static str = "manifest.csv";
    pub const TENSOR: &'static str = "latent";

    pub fn open(dir: &Path, command: &str) -> Result<Self> {
        let rows = Self::rows(dir)?;
        let first = rows.first().ok_or_else(|| Error::Degenerate(format!("{} lists no latents", dir.display())))?;
        let t = Self::read_latent(&dir.join(&first.file))?;
        let latent_shape: [usize; 3] = t
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| invalid(format!("external latents must be (c, h, w), got {:?}", t.shape)))?;
        Ok(ExternalLatents { dir: Some(dir.to_path_buf()), latent_shape, command: command.to_string() })
    }

    fn rows(dir: &Path) -> Result<Vec<ExternalRow>> {
        let path = dir.join(Self::MANIFEST);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(Error::from)).collect()
    }

    fn read_latent(path: &Path) -> Result<TensorData> {
        let (_, mut map) = read_checkpoint(path)?;
        map.remove(Self::TENSOR)
            .ok_or_else(|| Error::Lookup(format!("{} has no `{}` tensor", path.display(), Self::TENSOR)))
    }

    pub fn write_latent(path: &Path, latent: &Tensor) -> Result<()> {
        let mut map = TensorMap::new();
        map.insert(Self::TENSOR.to_string(), TensorData::from_tensor(latent)?);
        crate::checkpoint::write_checkpoint(path, "", &map)
    }

    pub fn encode(&self, ids: &[String]) -> Result<Tensor> {
        let dir = self.dir.as_ref().ok_or_else(|| invalid("external latents have no source directory"))?;
        let rows = Self::rows(dir)?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let row = rows
                .iter()
                .find(|r| &r.image_id == id)
                .ok_or_else(|| Error::Lookup(format!("no external latent for image `{id}`")))?;
            let t = Self::read_latent(&dir.join(&row.file))?;
            if t.shape != self.latent_shape {
                return Err(Error::ShapeMismatch { expected: self.latent_shape.to_vec(), actual: t.shape });
            }
            out.push(t.to_tensor(DType::F32, &Device::Cpu)?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Vec<Image>> {
        let mut parts = self.command.split_whitespace();
        let program = parts.next().ok_or_else(|| invalid("empty external decode command"))?;
        let args: Vec<&str> = parts.collect();
        let scratch = std::env::temp_dir().join(format!("idxdiff-ext-{}", std::process::id()));
        std::fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        let mut images = Vec::new();
        for i in 0..latents.dim(0)? {
            let lat = scratch.join(format!("{i}.idxt"));
            let png = scratch.join(format!("{i}.png"));
            Self::write_latent(&lat, &latents.get(i)?)?;
            let status = Command::new(program)
                .args(&args)
                .arg(&lat)
                .arg(&png)
                .status()
                .map_err(|e| Error::External(format!("{program}: {e}")))?;
            if !status.success() {
                return Err(Error::External(format!("`{}` exited with {status}", self.command)));
            }
            images.push(Image::load(&png)?);
        }
        let _ = std::fs::remove_dir_all(&scratch);
        Ok(images)
    }
}

pub enum LatentBackend {
    PixelIdentity,
    Tiny(TinyAutoencoder),
    External(ExternalLatents),
}

impl LatentBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            LatentBackend::PixelIdentity => BackendKind::PixelIdentity,
            LatentBackend::Tiny(_) => BackendKind::TinyAutoencoder,
            LatentBackend::External(_) => BackendKind::ExternalLatents,
        }
    }

    pub fn latent_shape(&self, image_side: usize) -> [usize; 3] {
        match self {
            LatentBackend::PixelIdentity => [3, image_side, image_side],
            LatentBackend::Tiny(ae) => ae.latent_shape(image_side),
            LatentBackend::External(ext) => ext.latent_shape,
        }
    }

    /// Images (with their ids, used by external latents) → `(N, c, h, w)` f32.
    pub fn encode(&self, images: &[Image], ids: &[String]) -> Result<Tensor> {
        match self {
            LatentBackend::PixelIdentity => Ok(((stack(images, &Device::Cpu)? * 2.0)? - 1.0)?),
            LatentBackend::Tiny(ae) => ae.encode(&stack(images, &Device::Cpu)?),
            LatentBackend::External(ext) => ext.encode(ids),
        }
    }

    /// `(N, c, h, w)` → images clamped to `[0, 1]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Vec<Image>> {
        let latents = latents.to_dtype(DType::F32)?;
        let pixels = match self {
            LatentBackend::PixelIdentity => ((latents + 1.0)? / 2.0)?,
            LatentBackend::Tiny(ae) => ae.decode(&latents)?,
            LatentBackend::External(ext) => return ext.decode(&latents),
        };
        unstack(&pixels.clamp(0f32, 1f32)?)
    }

    /// Receiver-side state stored in the archive.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            LatentBackend::PixelIdentity => Ok(Vec::new()),
            LatentBackend::Tiny(ae) => ae.decoder_bytes(),
            LatentBackend::External(ext) => {
                let receiver = ExternalLatents { dir: None, ..ext.clone() };
                Ok(serde_json::to_vec(&receiver)?)
            }
        }
    }

    pub fn from_bytes(kind: BackendKind, bytes: &[u8]) -> Result<Self> {
        match kind {
            BackendKind::PixelIdentity if bytes.is_empty() => Ok(LatentBackend::PixelIdentity),
            BackendKind::PixelIdentity => Err(Error::CorruptArchive("pixel backend carries no state".into())),
            BackendKind::TinyAutoencoder => Ok(LatentBackend::Tiny(TinyAutoencoder::from_decoder_bytes(bytes)?)),
            BackendKind::ExternalLatents => serde_json::from_slice(bytes)
                .map(LatentBackend::External)
                .map_err(|e| Error::CorruptArchive(format!("external backend state: {e}"))),
        }
    }
}

/// Global standard deviation of a tensor (about its mean).
pub fn global_std(t: &Tensor) -> Result<f64> {
    let t = t.flatten_all()?.to_dtype(DType::F64)?;
    let centered = t.broadcast_sub(&t.mean_keepdim(D::Minus1)?)?;
    Ok(centered.sqr()?.mean_all()?.to_scalar::<f64>()?.sqrt())
}
