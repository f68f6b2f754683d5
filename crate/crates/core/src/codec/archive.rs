//! Archive byte layout (little-endian):
//!
//! ```text
//! magic "LDUR" | version u16 | M u32 | image side u32 | backend kind u8
//! latent shape u32 x3 | T u32 | beta_start f64 | beta_end f64
//! depth u32 | hidden u32 | heads u32 | patch u32 | mlp_ratio f64
//! embedding kind u8 | embedding seed u64 | conditioning kind u8
//! normalizer scale f32 | e u8 | m u8
//! tensor count u32, then per tensor: name (u16 len + bytes), ndim u8, dims u32
//! backend state: u32 len + bytes
//! value count u64 | blob len u64 | blob
//! CRC-32 of every preceding byte, u32
//! ```

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::conditioning::ConditioningKind;
use crate::denoiser::DenoiserConfig;
use crate::embedding::EmbeddingKind;
use crate::error::{invalid, Error, Result};
use crate::latent::BackendKind;
use crate::quantizer::{PackedWeights, QuantSpec};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"LDUR";
pub const ARCHIVE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub num_images: u32,
    pub image_side: u32,
    pub backend: BackendKind,
    pub steps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    pub config: DenoiserConfig,
    pub normalizer_scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub backend_state: Vec<u8>,
    pub weights: PackedWeights,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let h = &archive.header;
    let c = &h.config;
    let mut w = ByteWriter::new();
    w.bytes(ARCHIVE_MAGIC);
    w.u16(ARCHIVE_VERSION);
    w.u32(h.num_images);
    w.u32(h.image_side);
    w.u8(h.backend.code());
    for d in c.latent_shape {
        w.u32(u32_of(d, "latent dimension")?);
    }
    w.u32(h.steps);
    w.f64(h.beta_start);
    w.f64(h.beta_end);
    w.u32(u32_of(c.depth, "depth")?);
    w.u32(u32_of(c.hidden_size, "hidden size")?);
    w.u32(u32_of(c.num_heads, "head count")?);
    w.u32(u32_of(c.patch_size, "patch size")?);
    w.f64(c.mlp_ratio);
    w.u8(c.embedding.code());
    w.u64(c.embedding_seed);
    w.u8(c.conditioning.code());
    w.f32(h.normalizer_scale);
    let spec = archive.weights.spec;
    w.u8(spec.e_bits());
    w.u8(spec.m_bits());
    w.u32(u32_of(archive.weights.manifest.len(), "tensor count")?);
    for (name, shape) in &archive.weights.manifest {
        w.name(name)?;
        w.shape(shape)?;
    }
    w.u32(u32_of(archive.backend_state.len(), "backend state length")?);
    w.bytes(&archive.backend_state);
    w.u64(archive.weights.num_values as u64);
    w.u64(archive.weights.blob.len() as u64);
    w.bytes(&archive.weights.blob);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::CorruptArchive(msg),
        other => other,
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < ARCHIVE_MAGIC.len() + 6 {
        return Err(Error::Truncated { needed: ARCHIVE_MAGIC.len() + 6, available: bytes.len() });
    }
    if &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::CorruptArchive("bad archive magic".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CorruptArchive(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = ByteReader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::CorruptArchive(format!("unsupported archive version {version}")));
    }
    let num_images = r.u32()?;
    let image_side = r.u32()?;
    let backend = BackendKind::from_code(r.u8()?)?;
    let latent_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let steps = r.u32()?;
    let beta_start = r.f64()?;
    let beta_end = r.f64()?;
    let depth = r.u32()? as usize;
    let hidden_size = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let mlp_ratio = r.f64()?;
    let embedding = EmbeddingKind::from_code(r.u8()?)?;
    let embedding_seed = r.u64()?;
    let conditioning = ConditioningKind::from_code(r.u8()?)?;
    let normalizer_scale = r.f32()?;
    let (e, m) = (r.u8()?, r.u8()?);
    let spec = QuantSpec::new(e, m).map_err(corrupt)?;
    let count = r.u32()?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.shape()?;
        manifest.push((name, shape));
    }
    let state_len = r.u32()? as usize;
    let backend_state = r.take(state_len)?.to_vec();
    let num_values = usize::try_from(r.u64()?).map_err(|_| Error::CorruptArchive("value count overflows".into()))?;
    let blob_len = usize::try_from(r.u64()?).map_err(|_| Error::CorruptArchive("blob length overflows".into()))?;
    let blob = r.take(blob_len)?.to_vec();
    if r.remaining() != 0 {
        return Err(Error::CorruptArchive(format!("{} unexpected bytes before checksum", r.remaining())));
    }
    let config = DenoiserConfig {
        depth,
        hidden_size,
        num_heads,
        patch_size,
        latent_shape,
        embedding,
        num_images: num_images as u64,
        embedding_seed,
        conditioning,
        mlp_ratio,
    };
    config.validate().map_err(corrupt)?;
    if !(normalizer_scale > 0.0 && normalizer_scale.is_finite()) {
        return Err(Error::CorruptArchive(format!("normalizer scale {normalizer_scale}")));
    }
    let header = ArchiveHeader { num_images, image_side, backend, steps, beta_start, beta_end, config, normalizer_scale };
    let weights = PackedWeights { spec, num_values, blob, manifest };
    Ok(Archive { header, backend_state, weights })
}

/// Bit accounting of an encoded archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveBits {
    pub header_bits: u64,
    pub blob_bits: u64,
    pub total_bits: u64,
}

impl Archive {
    pub fn bits(&self) -> Result<ArchiveBits> {
        let total = encode_archive(self)?.len() as u64 * 8;
        let blob = self.weights.blob.len() as u64 * 8;
        Ok(ArchiveBits { header_bits: total - blob, blob_bits: blob, total_bits: total })
    }
}
