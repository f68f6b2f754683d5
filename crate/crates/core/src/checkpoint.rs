//! Host-side tensors and the binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "IDXT"            4 bytes
//! version                  u16
//! metadata length          u32, then UTF-8 JSON
//! tensor count             u32
//! per tensor, in name order:
//!     name length u16, name bytes
//!     ndim u8, dims u32 * ndim
//!     row-major f32 data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDXT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A dense row-major f32 tensor detached from any compute device.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type TensorMap = BTreeMap<String, TensorData>;

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(TensorData { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(TensorData { shape: t.dims().to_vec(), data })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| invalid(format!("name too long: {s}")))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
    pub fn shape(&mut self, shape: &[usize]) -> Result<()> {
        let ndim = u8::try_from(shape.len()).map_err(|_| invalid("too many dimensions"))?;
        self.u8(ndim);
        for &d in shape {
            self.u32(u32::try_from(d).map_err(|_| invalid("dimension too large"))?);
        }
        Ok(())
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated { needed: self.pos + n, available: self.buf.len() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CorruptArchive("tensor name is not UTF-8".into()))
    }
    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u8()? as usize;
        (0..ndim).map(|_| Ok(self.u32()? as usize)).collect()
    }
}

/// Serializes tensors (and optional JSON metadata) into the checkpoint layout.
pub fn encode_checkpoint(meta: &str, tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(u32::try_from(meta.len()).map_err(|_| invalid("metadata too large"))?);
    w.bytes(meta.as_bytes());
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.name(name)?;
        w.shape(&t.shape)?;
        w.buf.reserve(t.data.len() * 4);
        for &v in &t.data {
            w.f32(v);
        }
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, TensorMap)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptArchive("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptArchive(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::CorruptArchive("checkpoint metadata is not UTF-8".into()))?;
    let count = r.u32()?;
    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptArchive("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, TensorData { shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptArchive(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    Ok((meta, tensors))
}

pub fn write_checkpoint(path: &Path, meta: &str, tensors: &TensorMap) -> Result<()> {
    let bytes = encode_checkpoint(meta, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, TensorMap)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
